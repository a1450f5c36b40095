#pragma once

#include <functional>
#include <string>
#include <vector>

#include "zonosafe/config.hpp"
#include "zonosafe/simlab.hpp"
#include "zonosafe/trainer.hpp"

namespace zonosafe {

/// Fits dynamics, heads and bounds on a trained encoder, then calibrates the
/// margin-mode delta on Set runs of the configured scenarios.
inline LatentSafetyModel fit_and_calibrate(const Mlp& encoder, const Mlp& decoder, const TeacherHead& teacher,
                                           const std::vector<Sample>& data, const Config& cfg, int workers = 1) {
  LatentSafetyModel m = fit_safety_model(encoder, decoder, teacher, data, cfg.sim.gate, cfg.sim.plant, cfg.fit);
  m.margin_delta = calibrate_margin_delta(m, cfg.sim, cfg.scenarios, workers);
  m.metadata["margin_delta_source"] = "mean spread of set-mode runs";
  return m;
}

struct TrainedModel {
  LatentSafetyModel model;
  std::vector<LossBreakdown> history;
};

inline TrainedModel train_and_fit(const std::vector<Sample>& data, const Config& cfg, int workers = 1,
                                  const std::function<void(int, const LossBreakdown&)>& on_epoch = {}) {
  const TrainResult tr = train(data, cfg.train, cfg.sim.plant.dt, on_epoch);
  TrainedModel out;
  out.model = fit_and_calibrate(tr.encoder, tr.decoder, tr.teacher, data, cfg, workers);
  out.model.metadata["train_samples"] = std::to_string(data.size());
  out.model.metadata["train_epochs"] = std::to_string(cfg.train.epochs);
  out.model.metadata["train_seed"] = std::to_string(cfg.train.seed);
  out.history = tr.history;
  return out;
}

}  // namespace zonosafe
