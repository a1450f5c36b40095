#pragma once

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "zonosafe/certificates.hpp"
#include "zonosafe/model.hpp"
#include "zonosafe/plant.hpp"
#include "zonosafe/qp.hpp"
#include "zonosafe/zonotope.hpp"

namespace zonosafe {

/// Per-dimension half-widths of the state uncertainty box.
struct UncertaintyBudget {
  StateVec eps = StateVec::Zero();

  /// 0.05 on positions and velocities, 0.02 on angles and angular rates.
  static UncertaintyBudget standard() {
    UncertaintyBudget b;
    b.eps.head<6>().setConstant(0.05);
    b.eps.tail<10>().setConstant(0.02);
    return b;
  }
  static UncertaintyBudget zero() { return {}; }

  void validate() const {
    if (!eps.allFinite() || (eps.array() < 0.0).any()) {
      throw std::invalid_argument("UncertaintyBudget: half-widths must be finite and >= 0");
    }
  }
};

enum class LgSource { FiniteDifference, LearnedB };

struct CbfConfig {
  double alpha = 2.0;
  EvalMode mode = EvalMode::set();
  LgSource lg_source = LgSource::FiniteDifference;
  double fd_delta = 1e-3;
  /// Use min_z w^T (A + alpha I) z + alpha b instead of the split minima.
  bool joint_form = false;

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("CbfConfig: alpha must be > 0");
    if (!(fd_delta > 0.0)) throw std::invalid_argument("CbfConfig: fd_delta must be > 0");
  }
};

inline Zonotope build_state_zonotope(const PlantState& x, const UncertaintyBudget& budget) {
  budget.validate();
  return Zonotope::box(Vec(x.to_vector()), Vec(budget.eps));
}

struct CbfTerms {
  double h_min = 0.0;
  double lf_min = 0.0;
};

/// Worst-case barrier value and drift term over the latent set, minimised
/// separately. `drift` is the continuous-time latent drift matrix.
inline CbfTerms cbf_terms(const Zonotope& z, const BarrierHead& head, const Mat& drift) {
  return {eval_set(head, z), linear_min(drift.transpose() * head.w, 0.0, z)};
}

/// min over Z of w^T (A + alpha I) z + alpha b, minimised jointly.
inline double joint_cbf_term(const Zonotope& z, const BarrierHead& head, const Mat& drift, double alpha) {
  const Vec dir = drift.transpose() * head.w + alpha * head.w;
  return linear_min(dir, alpha * head.b, z);
}

struct NominalConfig {
  double beyond_gate = 3.0;    // waypoint distance past the gate plane
  double cruise_speed = 2.2;
  double k_along = 1.0;        // 1/s, along-track position gain
  double k_cross = 1.5;        // 1/s, cross-track position gain
  double cross_speed_max = 1.5;
  double k_vel = 2.0;          // 1/s, velocity gain
};

/// Waypoint beyond the gate, raised so that quad and load clear the top and
/// bottom frame by equal amounts when the rod hangs straight down.
inline Eigen::Vector3d gate_waypoint(const GateSpec& gate, const PlantParams& params, const NominalConfig& cfg) {
  const double stack_offset = 0.5 * (params.rod_length + params.r_load - params.r_quad);
  return {gate.x_plane + cfg.beyond_gate, gate.center_y, gate.center_z + stack_offset};
}

/// PD law on position and velocity toward a waypoint, capped at cruise speed
/// along x.
inline Accel nominal_input(const PlantState& x, const Eigen::Vector3d& waypoint, const NominalConfig& cfg,
                           double mu_max) {
  const Eigen::Vector3d d = waypoint - x.p;
  Eigen::Vector3d v_des;
  v_des.x() = std::clamp(cfg.k_along * d.x(), -cfg.cruise_speed, cfg.cruise_speed);
  v_des.y() = std::clamp(cfg.k_cross * d.y(), -cfg.cross_speed_max, cfg.cross_speed_max);
  v_des.z() = std::clamp(cfg.k_cross * d.z(), -cfg.cross_speed_max, cfg.cross_speed_max);
  const Accel a = cfg.k_vel * (v_des - x.v);
  return a.cwiseMax(-mu_max).cwiseMin(mu_max);
}

struct SafeInputResult {
  QpResult qp;
  CertReport report;
  std::vector<LinearConstraint> constraints;
  std::vector<double> h_used;   // certificate value the constraint used, per head
  std::vector<double> lf_used;  // drift term the constraint used, per head
  double set_forward_ms = 0.0;
  double certificate_qp_ms = 0.0;
};

/// One step of the set-valued latent CBF filter. In point and margin modes
/// the latent set is still computed (for reporting) but the constraint uses
/// its center.
inline SafeInputResult safe_input(const PlantState& x, const Accel& mu_nom, const LatentSafetyModel& model,
                                  const CbfConfig& cfg, const UncertaintyBudget& budget, const PlantParams& params) {
  using clock = std::chrono::steady_clock;
  SafeInputResult out;
  const auto t0 = clock::now();
  const Zonotope latent = forward_set(model.encoder, build_state_zonotope(x, budget));
  const auto t1 = clock::now();

  out.report = report(model.heads, latent);
  const Mat drift = model.dynamics.drift();
  const Mat input = model.dynamics.input_matrix();
  const bool use_set = cfg.mode.kind == EvalKind::Set;

  for (std::size_t i = 0; i < model.heads.size(); ++i) {
    const auto& head = model.heads[i];
    const auto& rep = out.report.heads[i];
    double h = rep.h_point;
    if (cfg.mode.kind == EvalKind::Set) h = rep.h_set;
    if (cfg.mode.kind == EvalKind::PointMargin) h = rep.h_point - cfg.mode.delta;
    const Vec lf_dir = drift.transpose() * head.w;
    const double lf = use_set ? linear_min(lf_dir, 0.0, latent) : lf_dir.dot(latent.center());

    double c = lf + cfg.alpha * h;
    if (cfg.joint_form) {
      c = use_set ? joint_cbf_term(latent, head, drift, cfg.alpha)
                  : (lf_dir + cfg.alpha * head.w).dot(latent.center()) + cfg.alpha * head.b;
      if (cfg.mode.kind == EvalKind::PointMargin) c -= cfg.alpha * cfg.mode.delta;
    }
    c -= head.eps_dir;

    Eigen::Vector3d a;
    if (cfg.lg_source == LgSource::FiniteDifference) {
      a = lie_g_fd(x, head, model.encoder, params, cfg.fd_delta, mu_nom);
    } else {
      a = input.transpose() * head.w;
    }
    out.constraints.push_back({a, c});
    out.h_used.push_back(h);
    out.lf_used.push_back(lf);
  }
  out.qp = solve_qp(mu_nom, out.constraints, InputBounds::symmetric(params.mu_max));
  const auto t2 = clock::now();
  out.set_forward_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  out.certificate_qp_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
  return out;
}

}  // namespace zonosafe
