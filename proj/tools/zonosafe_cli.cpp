#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "zonosafe/pipeline.hpp"

namespace fs = std::filesystem;
using namespace zonosafe;

namespace {

enum Exit : int {
  kOk = 0,
  kUsage = 1,
  kConfigError = 2,
  kIoError = 3,
  kCollision = 4,
  kDiverged = 5,
  kTimeout = 6,
  kFailed = 7,
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string model;
  std::string dataset;
  std::string out_dir = ".";
  std::string trace_dir;
  std::string scenario = "all";
  std::string mode = "all";
  std::optional<std::uint64_t> seed;
  int parallel = 1;
  bool quiet = false;
};

Config load(const Options& o) { return o.config.empty() ? default_config() : load_config(o.config); }

void ensure_dir(const std::string& d) {
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) throw std::ios_base::failure("cannot create directory '" + d + "': " + ec.message());
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  out << text;
}

std::string dataset_path(const Options& o) {
  return o.dataset.empty() ? path_in(o.out_dir, "dataset.csv") : o.dataset;
}

std::vector<Sample> load_dataset(const Options& o) {
  const auto p = dataset_path(o);
  if (!fs::exists(p)) throw std::ios_base::failure("dataset file '" + p + "' does not exist");
  return read_dataset_csv(p);
}

int cmd_print_config(const Options& o) {
  std::cout << format_config(load(o));
  return kOk;
}

int cmd_gen_data(const Options& o) {
  Config cfg = load(o);
  if (o.seed) cfg.data.seed = *o.seed;
  cfg.validate();
  ensure_dir(o.out_dir);
  const auto data = generate_dataset(cfg.data, cfg.sim.plant, cfg.sim.gate, cfg.sim.nominal);
  const auto path = dataset_path(o);
  write_dataset_csv(data, path);

  const auto counts = cfg.data.counts();
  nlohmann::json manifest{{"dataset", fs::path(path).filename().string()},
                          {"samples", data.size()},
                          {"seed", cfg.data.seed},
                          {"mix", cfg.data.mix},
                          {"counts",
                           {{"snapshot", counts[0]}, {"rollout", counts[1]}, {"near_gate", counts[2]},
                            {"boundary", counts[3]}}},
                          {"near_gate_window", cfg.data.near_gate_window},
                          {"boundary_band", cfg.data.boundary_band}};
  write_text(path + ".manifest.json", manifest.dump(1) + "\n");
  if (!o.quiet) std::cout << "wrote " << data.size() << " samples to " << path << '\n';
  return kOk;
}

int cmd_train(const Options& o) {
  Config cfg = load(o);
  if (o.seed) cfg.train.seed = *o.seed;
  cfg.validate();
  const auto data = load_dataset(o);
  ensure_dir(o.out_dir);
  auto progress = [&](int epoch, const LossBreakdown& l) {
    if (!o.quiet) {
      std::fprintf(stderr, "epoch %3d  total %.5f  rec %.5f  tight %.5f  dyn %.5f  teach %.5f\n", epoch, l.total,
                   l.rec, l.tight, l.dyn, l.teach);
    }
  };
  const auto tm = train_and_fit(data, cfg, o.parallel, progress);
  write_loss_history_csv(tm.history, path_in(o.out_dir, "loss_history.csv"));
  const auto model_path = o.model.empty() ? path_in(o.out_dir, "model.json") : o.model;
  save_model(tm.model, model_path);
  if (!o.quiet) {
    std::cout << "wrote " << model_path << "  (eps_conj " << tm.model.conjugacy.eps_conj << ", margin delta "
              << tm.model.margin_delta << ")\n";
  }
  return kOk;
}

int cmd_fit(const Options& o) {
  if (o.model.empty()) throw UsageError("fit needs --model (a trained model to refit)");
  Config cfg = load(o);
  cfg.validate();
  const auto data = load_dataset(o);
  const auto trained = load_model(o.model);
  ensure_dir(o.out_dir);
  auto m = fit_and_calibrate(trained.encoder, trained.decoder, trained.teacher, data, cfg, o.parallel);
  for (const auto& [k, v] : trained.metadata) m.metadata.emplace(k, v);
  const auto out = path_in(o.out_dir, "model_refit.json");
  save_model(m, out);
  if (!o.quiet) std::cout << "wrote " << out << '\n';
  return kOk;
}

std::vector<EvalKind> requested_modes(const std::string& mode) {
  if (mode == "all") return {EvalKind::Set, EvalKind::Point, EvalKind::PointMargin};
  try {
    return {eval_kind_from_name(mode)};
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::string run_stem(const RunReport& r) { return r.scenario + "_" + std::string(r.mode.name()); }

int cmd_run(const Options& o) {
  if (o.model.empty()) throw UsageError("run needs --model");
  Config cfg = load(o);
  cfg.validate();
  std::vector<Scenario> scenarios = cfg.scenarios;
  if (o.scenario != "all") {
    try {
      scenarios = {find_scenario(cfg.scenarios, o.scenario)};
    } catch (const UnknownScenario& e) {
      throw UsageError(e.what());
    }
  }
  const auto kinds = requested_modes(o.mode);
  const auto model = load_model(o.model);
  ensure_dir(o.out_dir);

  std::vector<RunResult> runs;
  if (scenarios.size() == 1 && kinds.size() == 1) {
    EvalMode mode = EvalMode::set();
    if (kinds[0] == EvalKind::Point) mode = EvalMode::point();
    if (kinds[0] == EvalKind::PointMargin) mode = {EvalKind::PointMargin, -1.0};
    runs.push_back(run(scenarios[0], mode, model, cfg.sim));
  } else {
    runs = run_matrix(model, cfg.sim, scenarios, kinds, o.parallel);
  }

  std::ofstream summary(path_in(o.out_dir, "runs.csv"));
  if (!summary) throw std::ios_base::failure("cannot write runs.csv in '" + o.out_dir + "'");
  summary << join_csv(run_report_header()) << '\n';
  for (const auto& r : runs) {
    write_trace_csv(r, path_in(o.out_dir, "trace_" + run_stem(r.report) + ".csv"));
    write_timing_csv(r, path_in(o.out_dir, "timing_" + run_stem(r.report) + ".csv"));
    summary << join_csv(run_report_row(r.report)) << '\n';
    if (!o.quiet) {
      std::printf("%-6s %-6s %-9s", r.report.scenario.c_str(), std::string(r.report.mode.name()).c_str(),
                  std::string(verdict_name(r.report.verdict)).c_str());
      if (r.report.verdict == Verdict::Collision) {
        std::printf(" (%s, %s axis)", std::string(body_name(r.report.body)).c_str(),
                    std::string(axis_name(r.report.axis)).c_str());
      }
      std::printf("  steps %zu  blind spots %zu\n", r.report.steps, r.report.blind_spots());
    }
  }
  if (!o.quiet) std::cout << '\n' << format_timing(summarize_timing(runs));

  if (runs.size() == 1) {
    switch (runs[0].report.verdict) {
      case Verdict::Passed: return kOk;
      case Verdict::Collision: return kCollision;
      case Verdict::Diverged: return kDiverged;
      case Verdict::Timeout: return kTimeout;
    }
  }
  return kOk;
}

int cmd_analyze(const Options& o) {
  const std::string dir = o.trace_dir.empty() ? o.out_dir : o.trace_dir;
  if (!fs::is_directory(dir)) throw std::ios_base::failure("trace directory '" + dir + "' does not exist");
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind("trace_", 0) == 0 && e.path().extension() == ".csv") {
      files.push_back(e.path().string());
    }
  }
  if (files.empty()) throw std::ios_base::failure("no trace_*.csv files in '" + dir + "'");
  std::sort(files.begin(), files.end());

  std::map<std::string, std::string> codes;
  const auto runs_csv = path_in(dir, "runs.csv");
  if (fs::exists(runs_csv)) {
    const auto t = read_csv(runs_csv);
    for (const auto& row : t.rows) {
      codes[row[t.column("scenario")] + "_" + row[t.column("mode")]] = row[t.column("code")];
    }
  }
  std::vector<LabelledTrace> traces;
  for (const auto& f : files) {
    auto tf = read_trace_csv(f);
    LabelledTrace lt{tf.scenario, tf.mode, tf.heads, std::move(tf.trace), ""};
    const auto it = codes.find(lt.scenario + "_" + std::string(lt.mode.name()));
    if (it != codes.end()) lt.code = it->second;
    traces.push_back(std::move(lt));
  }
  // Scenario order follows the configured list, then file order.
  const Config cfg = load(o);
  std::stable_sort(traces.begin(), traces.end(), [&](const LabelledTrace& a, const LabelledTrace& b) {
    auto rank = [&](const LabelledTrace& t) {
      for (std::size_t i = 0; i < cfg.scenarios.size(); ++i) {
        if (cfg.scenarios[i].name == t.scenario) return static_cast<int>(i);
      }
      return static_cast<int>(cfg.scenarios.size());
    };
    auto mrank = [](const LabelledTrace& t) { return static_cast<int>(t.mode.kind); };
    return std::pair(mrank(a), rank(a)) < std::pair(mrank(b), rank(b));
  });

  const auto agg = aggregate(traces);
  std::string text = format_aggregate(agg);
  if (!o.dataset.empty()) {
    const auto data = load_dataset(o);
    std::optional<LatentSafetyModel> model;
    if (!o.model.empty()) model = load_model(o.model);
    const auto probe = raw_state_probe(data, cfg.sim.gate, cfg.sim.plant, cfg.fit, model ? &model->encoder : nullptr);
    text += "\n" + format_probe(probe);
  }
  const std::string out_dir = o.out_dir == "." && !o.trace_dir.empty() ? dir : o.out_dir;
  ensure_dir(out_dir);
  write_text(path_in(out_dir, "report.txt"), text);
  write_aggregate_csv(agg, path_in(out_dir, "aggregate.csv"));
  write_modes_csv(agg, path_in(out_dir, "modes.csv"));
  if (!o.quiet) std::cout << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Set-valued latent safety certificates for a quadrotor with a suspended load"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sc) {
    sc->add_option("--config", o.config, "key = value config file (defaults apply when omitted)");
    sc->add_flag("--quiet", o.quiet, "print nothing but errors");
  };
  auto* print = app.add_subcommand("print-config", "print every config key with its value and documentation");
  common(print);

  auto* gen = app.add_subcommand("gen-data", "sample transitions and teacher features");
  common(gen);
  gen->add_option("--out-dir", o.out_dir, "output directory");
  gen->add_option("--dataset", o.dataset, "dataset path (default <out-dir>/dataset.csv)");
  auto* gen_seed = gen->add_option("--seed", seed, "overrides data.seed");

  auto* tr = app.add_subcommand("train", "train encoder, decoder and teacher, then fit and calibrate");
  common(tr);
  tr->add_option("--dataset", o.dataset, "dataset path (default <out-dir>/dataset.csv)");
  tr->add_option("--out-dir", o.out_dir, "output directory");
  tr->add_option("--model", o.model, "model output path (default <out-dir>/model.json)");
  auto* tr_seed = tr->add_option("--seed", seed, "overrides train.seed");
  tr->add_option("--parallel", o.parallel, "worker threads for calibration runs")->check(CLI::PositiveNumber);

  auto* fit = app.add_subcommand("fit", "refit dynamics, heads, bounds and delta on a trained model");
  common(fit);
  fit->add_option("--model", o.model, "trained model")->required();
  fit->add_option("--dataset", o.dataset, "dataset path (default <out-dir>/dataset.csv)");
  fit->add_option("--out-dir", o.out_dir, "output directory (writes model_refit.json)");
  fit->add_option("--parallel", o.parallel, "worker threads for calibration runs")->check(CLI::PositiveNumber);

  auto* rn = app.add_subcommand("run", "closed-loop runs; one scenario and mode sets the exit status");
  common(rn);
  rn->add_option("--model", o.model, "model file")->required();
  rn->add_option("--scenario", o.scenario, "scenario name or all");
  rn->add_option("--mode", o.mode, "set, point, margin or all")
      ->check(CLI::IsMember({"set", "point", "margin", "all"}));
  rn->add_option("--out-dir", o.out_dir, "output directory");
  rn->add_option("--parallel", o.parallel, "worker threads")->check(CLI::PositiveNumber);
  rn->add_option("--seed", seed, "accepted for uniformity; runs draw no random numbers");

  auto* an = app.add_subcommand("analyze", "aggregate traces into comparison, blind-spot and spread tables");
  common(an);
  an->add_option("--trace-dir", o.trace_dir, "directory holding trace_*.csv");
  an->add_option("--out-dir", o.out_dir, "report directory (default: the trace directory)");
  an->add_option("--dataset", o.dataset, "dataset for the linear probe table");
  an->add_option("--model", o.model, "model whose encoder the probe table compares against");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  if (gen_seed->count() || tr_seed->count()) o.seed = seed;

  try {
    if (print->parsed()) return cmd_print_config(o);
    if (gen->parsed()) return cmd_gen_data(o);
    if (tr->parsed()) return cmd_train(o);
    if (fit->parsed()) return cmd_fit(o);
    if (rn->parsed()) return cmd_run(o);
    if (an->parsed()) return cmd_analyze(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const ModelFormatError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kUsage;
}
