#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "zonosafe/controller.hpp"
#include "zonosafe/csv.hpp"
#include "zonosafe/latent_model.hpp"
#include "zonosafe/model.hpp"
#include "zonosafe/plant.hpp"
#include "zonosafe/trainer.hpp"

namespace zonosafe {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Scenario {
  std::string name;
  double start_distance = 7.0;  // m before the gate plane
  double alpha0 = 0.0;
  double beta0 = 0.0;
  double alpha_dot0 = 0.0;
  double beta_dot0 = 0.0;
  double vx0 = 2.2;
  double duration = 8.0;
  double start_z = 2.0;  // m, initial altitude

  void validate() const {
    if (name.empty()) throw std::invalid_argument("scenario: empty name");
    for (double v : {start_distance, alpha0, beta0, alpha_dot0, beta_dot0, vx0, duration, start_z}) {
      if (!std::isfinite(v)) throw std::invalid_argument("scenario " + name + ": non-finite field");
    }
    if (!(start_distance > 0.0)) throw std::invalid_argument("scenario " + name + ": start distance must be > 0");
    if (!(duration > 0.0)) throw std::invalid_argument("scenario " + name + ": duration must be > 0");
  }

  /// Level flight on the gate axis, rod at the given swing state.
  PlantState initial_state(const GateSpec& gate) const {
    PlantState s;
    s.p = {gate.x_plane - start_distance, gate.center_y, start_z};
    s.v = {vx0, 0.0, 0.0};
    s.alpha = alpha0;
    s.beta = beta0;
    s.alpha_dot = alpha_dot0;
    s.beta_dot = beta_dot0;
    return s;
  }
};

inline std::vector<Scenario> canonical_scenarios() {
  return {
      {"GOOD", 7.0, deg2rad(5.0), 0.0, 0.0, 0.0},
      {"BAD", 3.0, deg2rad(25.0), deg2rad(10.0), 0.0, 0.0},
      {"HARD", 4.0, deg2rad(30.0), 0.0, 0.0, 0.0},
      {"HARD1", 2.0, deg2rad(35.0), 0.0, deg2rad(40.0), 0.0},
      {"HARD2", 2.0, deg2rad(20.0), deg2rad(45.0), 0.0, deg2rad(30.0)},
  };
}

class UnknownScenario : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Scenario find_scenario(const std::vector<Scenario>& list, const std::string& name) {
  for (const auto& s : list) {
    if (s.name == name) return s;
  }
  std::string known;
  for (const auto& s : list) known += (known.empty() ? "" : ", ") + s.name;
  throw UnknownScenario("unknown scenario '" + name + "' (known: " + known + ")");
}

struct SimConfig {
  PlantParams plant;
  GateSpec gate;
  NominalConfig nominal;
  CbfConfig cbf;  // mode is set per run
  UncertaintyBudget budget = UncertaintyBudget::standard();
  double after_crossing = 1.0;      // s simulated after both bodies cross
  double divergence_radius = 50.0;  // m
  double margin_delta = -1.0;       // < 0: take it from the model

  void validate() const {
    plant.validate();
    gate.validate();
    cbf.validate();
    budget.validate();
    if (!(after_crossing >= 0.0)) throw std::invalid_argument("sim.after_crossing: must be >= 0");
    if (!(divergence_radius > 0.0)) throw std::invalid_argument("sim.divergence_radius: must be > 0");
  }
};

enum class Verdict { Passed, Collision, Diverged, Timeout };

inline std::string_view verdict_name(Verdict v) {
  switch (v) {
    case Verdict::Passed: return "passed";
    case Verdict::Collision: return "collision";
    case Verdict::Diverged: return "diverged";
    case Verdict::Timeout: return "timeout";
  }
  return "?";
}

struct TraceRecord {
  double t = 0.0;
  PlantState x;
  Eigen::Vector3d load = Eigen::Vector3d::Zero();
  CertReport cert;
  Accel mu_nom = Accel::Zero();
  Accel mu_safe = Accel::Zero();
  std::vector<int> active_set;
  bool qp_feasible = true;
  double qp_violation = 0.0;
};

struct StepTiming {
  double set_forward_ms = 0.0;
  double certificate_qp_ms = 0.0;
};

struct HeadStats {
  std::size_t evaluations = 0;
  std::size_t safe_point = 0;
  std::size_t safe_set = 0;
  std::size_t blind_spots = 0;
  double spread_sum = 0.0;
  double spread_max = 0.0;

  double spread_mean() const { return evaluations ? spread_sum / static_cast<double>(evaluations) : 0.0; }
  double safe_rate_point() const {
    return evaluations ? static_cast<double>(safe_point) / static_cast<double>(evaluations) : 0.0;
  }
  double safe_rate_set() const {
    return evaluations ? static_cast<double>(safe_set) / static_cast<double>(evaluations) : 0.0;
  }
  void add(const HeadReport& r) {
    ++evaluations;
    safe_point += r.safe_point ? 1 : 0;
    safe_set += r.safe_set ? 1 : 0;
    blind_spots += r.blind_spot ? 1 : 0;
    spread_sum += r.spread;
    spread_max = std::max(spread_max, r.spread);
  }
  HeadStats& operator+=(const HeadStats& o) {
    evaluations += o.evaluations;
    safe_point += o.safe_point;
    safe_set += o.safe_set;
    blind_spots += o.blind_spots;
    spread_sum += o.spread_sum;
    spread_max = std::max(spread_max, o.spread_max);
    return *this;
  }
};

struct RunReport {
  std::string scenario;
  EvalMode mode;
  Verdict verdict = Verdict::Timeout;
  Body body = Body::Quad;  // Collision only
  Axis axis = Axis::Z;     // Collision only
  std::size_t steps = 0;
  std::vector<HeadKind> heads;
  std::vector<HeadStats> head_stats;
  double crossing_time = kNaN;    // both bodies past the gate plane
  double event_time = kNaN;       // collision or divergence
  double last_blind_spot = kNaN;  // time of the last step with a blind spot
  std::size_t infeasible_steps = 0;

  std::size_t blind_spots() const {
    std::size_t n = 0;
    for (const auto& h : head_stats) n += h.blind_spots;
    return n;
  }
  /// One-letter failure code: d(ivergence), v(ertical), l(ateral), b(ody), t(imeout).
  std::string code() const {
    switch (verdict) {
      case Verdict::Passed: return "ok";
      case Verdict::Diverged: return "d";
      case Verdict::Timeout: return "t";
      case Verdict::Collision:
        if (body == Body::Quad) return "b";
        return axis == Axis::Z ? "v" : "l";
    }
    return "?";
  }
};

struct RunResult {
  RunReport report;
  std::vector<TraceRecord> trace;
  std::vector<StepTiming> timing;
};

inline RunResult run(const Scenario& scenario, const EvalMode& mode, const LatentSafetyModel& model,
                     const SimConfig& cfg) {
  scenario.validate();
  cfg.validate();
  const PlantParams& P = cfg.plant;
  CbfConfig cbf = cfg.cbf;
  cbf.mode = mode;
  if (mode.kind == EvalKind::PointMargin && !(mode.delta >= 0.0)) {
    cbf.mode.delta = cfg.margin_delta >= 0.0 ? cfg.margin_delta : model.margin_delta;
  }

  RunResult out;
  RunReport& rep = out.report;
  rep.scenario = scenario.name;
  rep.mode = cbf.mode;
  for (const auto& h : model.heads) rep.heads.push_back(h.kind);
  rep.head_stats.assign(model.heads.size(), {});

  const Eigen::Vector3d waypoint = gate_waypoint(cfg.gate, P, cfg.nominal);
  PlantState x = scenario.initial_state(cfg.gate);
  const auto max_steps = static_cast<std::size_t>(std::llround(scenario.duration / P.dt));
  bool quad_crossed = false, load_crossed = false;
  std::size_t stop_step = max_steps;
  rep.verdict = Verdict::Timeout;

  for (std::size_t k = 0; k < stop_step; ++k) {
    const double t = static_cast<double>(k) * P.dt;
    const Accel mu_nom = nominal_input(x, waypoint, cfg.nominal, P.mu_max);
    const auto res = safe_input(x, mu_nom, model, cbf, cfg.budget, P);

    TraceRecord rec;
    rec.t = t;
    rec.x = x;
    rec.load = load_position(x, P);
    rec.cert = res.report;
    rec.mu_nom = mu_nom;
    rec.mu_safe = res.qp.mu_safe;
    rec.active_set = res.qp.active_set;
    rec.qp_feasible = res.qp.feasible;
    rec.qp_violation = res.qp.max_violation;
    for (std::size_t i = 0; i < rec.cert.heads.size(); ++i) {
      rep.head_stats[i].add(rec.cert.heads[i]);
      if (rec.cert.heads[i].blind_spot) rep.last_blind_spot = t;
    }
    if (!rec.qp_feasible) ++rep.infeasible_steps;
    out.trace.push_back(std::move(rec));
    out.timing.push_back({res.set_forward_ms, res.certificate_qp_ms});

    const PlantState next = step(x, res.qp.mu_safe, P);
    const double t_next = t + P.dt;
    if (!next.finite() || next.p.norm() > cfg.divergence_radius) {
      rep.verdict = Verdict::Diverged;
      rep.event_time = t_next;
      break;
    }
    const GateCheck gc = gate_crossing_check(x, next, cfg.gate, P);
    if (gc.event == GateEvent::Collision) {
      rep.verdict = Verdict::Collision;
      rep.body = gc.body;
      rep.axis = gc.axis;
      rep.event_time = t_next;
      break;
    }
    quad_crossed = quad_crossed || gc.quad_crossed;
    load_crossed = load_crossed || gc.load_crossed;
    if (quad_crossed && load_crossed && std::isnan(rep.crossing_time)) {
      rep.crossing_time = t_next;
      rep.verdict = Verdict::Passed;
      const auto extra = static_cast<std::size_t>(std::llround(cfg.after_crossing / P.dt));
      stop_step = std::min(max_steps, k + 1 + extra);
    }
    x = next;
  }
  rep.steps = out.trace.size();
  return out;
}

// ---------------------------------------------------------------------------
// Trace files

inline constexpr const char* kTraceSchema = "zonosafe-trace-v1";

inline std::string head_column(HeadKind k) {
  std::string n(head_name(k));
  n.erase(std::remove(n.begin(), n.end(), '_'), n.end());
  return n;  // "hz", "hy", "hE"
}

inline std::vector<std::string> trace_header(const std::vector<HeadKind>& heads) {
  std::vector<std::string> h{"t"};
  for (auto n : kStateNames) h.emplace_back(n);
  for (auto n : {"load_x", "load_y", "load_z"}) h.emplace_back(n);
  for (auto k : heads) {
    const auto c = head_column(k);
    for (auto suffix : {"_point", "_set", "_spread", "_safe_point", "_safe_set", "_blind"}) h.push_back(c + suffix);
  }
  for (auto n : {"mu_nom_x", "mu_nom_y", "mu_nom_z", "mu_x", "mu_y", "mu_z", "qp_feasible", "qp_active",
                 "qp_violation"}) {
    h.emplace_back(n);
  }
  return h;
}

inline std::string active_set_field(const std::vector<int>& active) {
  std::string s;
  for (std::size_t i = 0; i < active.size(); ++i) s += (i ? ";" : "") + std::to_string(active[i]);
  return s;
}

inline std::vector<int> parse_active_set(const std::string& field) {
  std::vector<int> out;
  std::istringstream ss(field);
  std::string tok;
  while (std::getline(ss, tok, ';')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

/// Deterministic trace CSV: a schema comment, the header, one row per step.
inline void write_trace_csv(const RunResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  out << "# " << kTraceSchema << " scenario=" << r.report.scenario << " mode=" << r.report.mode.name()
      << " delta=" << format_double(r.report.mode.delta) << '\n';
  out << join_csv(trace_header(r.report.heads)) << '\n';
  for (const auto& rec : r.trace) {
    std::vector<std::string> row{format_double(rec.t)};
    const StateVec xv = rec.x.to_vector();
    for (int i = 0; i < kStateDim; ++i) row.push_back(format_double(xv[i]));
    for (int i = 0; i < 3; ++i) row.push_back(format_double(rec.load[i]));
    for (const auto& h : rec.cert.heads) {
      row.push_back(format_double(h.h_point));
      row.push_back(format_double(h.h_set));
      row.push_back(format_double(h.spread));
      row.emplace_back(h.safe_point ? "1" : "0");
      row.emplace_back(h.safe_set ? "1" : "0");
      row.emplace_back(h.blind_spot ? "1" : "0");
    }
    for (int i = 0; i < 3; ++i) row.push_back(format_double(rec.mu_nom[i]));
    for (int i = 0; i < 3; ++i) row.push_back(format_double(rec.mu_safe[i]));
    row.emplace_back(rec.qp_feasible ? "1" : "0");
    row.push_back(active_set_field(rec.active_set));
    row.push_back(format_double(rec.qp_violation));
    out << join_csv(row) << '\n';
  }
  if (!out) throw std::ios_base::failure("failed writing '" + path + "'");
}

struct TraceFile {
  std::string scenario;
  EvalMode mode;
  std::vector<HeadKind> heads;
  std::vector<TraceRecord> trace;
};

inline TraceFile read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open trace '" + path + "'");
  std::string first;
  std::getline(in, first);
  if (first.rfind(std::string("# ") + kTraceSchema, 0) != 0) {
    throw std::runtime_error("'" + path + "' is not a " + std::string(kTraceSchema) + " file");
  }
  TraceFile tf;
  std::istringstream meta(first.substr(2 + std::string(kTraceSchema).size()));
  std::string kv, mode_name;
  double delta = 0.0;
  while (meta >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    const auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
    if (key == "scenario") tf.scenario = val;
    if (key == "mode") mode_name = val;
    if (key == "delta") delta = parse_double(val);
  }
  const EvalKind kind = eval_kind_from_name(mode_name);
  tf.mode = kind == EvalKind::Set ? EvalMode::set() : kind == EvalKind::Point ? EvalMode::point() : EvalMode::margin(delta);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("'" + path + "' has no header");
  const auto header = split_csv_line(line);
  for (std::size_t i = 1 + kStateDim + 3; i + 5 < header.size(); i += 6) {
    const auto& col = header[i];
    if (col.size() < 7 || col.substr(col.size() - 6) != "_point") break;
    const std::string stem = col.substr(0, col.size() - 6);
    bool found = false;
    for (auto k : kAllHeads) {
      if (head_column(k) == stem) {
        tf.heads.push_back(k);
        found = true;
      }
    }
    if (!found) throw std::runtime_error("'" + path + "': unknown head column '" + col + "'");
  }
  if (header != trace_header(tf.heads)) throw std::runtime_error("'" + path + "': unexpected trace header");

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) throw std::runtime_error("'" + path + "': malformed row");
    std::size_t c = 0;
    TraceRecord rec;
    rec.t = parse_double(f[c++]);
    StateVec xv;
    for (int i = 0; i < kStateDim; ++i) xv[i] = parse_double(f[c++]);
    rec.x = PlantState::from_vector(xv);
    for (int i = 0; i < 3; ++i) rec.load[i] = parse_double(f[c++]);
    for (auto k : tf.heads) {
      HeadReport h;
      h.kind = k;
      h.h_point = parse_double(f[c++]);
      h.h_set = parse_double(f[c++]);
      h.spread = parse_double(f[c++]);
      h.safe_point = f[c++] == "1";
      h.safe_set = f[c++] == "1";
      h.blind_spot = f[c++] == "1";
      rec.cert.heads.push_back(h);
    }
    for (int i = 0; i < 3; ++i) rec.mu_nom[i] = parse_double(f[c++]);
    for (int i = 0; i < 3; ++i) rec.mu_safe[i] = parse_double(f[c++]);
    rec.qp_feasible = f[c++] == "1";
    rec.active_set = parse_active_set(f[c++]);
    rec.qp_violation = parse_double(f[c++]);
    tf.trace.push_back(std::move(rec));
  }
  return tf;
}

/// Wall-clock step timings; kept apart from the trace so traces stay
/// byte-reproducible.
inline void write_timing_csv(const RunResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  out << "t,set_forward_ms,certificate_qp_ms,step_ms\n";
  for (std::size_t i = 0; i < r.timing.size(); ++i) {
    const auto& tm = r.timing[i];
    out << join_csv({format_double(r.trace[i].t), format_double(tm.set_forward_ms),
                     format_double(tm.certificate_qp_ms), format_double(tm.set_forward_ms + tm.certificate_qp_ms)})
        << '\n';
  }
}

inline std::vector<std::string> run_report_header() {
  return {"scenario", "mode",        "delta",          "verdict",       "code",
          "steps",    "crossing_t",  "event_t",        "last_blind_t",  "blind_spots",
          "infeasible_steps"};
}

inline std::vector<std::string> run_report_row(const RunReport& r) {
  return {r.scenario,
          std::string(r.mode.name()),
          format_double(r.mode.delta),
          std::string(verdict_name(r.verdict)),
          r.code(),
          std::to_string(r.steps),
          format_double(r.crossing_time),
          format_double(r.event_time),
          format_double(r.last_blind_spot),
          std::to_string(r.blind_spots()),
          std::to_string(r.infeasible_steps)};
}

// ---------------------------------------------------------------------------
// Analytics

/// A trace labelled with where it came from; what aggregate() consumes.
struct LabelledTrace {
  std::string scenario;
  EvalMode mode;
  std::vector<HeadKind> heads;
  std::vector<TraceRecord> trace;
  std::string code;  // verdict code, empty when unknown
};

inline LabelledTrace label(const RunResult& r) {
  return {r.report.scenario, r.report.mode, r.report.heads, r.trace, r.report.code()};
}

struct ModeRow {
  std::string mode;
  std::size_t passed = 0;
  std::size_t runs = 0;
  std::map<std::string, std::string> codes;  // scenario -> verdict code
};

struct AggregateReport {
  std::vector<std::string> scenarios;  // in first-seen order
  std::vector<ModeRow> modes;          // in first-seen order
  std::vector<HeadKind> heads;
  std::string reference_mode;          // whose traces feed the pooled numbers
  std::vector<HeadStats> pooled;       // per head, reference traces
  std::map<std::string, std::vector<HeadStats>> per_mode;  // per head, each mode's own traces
  std::map<std::string, double> last_blind_spot;           // per scenario, reference traces
  double delta = 0.0;  // mean spread over all heads and reference steps

  HeadStats pooled_total() const {
    HeadStats t;
    for (const auto& h : pooled) t += h;
    return t;
  }
};

/// Pooled numbers come from Set-mode traces when present (both h_point and
/// h_set are logged on them), otherwise from every trace.
inline AggregateReport aggregate(const std::vector<LabelledTrace>& runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate: no traces");
  AggregateReport a;
  a.heads = runs.front().heads;
  bool have_set = false;
  for (const auto& r : runs) {
    if (r.heads != a.heads) throw std::invalid_argument("aggregate: traces disagree on the head set");
    have_set = have_set || r.mode.kind == EvalKind::Set;
  }
  a.reference_mode = have_set ? "set" : "all";
  a.pooled.assign(a.heads.size(), {});

  for (const auto& r : runs) {
    const std::string mode(r.mode.name());
    if (std::find(a.scenarios.begin(), a.scenarios.end(), r.scenario) == a.scenarios.end()) {
      a.scenarios.push_back(r.scenario);
    }
    auto row = std::find_if(a.modes.begin(), a.modes.end(), [&](const ModeRow& m) { return m.mode == mode; });
    if (row == a.modes.end()) {
      a.modes.push_back({mode, 0, 0, {}});
      row = a.modes.end() - 1;
    }
    ++row->runs;
    row->passed += r.code == "ok" ? 1 : 0;
    row->codes[r.scenario] = r.code;

    auto& own = a.per_mode[mode];
    if (own.empty()) own.assign(a.heads.size(), {});
    const bool reference = !have_set || r.mode.kind == EvalKind::Set;
    double last = kNaN;
    for (const auto& rec : r.trace) {
      for (std::size_t i = 0; i < rec.cert.heads.size(); ++i) {
        const auto& h = rec.cert.heads[i];
        own[i].add(h);
        if (reference) a.pooled[i].add(h);
        if (reference && h.blind_spot) last = rec.t;
      }
    }
    if (reference) {
      auto it = a.last_blind_spot.find(r.scenario);
      if (it == a.last_blind_spot.end() || std::isnan(it->second) || last > it->second) {
        a.last_blind_spot[r.scenario] = last;
      }
    }
  }
  const HeadStats total = a.pooled_total();
  a.delta = total.spread_mean();
  return a;
}

/// Plain-text rendering of the comparison, blind-spot and spread tables.
inline std::string format_aggregate(const AggregateReport& a) {
  std::ostringstream o;
  char buf[256];
  o << "Gate passage by mode\n";
  o << "mode      score";
  for (const auto& s : a.scenarios) {
    std::snprintf(buf, sizeof buf, "  %-6s", s.c_str());
    o << buf;
  }
  o << '\n';
  for (const auto& m : a.modes) {
    std::snprintf(buf, sizeof buf, "%-8s  %zu/%zu  ", m.mode.c_str(), m.passed, m.runs);
    o << buf;
    for (const auto& s : a.scenarios) {
      const auto it = m.codes.find(s);
      std::snprintf(buf, sizeof buf, "  %-6s", it == m.codes.end() ? "-" : it->second.c_str());
      o << buf;
    }
    o << '\n';
  }
  o << "codes: ok passed, d divergence, v vertical load contact, l lateral load contact, b quad body contact, "
       "t timeout\n\n";

  const HeadStats tot = a.pooled_total();
  o << "Per-head certificate evaluations (" << a.reference_mode << " traces)\n";
  std::snprintf(buf, sizeof buf, "evaluations %zu  point-safe %zu (%.1f%%)  set-safe %zu (%.1f%%)  blind spots %zu (%.1f%%)\n",
                tot.evaluations, tot.safe_point, 100.0 * tot.safe_rate_point(), tot.safe_set,
                100.0 * tot.safe_rate_set(), tot.blind_spots,
                tot.evaluations ? 100.0 * static_cast<double>(tot.blind_spots) / static_cast<double>(tot.evaluations)
                                : 0.0);
  o << buf;
  for (const auto& [mode, stats] : a.per_mode) {
    HeadStats t;
    for (const auto& h : stats) t += h;
    std::snprintf(buf, sizeof buf, "  %-8s own traces: %zu evaluations, point-safe %.1f%%, set-safe %.1f%%\n",
                  mode.c_str(), t.evaluations, 100.0 * t.safe_rate_point(), 100.0 * t.safe_rate_set());
    o << buf;
  }
  o << '\n';

  o << "Spread per head\nhead   mean       max        blind spots\n";
  for (std::size_t i = 0; i < a.heads.size(); ++i) {
    const auto& h = a.pooled[i];
    std::snprintf(buf, sizeof buf, "%-5s  %-9.4f  %-9.4f  %zu\n", std::string(head_name(a.heads[i])).c_str(),
                  h.spread_mean(), h.spread_max, h.blind_spots);
    o << buf;
  }
  std::snprintf(buf, sizeof buf, "global mean spread (margin delta): %.6f\n\n", a.delta);
  o << buf;

  o << "Last blind spot per scenario\n";
  for (const auto& s : a.scenarios) {
    const auto it = a.last_blind_spot.find(s);
    if (it == a.last_blind_spot.end() || std::isnan(it->second)) {
      o << "  " << s << ": none\n";
    } else {
      std::snprintf(buf, sizeof buf, "  %s: t = %.2f s\n", s.c_str(), it->second);
      o << buf;
    }
  }
  return o.str();
}

/// Machine-readable spread/safe-rate table, one row per head plus a total.
inline void write_aggregate_csv(const AggregateReport& a, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  out << "head,evaluations,safe_point,safe_set,safe_rate_point,safe_rate_set,blind_spots,spread_mean,spread_max\n";
  auto row = [&](const std::string& name, const HeadStats& h) {
    out << join_csv({name, std::to_string(h.evaluations), std::to_string(h.safe_point), std::to_string(h.safe_set),
                     format_double(h.safe_rate_point()), format_double(h.safe_rate_set()),
                     std::to_string(h.blind_spots), format_double(h.spread_mean()), format_double(h.spread_max)})
        << '\n';
  };
  for (std::size_t i = 0; i < a.heads.size(); ++i) row(std::string(head_name(a.heads[i])), a.pooled[i]);
  row("all", a.pooled_total());
}

inline void write_modes_csv(const AggregateReport& a, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  std::vector<std::string> header{"mode", "passed", "runs"};
  header.insert(header.end(), a.scenarios.begin(), a.scenarios.end());
  out << join_csv(header) << '\n';
  for (const auto& m : a.modes) {
    std::vector<std::string> row{m.mode, std::to_string(m.passed), std::to_string(m.runs)};
    for (const auto& s : a.scenarios) {
      const auto it = m.codes.find(s);
      row.push_back(it == m.codes.end() ? "" : it->second);
    }
    out << join_csv(row) << '\n';
  }
}

struct ProbeReport {
  std::vector<HeadKind> heads;
  std::vector<double> raw_r;     // linear fit on the 16D state
  std::vector<double> latent_r;  // linear fit on the latent code, if a model was given
  std::size_t samples = 0;
};

/// Linear least-squares probes from raw states to the head margins, on the
/// near-gate subset the heads are fitted on.
inline ProbeReport raw_state_probe(const std::vector<Sample>& data, const GateSpec& gate, const PlantParams& params,
                                   const FitOptions& opt = {}, const Mlp* encoder = nullptr) {
  const double e_cap = opt.energy_cap > 0.0 ? opt.energy_cap : default_energy_cap(params);
  std::vector<const Sample*> near;
  for (const auto& s : data) {
    if (near_gate(s.x, gate, opt.near_gate_window)) near.push_back(&s);
  }
  const auto n = static_cast<Eigen::Index>(near.size());
  if (n < kStateDim + 2) throw FitError("raw_state_probe: too few near-gate samples");
  Mat x(kStateDim, n), margins(n, 3);
  Mat z;
  if (encoder) z.resize(encoder->output_dim(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = *near[static_cast<std::size_t>(i)];
    x.col(i) = s.x.to_vector();
    margins.row(i) = head_margins(s.x, gate, params, e_cap, opt.lookahead).transpose();
    if (encoder) z.col(i) = forward_point(*encoder, Vec(x.col(i)));
  }
  ProbeReport rep;
  rep.samples = static_cast<std::size_t>(n);
  for (std::size_t k = 0; k < kAllHeads.size(); ++k) {
    rep.heads.push_back(kAllHeads[k]);
    const Vec target = margins.col(static_cast<Eigen::Index>(k));
    rep.raw_r.push_back(fit_linear_probe(x, target).correlation);
    if (encoder) rep.latent_r.push_back(fit_linear_probe(z, target).correlation);
  }
  return rep;
}

inline std::string format_probe(const ProbeReport& p) {
  std::ostringstream o;
  char buf[160];
  o << "Linear certificate fit quality (" << p.samples << " near-gate samples)\n";
  o << (p.latent_r.empty() ? "head   16D R\n" : "head   16D R     latent R\n");
  for (std::size_t i = 0; i < p.heads.size(); ++i) {
    if (p.latent_r.empty()) {
      std::snprintf(buf, sizeof buf, "%-5s  %.4f\n", std::string(head_name(p.heads[i])).c_str(), p.raw_r[i]);
    } else {
      std::snprintf(buf, sizeof buf, "%-5s  %.4f    %.4f\n", std::string(head_name(p.heads[i])).c_str(), p.raw_r[i],
                    p.latent_r[i]);
    }
    o << buf;
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Run matrix

/// Runs jobs[i] for every i on up to `workers` threads; results keep job order.
template <typename Job>
auto parallel_map(const std::vector<Job>& jobs, int workers) {
  using Result = decltype(jobs.front()());
  std::vector<Result> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      try {
        out[i] = jobs[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int k = 1; k < n; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

/// Mean spread over every head and step of Set-mode runs of the scenarios.
inline double calibrate_margin_delta(const LatentSafetyModel& model, const SimConfig& cfg,
                                     const std::vector<Scenario>& scenarios, int workers = 1) {
  std::vector<std::function<RunResult()>> jobs;
  for (const auto& s : scenarios) jobs.push_back([&, s] { return run(s, EvalMode::set(), model, cfg); });
  std::vector<LabelledTrace> traces;
  for (auto& r : parallel_map(jobs, workers)) traces.push_back(label(r));
  return aggregate(traces).delta;
}

/// Every scenario under every requested kind of evaluation. Set runs go first;
/// a margin run without an explicit delta uses the mean spread of those Set
/// runs (or the model's stored delta if no Set run was requested).
inline std::vector<RunResult> run_matrix(const LatentSafetyModel& model, const SimConfig& cfg,
                                         const std::vector<Scenario>& scenarios, const std::vector<EvalKind>& kinds,
                                         int workers = 1) {
  std::vector<RunResult> out;
  auto run_kind = [&](EvalMode mode) {
    std::vector<std::function<RunResult()>> jobs;
    for (const auto& s : scenarios) jobs.push_back([&, s, mode] { return run(s, mode, model, cfg); });
    for (auto& r : parallel_map(jobs, workers)) out.push_back(std::move(r));
  };
  const bool want_set = std::find(kinds.begin(), kinds.end(), EvalKind::Set) != kinds.end();
  if (want_set) run_kind(EvalMode::set());
  double delta = cfg.margin_delta >= 0.0 ? cfg.margin_delta : model.margin_delta;
  if (want_set && cfg.margin_delta < 0.0) {
    std::vector<LabelledTrace> set_traces;
    for (const auto& r : out) set_traces.push_back(label(r));
    delta = aggregate(set_traces).delta;
  }
  for (auto k : kinds) {
    if (k == EvalKind::Point) run_kind(EvalMode::point());
    if (k == EvalKind::PointMargin) run_kind(EvalMode::margin(delta));
  }
  return out;
}

struct TimingSummary {
  std::size_t steps = 0;
  double set_forward_ms = 0.0;
  double certificate_qp_ms = 0.0;
  double total_ms() const { return set_forward_ms + certificate_qp_ms; }
};

inline TimingSummary summarize_timing(const std::vector<RunResult>& runs) {
  TimingSummary s;
  for (const auto& r : runs) {
    for (const auto& t : r.timing) {
      s.set_forward_ms += t.set_forward_ms;
      s.certificate_qp_ms += t.certificate_qp_ms;
      ++s.steps;
    }
  }
  if (s.steps) {
    s.set_forward_ms /= static_cast<double>(s.steps);
    s.certificate_qp_ms /= static_cast<double>(s.steps);
  }
  return s;
}

inline std::string format_timing(const TimingSummary& t, double budget_ms = 20.0) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "Control step cost (mean over %zu steps)\n"
                "component                              ms        %% of %.0f ms\n"
                "encoder set-forward (16D->latent)      %-8.4f  %.2f%%\n"
                "certificate eval + L_g + QP solve      %-8.4f  %.2f%%\n"
                "full active control step               %-8.4f  %.2f%%\n",
                t.steps, budget_ms, t.set_forward_ms, 100.0 * t.set_forward_ms / budget_ms, t.certificate_qp_ms,
                100.0 * t.certificate_qp_ms / budget_ms, t.total_ms(), 100.0 * t.total_ms() / budget_ms);
  return buf;
}

}  // namespace zonosafe
