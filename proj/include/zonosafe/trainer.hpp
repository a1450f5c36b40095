#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "zonosafe/controller.hpp"
#include "zonosafe/csv.hpp"
#include "zonosafe/latent_model.hpp"
#include "zonosafe/mlp.hpp"
#include "zonosafe/model.hpp"
#include "zonosafe/plant.hpp"
#include "zonosafe/random.hpp"

namespace zonosafe {

inline constexpr int kTeacherDim = 6;
inline constexpr double kAttitudeLimit = deg2rad(30.0);

/// Hand-crafted safety features: gate distance, vertical and lateral load
/// clearance to the frame (load radius subtracted), swing energy, attitude
/// margin, and the smaller of the two clearances.
inline Vec teacher_features(const PlantState& s, const GateSpec& gate, const PlantParams& params) {
  const Eigen::Vector3d load = load_position(s, params);
  const double vertical = gate.half_height - params.r_load - std::abs(load.z() - gate.center_z);
  const double lateral = gate.half_width - params.r_load - std::abs(load.y() - gate.center_y);
  const double attitude = kAttitudeLimit - std::max(std::abs(s.euler.x()), std::abs(s.euler.y()));
  Vec f(kTeacherDim);
  f << gate.x_plane - s.p.x(), vertical, lateral, swing_energy(s, params), attitude, std::min(vertical, lateral);
  return f;
}

inline constexpr std::array<const char*, kTeacherDim> kTeacherNames = {
    "gate_distance", "vertical_clearance", "lateral_clearance", "swing_energy", "attitude_margin", "load_clearance"};

/// Swing-energy ceiling for the energy head: a swing reaching max_angle
/// while moving at max_rate.
inline double default_energy_cap(const PlantParams& params, double max_angle = deg2rad(40.0),
                                 double max_rate = 1.5) {
  const double L = params.rod_length;
  return 0.5 * params.m_load * (L * max_rate) * (L * max_rate) +
         params.m_load * params.gravity * L * (1.0 - std::cos(max_angle));
}

/// Signed margins the three certificate heads regress onto, evaluated at the
/// body positions extrapolated `lookahead` seconds along their velocity:
/// the load's height above the bottom frame, the lateral clearance of the
/// worse body, and energy headroom.
inline Eigen::Vector3d head_margins(const PlantState& s, const GateSpec& gate, const PlantParams& params,
                                    double energy_cap, double lookahead) {
  const Eigen::Vector3d load = load_position(s, params) + lookahead * load_velocity(s, params);
  const Eigen::Vector3d quad = s.p + lookahead * s.v;
  const double bottom = gate.center_z - gate.half_height + params.r_load;
  const double vertical = load.z() - bottom;
  const double lateral = std::min(gate.half_width - params.r_quad - std::abs(quad.y() - gate.center_y),
                                  gate.half_width - params.r_load - std::abs(load.y() - gate.center_y));
  return {vertical, lateral, energy_cap - swing_energy(s, params)};
}

inline const std::array<std::string, 3> kHeadTargetDescriptions = {
    "z_load(t+T) - (gate center z - half-height + r_load) [m]",
    "min over quad/load of (gate half-width - body radius - |y_body(t+T) - gate center y|) [m]",
    "E_max - load swing energy [J]"};

// ---------------------------------------------------------------------------
// Data generation

enum class Strategy : int { Snapshot = 0, Rollout = 1, NearGate = 2, Boundary = 3 };

struct Sample {
  PlantState x;
  Accel u = Accel::Zero();
  PlantState x_next;
  Vec teacher;
  int strategy = -1;  // Strategy, or -1 when loaded from disk
};

struct DataConfig {
  std::size_t samples = 10000;
  std::array<double, 4> mix = {0.25, 0.30, 0.25, 0.20};
  std::uint64_t seed = 7;
  double near_gate_window = 2.0;
  double boundary_band = 0.1;
  int rollout_segment = 25;
  double max_oversampling = 100.0;

  void validate() const {
    double sum = 0.0;
    for (double m : mix) {
      if (!(m >= 0.0)) throw std::invalid_argument("data.mix: entries must be >= 0");
      sum += m;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("data.mix: entries must sum to 1");
    if (samples == 0) throw std::invalid_argument("data.samples: must be positive");
    if (!(near_gate_window > 0.0)) throw std::invalid_argument("data.near_gate_window: must be positive");
    if (rollout_segment <= 0) throw std::invalid_argument("data.rollout_segment: must be positive");
  }

  /// Per-strategy counts; rounding remainder goes to the largest share.
  std::array<std::size_t, 4> counts() const {
    std::array<std::size_t, 4> c{};
    std::size_t total = 0;
    for (int i = 0; i < 4; ++i) {
      c[static_cast<std::size_t>(i)] = static_cast<std::size_t>(std::llround(mix[static_cast<std::size_t>(i)] *
                                                                             static_cast<double>(samples)));
      total += c[static_cast<std::size_t>(i)];
    }
    const auto largest = static_cast<std::size_t>(std::max_element(mix.begin(), mix.end()) - mix.begin());
    if (total > samples) c[largest] -= total - samples;
    if (total < samples) c[largest] += samples - total;
    return c;
  }
};

class DataGenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline PlantState random_snapshot(Rng& rng, double x_lo, double x_hi) {
  PlantState s;
  s.p = {rng.uniform(x_lo, x_hi), rng.uniform(-0.8, 0.8), rng.uniform(1.5, 3.0)};
  s.v = {rng.uniform(0.0, 3.5), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
  s.euler = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.1, 0.1)};
  s.omega = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-0.2, 0.2)};
  s.alpha = rng.uniform(0.0, deg2rad(43.0));
  s.beta = rng.uniform(-std::numbers::pi, std::numbers::pi);
  s.alpha_dot = rng.uniform(-1.5, 1.5);
  s.beta_dot = rng.uniform(-1.5, 1.5);
  return s;
}

inline Accel random_command(Rng& rng, double limit) {
  return {rng.uniform(-limit, limit), rng.uniform(-limit, limit), rng.uniform(-limit, limit)};
}

inline PlantState random_approach_start(Rng& rng) {
  PlantState s;
  s.p = {rng.uniform(3.0, 8.5), rng.uniform(-0.3, 0.3), rng.uniform(1.8, 2.6)};
  s.v = {rng.uniform(2.0, 2.5), 0.0, 0.0};
  s.alpha = rng.uniform(0.0, deg2rad(38.0));
  s.beta = rng.uniform(-std::numbers::pi, std::numbers::pi);
  s.alpha_dot = rng.uniform(-0.8, 0.8);
  s.beta_dot = rng.uniform(-0.6, 0.6);
  return s;
}

}  // namespace detail

/// Mixes uniform snapshots, closed-loop rollout segments under a randomised
/// nominal controller, near-gate snapshots and states near the clearance
/// threshold, in the configured proportions.
inline std::vector<Sample> generate_dataset(const DataConfig& cfg, const PlantParams& params, const GateSpec& gate,
                                            const NominalConfig& nominal = {}) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto counts = cfg.counts();
  std::vector<Sample> out;
  out.reserve(cfg.samples);
  const double cmd_limit = params.mu_max;

  auto push = [&](const PlantState& x, const Accel& u, Strategy tag) {
    Sample s;
    s.x = x;
    s.u = clamp_accel(u, params);
    s.x_next = step(x, s.u, params);
    s.teacher = teacher_features(x, gate, params);
    s.strategy = static_cast<int>(tag);
    out.push_back(std::move(s));
  };

  for (std::size_t i = 0; i < counts[0]; ++i) {
    const auto x = detail::random_snapshot(rng, 2.0, 13.0);
    push(x, detail::random_command(rng, cmd_limit), Strategy::Snapshot);
  }

  const Eigen::Vector3d waypoint = gate_waypoint(gate, params, nominal);
  std::size_t rollout_left = counts[1];
  while (rollout_left > 0) {
    PlantState x = detail::random_approach_start(rng);
    NominalConfig jitter = nominal;
    jitter.k_vel *= rng.uniform(0.7, 1.3);
    jitter.k_cross *= rng.uniform(0.7, 1.3);
    const Eigen::Vector3d offset(0.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.4, 0.2));
    for (int k = 0; k < cfg.rollout_segment && rollout_left > 0; ++k) {
      Accel u = nominal_input(x, waypoint + offset, jitter, params.mu_max);
      u += Accel(rng.normal(), rng.normal(), rng.normal()) * 0.5;
      push(x, u, Strategy::Rollout);
      x = out.back().x_next;
      --rollout_left;
    }
  }

  const double x_lo = gate.x_plane - cfg.near_gate_window;
  const double x_hi = gate.x_plane + cfg.near_gate_window;
  for (std::size_t i = 0; i < counts[2]; ++i) {
    const auto x = detail::random_snapshot(rng, x_lo, x_hi);
    push(x, detail::random_command(rng, cmd_limit), Strategy::NearGate);
  }

  const auto max_tries = static_cast<std::size_t>(cfg.max_oversampling * static_cast<double>(counts[3]));
  std::size_t tries = 0;
  for (std::size_t i = 0; i < counts[3];) {
    if (tries++ >= max_tries) {
      throw DataGenerationError("boundary sampling accepted only " + std::to_string(i) + " of " +
                                std::to_string(counts[3]) + " states within " + std::to_string(max_tries) + " draws");
    }
    const auto x = detail::random_snapshot(rng, x_lo, x_hi);
    const double clearance = teacher_features(x, gate, params)[5];
    if (std::abs(clearance) > cfg.boundary_band) continue;
    push(x, detail::random_command(rng, cmd_limit), Strategy::Boundary);
    ++i;
  }
  return out;
}

inline std::vector<std::string> dataset_header() {
  std::vector<std::string> h;
  for (auto n : kStateNames) h.push_back("x_" + std::string(n));
  for (auto n : {"u_x", "u_y", "u_z"}) h.emplace_back(n);
  for (auto n : kStateNames) h.push_back("xn_" + std::string(n));
  for (auto n : kTeacherNames) h.push_back("t_" + std::string(n));
  return h;
}

inline void write_dataset_csv(const std::vector<Sample>& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  out << join_csv(dataset_header()) << '\n';
  for (const auto& s : data) {
    std::vector<std::string> row;
    const StateVec x = s.x.to_vector();
    const StateVec xn = s.x_next.to_vector();
    for (int i = 0; i < kStateDim; ++i) row.push_back(format_double(x[i]));
    for (int i = 0; i < 3; ++i) row.push_back(format_double(s.u[i]));
    for (int i = 0; i < kStateDim; ++i) row.push_back(format_double(xn[i]));
    for (Eigen::Index i = 0; i < s.teacher.size(); ++i) row.push_back(format_double(s.teacher[i]));
    out << join_csv(row) << '\n';
  }
  if (!out) throw std::ios_base::failure("failed writing '" + path + "'");
}

inline std::vector<Sample> read_dataset_csv(const std::string& path) {
  const auto table = read_csv(path);
  if (table.header != dataset_header()) throw std::runtime_error("'" + path + "' does not have the dataset header");
  std::vector<Sample> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    std::vector<double> v(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) v[i] = parse_double(row[i]);
    Sample s;
    s.x = PlantState::from_vector(Eigen::Map<const Vec>(v.data(), kStateDim));
    s.u = Eigen::Map<const Eigen::Vector3d>(v.data() + kStateDim);
    s.x_next = PlantState::from_vector(Eigen::Map<const Vec>(v.data() + kStateDim + 3, kStateDim));
    s.teacher = Eigen::Map<const Vec>(v.data() + 2 * kStateDim + 3, kTeacherDim);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lambda_rec = 1.0;
  double lambda_dyn = 1.0;
  double lambda_tight = 0.5;
  double lambda_teach = 5.0;
  double tau = 0.25;
  double learning_rate = 5e-4;
  std::size_t batch_size = 256;
  int epochs = 120;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::vector<int> hidden = {64, 64};
  int latent_dim = 8;
  std::uint64_t seed = 11;
  UncertaintyBudget budget = UncertaintyBudget::standard();

  void validate() const {
    for (double l : {lambda_rec, lambda_dyn, lambda_tight, lambda_teach}) {
      if (!(l >= 0.0)) throw std::invalid_argument("train.lambda_*: weights must be >= 0");
    }
    if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("train.tau: must lie in [0,1]");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("train.learning_rate: must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("train.batch_size: must be positive");
    if (epochs <= 0) throw std::invalid_argument("train.epochs: must be positive");
    if (latent_dim <= 0) throw std::invalid_argument("train.latent_dim: must be positive");
    for (int h : hidden) {
      if (h <= 0) throw std::invalid_argument("train.hidden: widths must be positive");
    }
    budget.validate();
  }
};

/// Affine standardisation (x - mean) / scale.
struct Normalizer {
  Vec mean;
  Vec scale;

  static Normalizer fit(const Mat& columns) {
    Normalizer n;
    n.mean = columns.rowwise().mean();
    const Mat centered = columns.colwise() - n.mean;
    n.scale = (centered.rowwise().squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, columns.cols())))
                  .cwiseSqrt();
    for (Eigen::Index i = 0; i < n.scale.size(); ++i) {
      if (!(n.scale[i] > 1e-6)) n.scale[i] = 1.0;
    }
    return n;
  }

  Vec apply(const Vec& x) const { return (x - mean).cwiseQuotient(scale); }
};

/// Trainable parameters, all in normalised coordinates.
struct TrainState {
  Mlp encoder;
  Mlp decoder;
  Mat A;
  Mat B;
  Mat teacher_W;
  Vec teacher_b;

  static TrainState initial(const TrainConfig& cfg, Rng& rng) {
    std::vector<int> enc{kStateDim};
    enc.insert(enc.end(), cfg.hidden.begin(), cfg.hidden.end());
    enc.push_back(cfg.latent_dim);
    std::vector<int> dec(enc.rbegin(), enc.rend());
    TrainState s;
    s.encoder = make_tanh_mlp(enc, rng);
    s.decoder = make_tanh_mlp(dec, rng);
    s.A = Mat::Identity(cfg.latent_dim, cfg.latent_dim);
    s.B = Mat::Zero(cfg.latent_dim, kInputDim);
    const double limit = std::sqrt(6.0 / (cfg.latent_dim + kTeacherDim));
    s.teacher_W = Mat(kTeacherDim, cfg.latent_dim);
    for (Eigen::Index c = 0; c < s.teacher_W.cols(); ++c)
      for (Eigen::Index r = 0; r < s.teacher_W.rows(); ++r) s.teacher_W(r, c) = rng.uniform(-limit, limit);
    s.teacher_b = Vec::Zero(kTeacherDim);
    return s;
  }
};

/// Gradient with the same layout as TrainState.
struct TrainGradient {
  MlpGradient encoder;
  MlpGradient decoder;
  Mat A, B, teacher_W;
  Vec teacher_b;

  static TrainGradient zeros_like(const TrainState& s) {
    return {MlpGradient::zeros_like(s.encoder), MlpGradient::zeros_like(s.decoder),
            Mat::Zero(s.A.rows(), s.A.cols()),  Mat::Zero(s.B.rows(), s.B.cols()),
            Mat::Zero(s.teacher_W.rows(), s.teacher_W.cols()), Vec::Zero(s.teacher_b.size())};
  }
};

namespace detail {

template <typename Visitor>
void visit_mlp_params(Mlp& net, Visitor&& v) {
  for (auto& l : net.mutable_layers()) {
    if (l.kind != LayerKind::Dense) continue;
    v(l.weight.data(), l.weight.size());
    v(l.bias.data(), l.bias.size());
  }
}

template <typename Visitor>
void visit_mlp_grad(MlpGradient& g, Visitor&& v) {
  for (std::size_t i = 0; i < g.weight.size(); ++i) {
    if (g.weight[i].size() == 0) continue;
    v(g.weight[i].data(), g.weight[i].size());
    v(g.bias[i].data(), g.bias[i].size());
  }
}

template <typename Visitor>
void visit_params(TrainState& s, Visitor&& v) {
  visit_mlp_params(s.encoder, v);
  visit_mlp_params(s.decoder, v);
  v(s.A.data(), s.A.size());
  v(s.B.data(), s.B.size());
  v(s.teacher_W.data(), s.teacher_W.size());
  v(s.teacher_b.data(), s.teacher_b.size());
}

template <typename Visitor>
void visit_grads(TrainGradient& g, Visitor&& v) {
  visit_mlp_grad(g.encoder, v);
  visit_mlp_grad(g.decoder, v);
  v(g.A.data(), g.A.size());
  v(g.B.data(), g.B.size());
  v(g.teacher_W.data(), g.teacher_W.size());
  v(g.teacher_b.data(), g.teacher_b.size());
}

}  // namespace detail

inline Vec pack(TrainState s) {
  std::vector<double> flat;
  detail::visit_params(s, [&](double* p, Eigen::Index n) { flat.insert(flat.end(), p, p + n); });
  return Eigen::Map<Vec>(flat.data(), static_cast<Eigen::Index>(flat.size()));
}

inline void unpack(TrainState& s, const Vec& flat) {
  Eigen::Index off = 0;
  detail::visit_params(s, [&](double* p, Eigen::Index n) {
    std::copy(flat.data() + off, flat.data() + off + n, p);
    off += n;
  });
  if (off != flat.size()) throw std::invalid_argument("unpack: parameter count mismatch");
}

inline Vec pack(TrainGradient g) {
  std::vector<double> flat;
  detail::visit_grads(g, [&](double* p, Eigen::Index n) { flat.insert(flat.end(), p, p + n); });
  return Eigen::Map<Vec>(flat.data(), static_cast<Eigen::Index>(flat.size()));
}

/// A sample in normalised coordinates.
struct PreparedSample {
  Vec x;
  Vec x_next;
  Vec u;
  Vec teacher;
};

struct LossBreakdown {
  double rec = 0.0;
  double tight = 0.0;
  double dyn = 0.0;
  double teach = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    rec += o.rec;
    tight += o.tight;
    dyn += o.dyn;
    teach += o.teach;
    total += o.total;
    return *this;
  }
  LossBreakdown& operator*=(double s) {
    rec *= s;
    tight *= s;
    dyn *= s;
    teach *= s;
    total *= s;
    return *this;
  }
  double weighted(const TrainConfig& c) const {
    return c.lambda_rec * rec + c.lambda_tight * tight + c.lambda_dyn * dyn + c.lambda_teach * teach;
  }
};

/// Relaxations chosen for one sample's encoder and decoder set passes.
struct SampleRelaxations {
  RelaxationTape encoder;
  RelaxationTape decoder;
};

/// Loss of one sample; accumulates its gradient into `grad` when given.
///
/// Set passes treat the tanh relaxations as constants in the reverse sweep.
/// With `frozen`, the forward pass also reuses the given relaxations so that
/// finite differences see the same convention.
inline LossBreakdown sample_loss(const TrainState& s, const PreparedSample& smp, const Vec& eps,
                                 const TrainConfig& cfg, TrainGradient* grad = nullptr,
                                 const SampleRelaxations* frozen = nullptr, SampleRelaxations* record = nullptr) {
  LossBreakdown L;
  const auto enc_tape = forward_set_tape(s.encoder, Zonotope::box(smp.x, eps), frozen ? &frozen->encoder : nullptr);
  const auto dec_tape = forward_set_tape(s.decoder, enc_tape.output, frozen ? &frozen->decoder : nullptr);
  if (record) {
    record->encoder = enc_tape.relaxations;
    record->decoder = dec_tape.relaxations;
  }
  const Zonotope& latent = enc_tape.output;
  const Zonotope& recon = dec_tape.output;

  const Vec rec_err = recon.center() - smp.x;
  const double fro = recon.generators().norm();
  L.rec = (1.0 - cfg.tau) * rec_err.squaredNorm() + cfg.tau * fro;
  L.tight = latent.generators().squaredNorm();

  const Vec z = forward_point(s.encoder, smp.x);
  const Vec z_next = forward_point(s.encoder, smp.x_next);
  const Vec dyn_err = s.A * z + s.B * smp.u - z_next;
  L.dyn = dyn_err.squaredNorm();
  const Vec teach_err = s.teacher_W * z + s.teacher_b - smp.teacher;
  L.teach = teach_err.squaredNorm();
  L.total = L.weighted(cfg);

  if (!grad) return L;

  const Vec d_rec_c = cfg.lambda_rec * 2.0 * (1.0 - cfg.tau) * rec_err;
  Mat d_rec_g = Mat::Zero(recon.dim(), recon.order());
  if (fro > 0.0) d_rec_g = (cfg.lambda_rec * cfg.tau / fro) * recon.generators();
  auto d_latent = backward_set(s.decoder, dec_tape, d_rec_c, d_rec_g, grad->decoder);
  d_latent.generators += cfg.lambda_tight * 2.0 * latent.generators();
  backward_set(s.encoder, enc_tape, d_latent.center, d_latent.generators, grad->encoder);

  const Vec d_dyn = cfg.lambda_dyn * 2.0 * dyn_err;
  grad->A.noalias() += d_dyn * z.transpose();
  grad->B.noalias() += d_dyn * smp.u.transpose();
  const Vec d_teach = cfg.lambda_teach * 2.0 * teach_err;
  grad->teacher_W.noalias() += d_teach * z.transpose();
  grad->teacher_b += d_teach;

  const Vec dz = s.A.transpose() * d_dyn + s.teacher_W.transpose() * d_teach;
  backward_point(s.encoder, smp.x, dz, grad->encoder);
  backward_point(s.encoder, smp.x_next, Vec(-d_dyn), grad->encoder);
  return L;
}

/// Mean loss (and mean gradient) over a batch of sample indices.
inline LossBreakdown batch_loss(const TrainState& s, const std::vector<PreparedSample>& data,
                                const std::vector<std::size_t>& idx, const Vec& eps, const TrainConfig& cfg,
                                TrainGradient* grad = nullptr,
                                const std::vector<SampleRelaxations>* frozen = nullptr) {
  LossBreakdown sum;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    sum += sample_loss(s, data[idx[k]], eps, cfg, grad, frozen ? &(*frozen)[k] : nullptr);
  }
  const double inv = 1.0 / static_cast<double>(idx.size());
  sum *= inv;
  if (grad) {
    grad->encoder *= inv;
    grad->decoder *= inv;
    grad->A *= inv;
    grad->B *= inv;
    grad->teacher_W *= inv;
    grad->teacher_b *= inv;
  }
  return sum;
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Adam {
  double lr, beta1, beta2, eps;
  Vec m, v;
  long step_count = 0;

  Adam(Eigen::Index n, const TrainConfig& c)
      : lr(c.learning_rate), beta1(c.adam_beta1), beta2(c.adam_beta2), eps(c.adam_eps), m(Vec::Zero(n)),
        v(Vec::Zero(n)) {}

  void step(Vec& params, const Vec& grad) {
    ++step_count;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

struct TrainingData {
  std::vector<PreparedSample> samples;
  Normalizer state_norm;
  Normalizer teacher_norm;
  Vec eps;  // uncertainty half-widths in normalised coordinates
};

inline TrainingData prepare_training_data(const std::vector<Sample>& data, const UncertaintyBudget& budget) {
  if (data.empty()) throw std::invalid_argument("prepare_training_data: empty dataset");
  Mat xs(kStateDim, static_cast<Eigen::Index>(data.size()));
  Mat ts(kTeacherDim, static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    xs.col(static_cast<Eigen::Index>(i)) = data[i].x.to_vector();
    ts.col(static_cast<Eigen::Index>(i)) = data[i].teacher;
  }
  TrainingData td;
  td.state_norm = Normalizer::fit(xs);
  td.teacher_norm = Normalizer::fit(ts);
  td.eps = Vec(budget.eps).cwiseQuotient(td.state_norm.scale);
  for (const auto& s : data) {
    td.samples.push_back({td.state_norm.apply(Vec(s.x.to_vector())), td.state_norm.apply(Vec(s.x_next.to_vector())),
                          Vec(s.u), td.teacher_norm.apply(s.teacher)});
  }
  return td;
}

struct TrainResult {
  Mlp encoder;  // raw state units
  Mlp decoder;  // raw state units
  LatentDynamics dynamics;
  TeacherHead teacher;  // raw feature units
  std::vector<LossBreakdown> history;  // mean per epoch
  TrainState normalized;
};

/// Folds the normalisation into the first encoder layer, the last decoder
/// layer and the teacher head, so the exported networks act on raw units.
inline TrainResult export_trained(const TrainState& s, const TrainingData& td, double dt) {
  TrainResult r;
  r.normalized = s;
  r.encoder = s.encoder;
  auto& first = r.encoder.mutable_layers().front();
  const Vec inv_scale = td.state_norm.scale.cwiseInverse();
  first.bias -= first.weight * td.state_norm.mean.cwiseProduct(inv_scale);
  first.weight = first.weight * inv_scale.asDiagonal();

  r.decoder = s.decoder;
  auto& last = r.decoder.mutable_layers().back();
  last.weight = td.state_norm.scale.asDiagonal() * last.weight;
  last.bias = td.state_norm.scale.cwiseProduct(last.bias) + td.state_norm.mean;

  r.teacher.W = td.teacher_norm.scale.asDiagonal() * s.teacher_W;
  r.teacher.b = td.teacher_norm.scale.cwiseProduct(s.teacher_b) + td.teacher_norm.mean;
  r.dynamics = {s.A, s.B, dt};
  return r;
}

inline void check_finite(const LossBreakdown& l, int epoch) {
  const std::pair<const char*, double> terms[] = {
      {"reconstruction", l.rec}, {"tightness", l.tight}, {"dynamics", l.dyn}, {"teacher", l.teach}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw TrainingError(std::string("non-finite ") + name + " loss in epoch " + std::to_string(epoch));
    }
  }
}

/// Minibatch Adam on the composite loss. Deterministic for a fixed seed.
inline TrainResult train(const std::vector<Sample>& data, const TrainConfig& cfg, double dt,
                         const std::function<void(int, const LossBreakdown&)>& on_epoch = {}) {
  cfg.validate();
  Rng rng(cfg.seed);
  const TrainingData td = prepare_training_data(data, cfg.budget);
  TrainState state = TrainState::initial(cfg, rng);
  Vec params = pack(state);
  Adam adam(params.size(), cfg);

  std::vector<std::size_t> order(td.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<LossBreakdown> history;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    LossBreakdown epoch_sum;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
      TrainGradient grad = TrainGradient::zeros_like(state);
      LossBreakdown bl = batch_loss(state, td.samples, batch, td.eps, cfg, &grad);
      check_finite(bl, epoch);
      bl *= static_cast<double>(batch.size());
      epoch_sum += bl;
      adam.step(params, pack(grad));
      unpack(state, params);
    }
    epoch_sum *= 1.0 / static_cast<double>(order.size());
    history.push_back(epoch_sum);
    if (on_epoch) on_epoch(epoch, epoch_sum);
  }
  TrainResult r = export_trained(state, td, dt);
  r.history = std::move(history);
  return r;
}

inline void write_loss_history_csv(const std::vector<LossBreakdown>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  out << "epoch,rec,tight,dyn,teach,total\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    out << (i + 1) << ',' << join_csv({format_double(h.rec), format_double(h.tight), format_double(h.dyn),
                                       format_double(h.teach), format_double(h.total)})
        << '\n';
  }
}

// ---------------------------------------------------------------------------
// Fitting the latent model, heads and error bounds on a trained encoder

struct FitOptions {
  double near_gate_window = 2.0;
  double energy_cap = 0.0;  // <= 0 selects default_energy_cap
  double lookahead = 0.5;   // s, T in the clearance targets
};

inline bool near_gate(const PlantState& s, const GateSpec& gate, double window) {
  return std::abs(s.p.x() - gate.x_plane) <= window;
}

/// Fits A, B on all samples; heads, residual bounds and the conjugacy gap on
/// the near-gate subset.
inline LatentSafetyModel fit_safety_model(const Mlp& encoder, const Mlp& decoder, const TeacherHead& teacher,
                                          const std::vector<Sample>& data, const GateSpec& gate,
                                          const PlantParams& params, const FitOptions& opt = {}) {
  const double e_cap = opt.energy_cap > 0.0 ? opt.energy_cap : default_energy_cap(params);
  const auto n = static_cast<Eigen::Index>(data.size());
  const Eigen::Index nz = encoder.output_dim();
  Mat z(nz, n), zn(nz, n), mu(kInputDim, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = data[static_cast<std::size_t>(i)];
    z.col(i) = forward_point(encoder, Vec(s.x.to_vector()));
    zn.col(i) = forward_point(encoder, Vec(s.x_next.to_vector()));
    mu.col(i) = s.u;
  }
  LatentSafetyModel m;
  m.encoder = encoder;
  m.decoder = decoder;
  m.teacher = teacher;
  m.dynamics = fit_latent_dynamics(z, mu, zn, params.dt);

  std::vector<Eigen::Index> near;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (near_gate(data[static_cast<std::size_t>(i)].x, gate, opt.near_gate_window)) near.push_back(i);
  }
  if (near.size() < static_cast<std::size_t>(nz + 2)) {
    throw FitError("only " + std::to_string(near.size()) + " near-gate samples; cannot fit certificate heads");
  }
  const auto nn = static_cast<Eigen::Index>(near.size());
  Mat z_near(nz, nn), zn_near(nz, nn), mu_near(kInputDim, nn), margins(nn, 3);
  std::vector<TransitionSample> validation;
  for (Eigen::Index k = 0; k < nn; ++k) {
    const auto i = near[static_cast<std::size_t>(k)];
    const auto& s = data[static_cast<std::size_t>(i)];
    z_near.col(k) = z.col(i);
    zn_near.col(k) = zn.col(i);
    mu_near.col(k) = mu.col(i);
    margins.row(k) = head_margins(s.x, gate, params, e_cap, opt.lookahead).transpose();
    validation.push_back({s.x, s.u, s.x_next});
  }
  auto fitted = fit_heads(z_near, margins, {kAllHeads.begin(), kAllHeads.end()});
  const Mat residuals = dynamics_residuals(m.dynamics, z_near, mu_near, zn_near);
  attach_error_bounds(fitted.heads, residuals);
  m.heads = std::move(fitted.heads);
  m.head_correlation = std::move(fitted.correlation);
  m.head_targets.assign(kHeadTargetDescriptions.begin(), kHeadTargetDescriptions.end());
  m.conjugacy = conjugacy_error(encoder, m.dynamics, validation, m.heads);
  m.metadata["energy_cap"] = format_double(e_cap);
  m.metadata["lookahead"] = format_double(opt.lookahead);
  m.metadata["near_gate_window"] = format_double(opt.near_gate_window);
  m.metadata["near_gate_samples"] = std::to_string(nn);
  m.metadata["fit_samples"] = std::to_string(n);
  return m;
}

}  // namespace zonosafe
