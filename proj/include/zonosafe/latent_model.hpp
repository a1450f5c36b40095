#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "zonosafe/certificates.hpp"
#include "zonosafe/mlp.hpp"
#include "zonosafe/plant.hpp"

namespace zonosafe {

/// Discrete latent model z+ = A z + B mu over one control period dt.
///
/// The barrier constraint is written in continuous time, so the drift and
/// input matrices it uses are the forward-difference generators
/// (A - I)/dt and B/dt.
struct LatentDynamics {
  Mat A;
  Mat B;
  double dt = 0.02;

  Eigen::Index latent_dim() const { return A.rows(); }

  Vec predict(const Vec& z, const Vec& mu) const { return A * z + B * mu; }
  Mat drift() const { return (A - Mat::Identity(A.rows(), A.cols())) / dt; }
  Mat input_matrix() const { return B / dt; }

  void validate() const {
    if (A.rows() != A.cols()) throw std::invalid_argument("LatentDynamics: A must be square");
    if (B.rows() != A.rows() || B.cols() != kInputDim) throw std::invalid_argument("LatentDynamics: B shape");
    if (!A.allFinite() || !B.allFinite()) throw std::invalid_argument("LatentDynamics: non-finite entry");
    if (!(dt > 0.0)) throw std::invalid_argument("LatentDynamics: dt must be positive");
  }
};

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Columns are samples: z and z_next are n_z x N, mu is 3 x N.
inline LatentDynamics fit_latent_dynamics(const Mat& z, const Mat& mu, const Mat& z_next, double dt) {
  const Eigen::Index n = z.rows();
  const Eigen::Index m = mu.rows();
  const Eigen::Index samples = z.cols();
  if (mu.cols() != samples || z_next.cols() != samples || z_next.rows() != n) {
    throw std::invalid_argument("fit_latent_dynamics: inconsistent sample matrices");
  }
  if (samples < n + m) {
    throw FitError("fit_latent_dynamics: need at least " + std::to_string(n + m) + " samples, got " +
                   std::to_string(samples));
  }
  Mat regressor(samples, n + m);
  regressor.leftCols(n) = z.transpose();
  regressor.rightCols(m) = mu.transpose();
  Eigen::ColPivHouseholderQR<Mat> qr(regressor);
  if (qr.rank() < n + m) {
    throw FitError("fit_latent_dynamics: regressor [z; mu] is rank deficient (rank " + std::to_string(qr.rank()) +
                   " of " + std::to_string(n + m) + ")");
  }
  const Mat theta = qr.solve(Mat(z_next.transpose()));  // (n+m) x n
  LatentDynamics d;
  d.A = theta.topRows(n).transpose();
  d.B = theta.bottomRows(m).transpose();
  d.dt = dt;
  return d;
}

/// Residuals z_next - (A z + B mu), one column per sample.
inline Mat dynamics_residuals(const LatentDynamics& dyn, const Mat& z, const Mat& mu, const Mat& z_next) {
  return z_next - (dyn.A * z + dyn.B * mu);
}

/// Empirical quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile: empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: level outside [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline constexpr double kBoundQuantile = 0.995;

/// Quantile of |w^T r| over the residual columns.
inline double directed_bound(const BarrierHead& head, const Mat& residuals, double level = kBoundQuantile) {
  detail::require_dim(head.w.size(), residuals.rows(), "directed_bound");
  const Vec proj = (residuals.transpose() * head.w).cwiseAbs();
  return quantile(std::vector<double>(proj.data(), proj.data() + proj.size()), level);
}

/// Per-dimension quantiles of |r_d|.
inline Vec box_dynamics_error(const Mat& residuals, double level = kBoundQuantile) {
  Vec eps(residuals.rows());
  for (Eigen::Index d = 0; d < residuals.rows(); ++d) {
    const Vec row = residuals.row(d).transpose().cwiseAbs();
    eps[d] = quantile(std::vector<double>(row.data(), row.data() + row.size()), level);
  }
  return eps;
}

inline double box_bound(const BarrierHead& head, const Mat& residuals, double level = kBoundQuantile) {
  detail::require_dim(head.w.size(), residuals.rows(), "box_bound");
  return head.w.cwiseAbs().dot(box_dynamics_error(residuals, level));
}

struct TransitionSample {
  PlantState x;
  Accel u = Accel::Zero();
  PlantState x_next;
};

struct ConjugacyReport {
  double eps_conj = 0.0;
  std::size_t steps = 0;
  /// eps_dir_i - ||w_i|| * eps_conj, one per head.
  std::vector<double> head_margins;
};

inline double conjugacy_gap(const Mlp& encoder, const LatentDynamics& dyn, const TransitionSample& s) {
  const Vec z = forward_point(encoder, Vec(s.x.to_vector()));
  const Vec z_next = forward_point(encoder, Vec(s.x_next.to_vector()));
  return (z_next - dyn.predict(z, Vec(s.u))).norm();
}

inline ConjugacyReport conjugacy_error(const Mlp& encoder, const LatentDynamics& dyn,
                                       const std::vector<TransitionSample>& steps,
                                       const std::vector<BarrierHead>& heads = {}) {
  ConjugacyReport r;
  r.steps = steps.size();
  for (const auto& s : steps) r.eps_conj = std::max(r.eps_conj, conjugacy_gap(encoder, dyn, s));
  for (const auto& h : heads) r.head_margins.push_back(h.eps_dir - h.lipschitz * r.eps_conj);
  return r;
}

struct ProbeFit {
  Vec w;
  double b = 0.0;
  double correlation = 0.0;  // Pearson R between fitted values and targets
};

inline double pearson(const Vec& a, const Vec& b) {
  const double ma = a.mean(), mb = b.mean();
  const Vec da = a.array() - ma;
  const Vec db = b.array() - mb;
  const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
  if (den == 0.0) return (da.squaredNorm() == 0.0 && db.squaredNorm() == 0.0) ? 1.0 : 0.0;
  return da.dot(db) / den;
}

/// Least-squares affine probe targets ~ w^T x + b; features are columns.
inline ProbeFit fit_linear_probe(const Mat& features, const Vec& targets) {
  const Eigen::Index d = features.rows();
  const Eigen::Index samples = features.cols();
  if (targets.size() != samples) throw std::invalid_argument("fit_linear_probe: target count mismatch");
  if (samples < d + 1) throw FitError("fit_linear_probe: fewer samples than parameters");
  // Center the features so the intercept decouples from the slope.
  const Vec mean_x = features.rowwise().mean();
  const double mean_t = targets.mean();
  const Mat centered = features.colwise() - mean_x;
  const Vec t_centered = targets.array() - mean_t;
  Eigen::ColPivHouseholderQR<Mat> qr(Mat(centered.transpose()));
  if (qr.rank() < d) {
    throw FitError("fit_linear_probe: feature matrix is rank deficient (rank " + std::to_string(qr.rank()) + " of " +
                   std::to_string(d) + ")");
  }
  ProbeFit fit;
  fit.w = qr.solve(t_centered);
  fit.b = mean_t - fit.w.dot(mean_x);
  const Vec fitted = (features.transpose() * fit.w).array() + fit.b;
  fit.correlation = pearson(fitted, targets);
  return fit;
}

struct HeadFitResult {
  std::vector<BarrierHead> heads;
  std::vector<double> correlation;
};

/// One probe per head. `margins` holds one column per head, in the order of
/// `kinds`; latent codes are columns.
inline HeadFitResult fit_heads(const Mat& latent, const Mat& margins, const std::vector<HeadKind>& kinds) {
  if (margins.cols() != static_cast<Eigen::Index>(kinds.size()) || margins.rows() != latent.cols()) {
    throw std::invalid_argument("fit_heads: margins must be N x heads");
  }
  HeadFitResult out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    auto fit = fit_linear_probe(latent, margins.col(static_cast<Eigen::Index>(i)));
    out.heads.push_back(BarrierHead::make(kinds[i], std::move(fit.w), fit.b));
    out.correlation.push_back(fit.correlation);
  }
  return out;
}

/// Attaches directed and box error bounds computed from dynamics residuals.
inline void attach_error_bounds(std::vector<BarrierHead>& heads, const Mat& residuals) {
  for (auto& h : heads) {
    h.eps_dir = directed_bound(h, residuals);
    h.eps_box = box_bound(h, residuals);
    h.validate();
  }
}

}  // namespace zonosafe
