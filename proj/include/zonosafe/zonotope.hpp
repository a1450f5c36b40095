#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace zonosafe {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Closed interval [lo, hi].
struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  double width() const { return hi - lo; }
  double mid() const { return 0.5 * (lo + hi); }
  bool contains(double x, double tol = 0.0) const { return x >= lo - tol && x <= hi + tol; }
};

/// Zonotope <c, G> = { c + G*beta : beta in [-1,1]^q }.
///
/// The generator matrix may have zero columns, in which case the set is the
/// single point c.
class Zonotope {
 public:
  Zonotope() = default;

  Zonotope(Vec center, Mat generators) : center_(std::move(center)), generators_(std::move(generators)) {
    if (generators_.rows() != center_.size()) {
      if (generators_.size() == 0) {
        generators_.resize(center_.size(), 0);
      } else {
        throw std::invalid_argument("Zonotope: center has dimension " + std::to_string(center_.size()) +
                                    " but generator matrix has " + std::to_string(generators_.rows()) + " rows");
      }
    }
    if (!center_.allFinite() || !generators_.allFinite()) {
      throw std::invalid_argument("Zonotope: non-finite entry");
    }
  }

  static Zonotope point(Vec center) {
    const auto n = center.size();
    return Zonotope(std::move(center), Mat(n, 0));
  }

  /// Axis-aligned box with half-widths `radius`; zero radii contribute no generator.
  static Zonotope box(const Vec& center, const Vec& radius) {
    if (center.size() != radius.size()) throw std::invalid_argument("Zonotope::box: dimension mismatch");
    std::vector<Eigen::Index> nonzero;
    for (Eigen::Index i = 0; i < radius.size(); ++i) {
      if (radius[i] < 0.0) throw std::invalid_argument("Zonotope::box: negative radius");
      if (radius[i] > 0.0) nonzero.push_back(i);
    }
    Mat g = Mat::Zero(center.size(), static_cast<Eigen::Index>(nonzero.size()));
    for (std::size_t j = 0; j < nonzero.size(); ++j) g(nonzero[j], static_cast<Eigen::Index>(j)) = radius[nonzero[j]];
    return Zonotope(center, std::move(g));
  }

  const Vec& center() const { return center_; }
  const Mat& generators() const { return generators_; }
  Eigen::Index dim() const { return center_.size(); }
  Eigen::Index order() const { return generators_.cols(); }

  /// Point c + G*beta for a coefficient vector beta (not range-checked).
  Vec at(const Vec& beta) const { return center_ + generators_ * beta; }

 private:
  Vec center_;
  Mat generators_;
};

namespace detail {
inline void require_dim(Eigen::Index expected, Eigen::Index got, const char* what) {
  if (expected != got) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (expected " + std::to_string(expected) +
                                ", got " + std::to_string(got) + ")");
  }
}
}  // namespace detail

/// Sum_j |w^T G_j|, the half-width of Z along w.
inline double support_radius(const Vec& w, const Zonotope& z) {
  detail::require_dim(z.dim(), w.size(), "support_radius");
  if (z.order() == 0) return 0.0;
  return (z.generators().transpose() * w).cwiseAbs().sum();
}

/// Exact min over Z of w^T z + b.
inline double linear_min(const Vec& w, double b, const Zonotope& z) {
  detail::require_dim(z.dim(), w.size(), "linear_min");
  return (w.dot(z.center()) + b) - support_radius(w, z);
}

/// Exact max over Z of w^T z + b.
inline double linear_max(const Vec& w, double b, const Zonotope& z) {
  detail::require_dim(z.dim(), w.size(), "linear_max");
  return (w.dot(z.center()) + b) + support_radius(w, z);
}

inline Zonotope affine_map(const Mat& weight, const Vec& bias, const Zonotope& z) {
  detail::require_dim(z.dim(), weight.cols(), "affine_map");
  detail::require_dim(weight.rows(), bias.size(), "affine_map bias");
  return Zonotope(weight * z.center() + bias, weight * z.generators());
}

inline std::vector<Interval> interval_hull(const Zonotope& z) {
  std::vector<Interval> hull(static_cast<std::size_t>(z.dim()));
  const Vec radius = z.order() == 0 ? Vec(Vec::Zero(z.dim())) : Vec(z.generators().cwiseAbs().rowwise().sum());
  for (Eigen::Index i = 0; i < z.dim(); ++i) {
    hull[static_cast<std::size_t>(i)] = {z.center()[i] - radius[i], z.center()[i] + radius[i]};
  }
  return hull;
}

inline double frobenius_radius(const Zonotope& z) { return z.generators().norm(); }

/// Chord-slope relaxation of tanh on one interval: tanh(x) - slope*x lies in
/// [err_lo, err_hi] for every x in [lo, hi].
struct TanhRelaxation {
  double slope = 1.0;
  double err_lo = 0.0;
  double err_hi = 0.0;

  double offset() const { return 0.5 * (err_hi + err_lo); }
  double radius() const { return 0.5 * (err_hi - err_lo); }
};

inline constexpr double kDegenerateWidth = 1e-12;

inline TanhRelaxation tanh_relaxation(Interval iv) {
  const double l = iv.lo;
  const double u = iv.hi;
  const double tl = std::tanh(l);
  if (!(u - l >= kDegenerateWidth)) {
    const double m = 1.0 - tl * tl;
    const double e = tl - m * l;
    return {m, e, e};
  }
  const double tu = std::tanh(u);
  const double m = (tu - tl) / (u - l);
  auto err = [m](double x) { return std::tanh(x) - m * x; };
  double lo = std::min(err(l), err(u));
  double hi = std::max(err(l), err(u));
  // e'(x) = 1 - tanh(x)^2 - m vanishes at x = +-atanh(sqrt(1 - m)).
  if (m < 1.0 && m > 0.0) {
    const double x_star = std::atanh(std::sqrt(1.0 - m));
    for (double x : {x_star, -x_star}) {
      if (std::isfinite(x) && x > l && x < u) {
        const double e = err(x);
        lo = std::min(lo, e);
        hi = std::max(hi, e);
      }
    }
  }
  return {m, lo, hi};
}

/// Per-dimension relaxations for a zonotope's interval hull.
inline std::vector<TanhRelaxation> tanh_relaxations(const Zonotope& z) {
  const auto hull = interval_hull(z);
  std::vector<TanhRelaxation> out;
  out.reserve(hull.size());
  for (const auto& iv : hull) out.push_back(tanh_relaxation(iv));
  return out;
}

/// Applies fixed relaxations: <m.c + mid, [diag(m) G, diag(rad)]>.
inline Zonotope apply_tanh_relaxations(const Zonotope& z, const std::vector<TanhRelaxation>& rel) {
  detail::require_dim(z.dim(), static_cast<Eigen::Index>(rel.size()), "apply_tanh_relaxations");
  const Eigen::Index n = z.dim();
  const Eigen::Index q = z.order();
  Vec slope(n), offset(n), radius(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rel[static_cast<std::size_t>(i)];
    slope[i] = r.slope;
    offset[i] = r.offset();
    radius[i] = r.radius();
  }
  Mat g(n, q + n);
  g.leftCols(q) = slope.asDiagonal() * z.generators();
  g.rightCols(n) = radius.asDiagonal().toDenseMatrix();
  return Zonotope(slope.cwiseProduct(z.center()) + offset, std::move(g));
}

/// Sound enclosure of element-wise tanh over Z. Output has q + n generators.
inline Zonotope tanh_enclosure(const Zonotope& z) { return apply_tanh_relaxations(z, tanh_relaxations(z)); }

/// Membership test: searches beta in [-1,1]^q minimising ||c + G beta - p||
/// by projected coordinate descent and accepts if the infinity-norm residual
/// is within tol.
inline bool contains_point(const Zonotope& z, const Vec& p, double tol, int max_iterations = 1000) {
  detail::require_dim(z.dim(), p.size(), "contains_point");
  const auto hull = interval_hull(z);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!hull[static_cast<std::size_t>(i)].contains(p[i], tol)) return false;
  }
  const Mat& g = z.generators();
  const Eigen::Index q = g.cols();
  Vec residual = p - z.center();
  if (residual.lpNorm<Eigen::Infinity>() <= tol) return true;
  if (q == 0) return false;

  const Vec col_sq = g.colwise().squaredNorm().transpose();
  Vec beta = Vec::Zero(q);
  for (int it = 0; it < max_iterations; ++it) {
    double max_step = 0.0;
    for (Eigen::Index j = 0; j < q; ++j) {
      if (col_sq[j] == 0.0) continue;
      const double target = std::clamp(beta[j] + g.col(j).dot(residual) / col_sq[j], -1.0, 1.0);
      const double step = target - beta[j];
      if (step != 0.0) {
        residual -= step * g.col(j);
        beta[j] = target;
        max_step = std::max(max_step, std::abs(step));
      }
    }
    if (residual.lpNorm<Eigen::Infinity>() <= tol) return true;
    if (max_step < 1e-12) break;
  }
  // Recompute the residual from scratch to shed accumulated rounding.
  residual = p - z.at(beta);
  return residual.lpNorm<Eigen::Infinity>() <= tol;
}

}  // namespace zonosafe
