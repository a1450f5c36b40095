#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

namespace zonosafe {

/// a^T mu + c >= 0
struct LinearConstraint {
  Eigen::Vector3d a = Eigen::Vector3d::Zero();
  double c = 0.0;
};

struct InputBounds {
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(-6.0);
  Eigen::Vector3d hi = Eigen::Vector3d::Constant(6.0);

  static InputBounds symmetric(double limit) {
    return {Eigen::Vector3d::Constant(-limit), Eigen::Vector3d::Constant(limit)};
  }
};

struct QpResult {
  Eigen::Vector3d mu_safe = Eigen::Vector3d::Zero();
  std::vector<int> active_set;  // indices into [constraints..., lo_x, lo_y, lo_z, hi_x, hi_y, hi_z]
  double objective = 0.0;
  bool feasible = false;
  double kkt_residual = 0.0;
  double max_violation = 0.0;  // largest constraint shortfall at mu_safe
};

namespace detail {

inline constexpr double kQpDualTol = 1e-10;
inline constexpr double kQpPrimalTol = 1e-9;

inline std::vector<LinearConstraint> stack_with_bounds(const std::vector<LinearConstraint>& cons,
                                                       const InputBounds& bounds) {
  std::vector<LinearConstraint> rows = cons;
  for (int k = 0; k < 3; ++k) rows.push_back({Eigen::Vector3d::Unit(k), -bounds.lo[k]});
  for (int k = 0; k < 3; ++k) rows.push_back({-Eigen::Vector3d::Unit(k), bounds.hi[k]});
  return rows;
}

/// Calls fn(indices) for every subset of {0..n-1} with at most k elements,
/// smallest subsets first.
template <typename Fn>
void for_each_subset(int n, int k, Fn&& fn) {
  std::vector<int> idx;
  for (int size = 0; size <= std::min(n, k); ++size) {
    idx.resize(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) idx[static_cast<std::size_t>(i)] = i;
    while (true) {
      fn(idx);
      int pos = size - 1;
      while (pos >= 0 && idx[static_cast<std::size_t>(pos)] == n - size + pos) --pos;
      if (pos < 0) break;
      ++idx[static_cast<std::size_t>(pos)];
      for (int j = pos + 1; j < size; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
  }
}

inline double max_shortfall(const std::vector<LinearConstraint>& rows, const Eigen::Vector3d& mu) {
  double v = 0.0;
  for (const auto& r : rows) v = std::max(v, -(r.a.dot(mu) + r.c));
  return v;
}

struct ProjectionResult {
  bool found = false;
  Eigen::Vector3d mu = Eigen::Vector3d::Zero();
  std::vector<int> active;
  Eigen::VectorXd multipliers;
  double objective = std::numeric_limits<double>::infinity();
};

/// Projection of mu_nom onto {mu : rows}, by enumerating active sets of at
/// most three constraints and keeping KKT-consistent candidates.
inline ProjectionResult project(const Eigen::Vector3d& mu_nom, const std::vector<LinearConstraint>& rows) {
  ProjectionResult best;
  const int m = static_cast<int>(rows.size());
  for_each_subset(m, 3, [&](const std::vector<int>& subset) {
    const auto s = static_cast<Eigen::Index>(subset.size());
    Eigen::Vector3d mu = mu_nom;
    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(s);
    if (s > 0) {
      Eigen::MatrixXd a(s, 3);
      Eigen::VectorXd rhs(s);
      for (Eigen::Index i = 0; i < s; ++i) {
        const auto& r = rows[static_cast<std::size_t>(subset[static_cast<std::size_t>(i)])];
        a.row(i) = r.a.transpose();
        rhs[i] = -(r.c + r.a.dot(mu_nom));
      }
      const Eigen::MatrixXd gram = a * a.transpose();
      Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
      lu.setThreshold(1e-12);
      if (!lu.isInvertible()) return;
      lambda = lu.solve(rhs);
      if ((lambda.array() < -kQpDualTol).any()) return;
      mu = mu_nom + a.transpose() * lambda;
    }
    for (const auto& r : rows) {
      if (r.a.dot(mu) + r.c < -kQpPrimalTol) return;
    }
    const double obj = (mu - mu_nom).squaredNorm();
    if (obj < best.objective) {
      best.found = true;
      best.mu = mu;
      best.active = subset;
      best.multipliers = 2.0 * lambda;
      best.objective = obj;
    }
  });
  return best;
}

/// min t s.t. rows shifted by t (box rows unshifted), by vertex enumeration in
/// (mu, t).
inline double least_violation_level(const std::vector<LinearConstraint>& rows, int shifted_count) {
  const int m = static_cast<int>(rows.size());
  double best = std::numeric_limits<double>::infinity();
  for_each_subset(m, 4, [&](const std::vector<int>& subset) {
    if (subset.size() != 4) return;
    Eigen::Matrix4d a;
    Eigen::Vector4d rhs;
    for (int i = 0; i < 4; ++i) {
      const int idx = subset[static_cast<std::size_t>(i)];
      const auto& r = rows[static_cast<std::size_t>(idx)];
      a.row(i) << r.a.transpose(), (idx < shifted_count ? 1.0 : 0.0);
      rhs[i] = -r.c;
    }
    Eigen::FullPivLU<Eigen::Matrix4d> lu(a);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) return;
    const Eigen::Vector4d sol = lu.solve(rhs);
    const Eigen::Vector3d mu = sol.head<3>();
    const double t = sol[3];
    for (int j = 0; j < m; ++j) {
      const auto& r = rows[static_cast<std::size_t>(j)];
      const double lhs = r.a.dot(mu) + r.c + (j < shifted_count ? t : 0.0);
      if (lhs < -kQpPrimalTol * (1.0 + std::abs(r.c))) return;
    }
    best = std::min(best, t);
  });
  return best;
}

inline double kkt_residual(const Eigen::Vector3d& mu, const Eigen::Vector3d& mu_nom,
                           const std::vector<LinearConstraint>& rows, const std::vector<int>& active,
                           const Eigen::VectorXd& multipliers) {
  Eigen::Vector3d stationarity = 2.0 * (mu - mu_nom);
  double res = 0.0;
  for (std::size_t i = 0; i < active.size(); ++i) {
    const auto& r = rows[static_cast<std::size_t>(active[i])];
    const double lam = multipliers[static_cast<Eigen::Index>(i)];
    stationarity -= lam * r.a;
    res = std::max(res, std::max(0.0, -lam));
    res = std::max(res, std::abs(lam * (r.a.dot(mu) + r.c)));
  }
  res = std::max(res, stationarity.lpNorm<Eigen::Infinity>());
  res = std::max(res, max_shortfall(rows, mu));
  return res;
}

}  // namespace detail

/// min ||mu - mu_nom||^2 s.t. a_i^T mu + c_i >= 0 and lo <= mu <= hi.
///
/// Exact for up to a handful of constraints. If the constraints are jointly
/// infeasible on the box, returns feasible=false and the point closest to
/// mu_nom among those minimising the largest certificate violation.
inline QpResult solve_qp(const Eigen::Vector3d& mu_nom, const std::vector<LinearConstraint>& constraints,
                         const InputBounds& bounds) {
  const auto rows = detail::stack_with_bounds(constraints, bounds);
  QpResult out;
  auto sol = detail::project(mu_nom, rows);
  if (sol.found) {
    out.feasible = true;
  } else {
    const int shifted = static_cast<int>(constraints.size());
    const double level = detail::least_violation_level(rows, shifted);
    auto relaxed = rows;
    if (std::isfinite(level)) {
      const double slack = level + 1e-9 * (1.0 + std::abs(level));
      for (int i = 0; i < shifted; ++i) relaxed[static_cast<std::size_t>(i)].c += slack;
    }
    sol = detail::project(mu_nom, relaxed);
    if (!sol.found) {
      // Box-only fallback; reachable only with non-finite certificate data.
      sol.mu = mu_nom.cwiseMax(bounds.lo).cwiseMin(bounds.hi);
      sol.objective = (sol.mu - mu_nom).squaredNorm();
    }
  }
  out.mu_safe = sol.mu;
  out.active_set = sol.active;
  out.objective = sol.objective;
  out.max_violation = detail::max_shortfall(rows, sol.mu);
  out.kkt_residual = out.feasible
                         ? detail::kkt_residual(sol.mu, mu_nom, rows, sol.active, sol.multipliers)
                         : out.max_violation;
  return out;
}

}  // namespace zonosafe
