#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <algorithm>
#include <limits>
#include <string>

#include <unistd.h>

#include <Eigen/Dense>

#include "zonosafe/random.hpp"
#include "zonosafe/zonotope.hpp"

namespace zonosafe::testing {

inline Mat random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

inline Vec random_vector(Eigen::Index n, Rng& rng, double scale = 1.0) { return random_matrix(n, 1, rng, scale); }

inline Zonotope random_zonotope(Eigen::Index n, Eigen::Index q, Rng& rng, double gen_scale = 1.0) {
  return Zonotope(random_vector(n, rng), random_matrix(n, q, rng, gen_scale));
}

inline Vec random_unit(Eigen::Index n, Rng& rng) {
  Vec v = random_vector(n, rng);
  return v / v.norm();
}

/// Uniform point of the coefficient cube, with a fraction of coordinates
/// pushed to the faces so vertices and edges get exercised.
inline Vec random_beta(Eigen::Index q, Rng& rng) {
  Vec b(q);
  for (Eigen::Index j = 0; j < q; ++j) {
    const double u = rng.uniform();
    b[j] = u < 0.2 ? -1.0 : (u > 0.8 ? 1.0 : rng.uniform(-1.0, 1.0));
  }
  return b;
}

/// Min of w.x + b over all 2^q vertices.
inline double vertex_min(const Vec& w, double b, const Zonotope& z) {
  const Eigen::Index q = z.order();
  double best = std::numeric_limits<double>::infinity();
  Vec beta(q);
  for (unsigned long mask = 0; mask < (1ul << q); ++mask) {
    for (Eigen::Index j = 0; j < q; ++j) beta[j] = (mask >> j) & 1u ? 1.0 : -1.0;
    best = std::min(best, w.dot(z.at(beta)) + b);
  }
  return best;
}

/// Central-difference derivative of a scalar function of one variable.
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("zonosafe_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace zonosafe::testing
