#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "zonosafe/zonotope.hpp"

namespace zonosafe {

enum class HeadKind { VerticalClearance, LateralClearance, SwingEnergy };

inline constexpr std::array<HeadKind, 3> kAllHeads = {HeadKind::VerticalClearance, HeadKind::LateralClearance,
                                                      HeadKind::SwingEnergy};

inline std::string_view head_name(HeadKind k) {
  switch (k) {
    case HeadKind::VerticalClearance: return "h_z";
    case HeadKind::LateralClearance: return "h_y";
    case HeadKind::SwingEnergy: return "h_E";
  }
  return "?";
}

inline HeadKind head_from_name(std::string_view name) {
  for (auto k : kAllHeads) {
    if (head_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown certificate head '" + std::string(name) + "'");
}

/// Linear certificate h(z) = w^T z + b on the latent space.
///
/// The energy head is stored already folded, i.e. h_E(z) = w^T z + b with
/// w = -w_E and b = E_max - b_E, so every head is evaluated the same way.
struct BarrierHead {
  HeadKind kind = HeadKind::VerticalClearance;
  Vec w;
  double b = 0.0;
  double lipschitz = 0.0;  // ||w||
  double eps_dir = 0.0;    // directed dynamics-error bound
  double eps_box = 0.0;    // per-dimension box bound |w|^T eps_dyn

  static BarrierHead make(HeadKind kind, Vec w, double b, double eps_dir = 0.0, double eps_box = 0.0) {
    BarrierHead h{kind, std::move(w), b, 0.0, eps_dir, eps_box};
    h.lipschitz = h.w.norm();
    h.validate();
    return h;
  }

  std::string_view name() const { return head_name(kind); }

  void validate() const {
    if (!w.allFinite() || !std::isfinite(b)) throw std::invalid_argument("BarrierHead: non-finite parameters");
    if (std::abs(lipschitz - w.norm()) > 1e-12) throw std::invalid_argument("BarrierHead: lipschitz != ||w||");
    if (eps_dir < 0.0 || eps_box < 0.0) throw std::invalid_argument("BarrierHead: negative error bound");
    if (eps_dir > eps_box) {
      throw std::invalid_argument("BarrierHead " + std::string(name()) + ": directed bound exceeds box bound");
    }
  }
};

enum class EvalKind { Set, Point, PointMargin };

struct EvalMode {
  EvalKind kind = EvalKind::Set;
  double delta = 0.0;  // PointMargin only

  static EvalMode set() { return {EvalKind::Set, 0.0}; }
  static EvalMode point() { return {EvalKind::Point, 0.0}; }
  static EvalMode margin(double delta) {
    if (!(delta >= 0.0)) throw std::invalid_argument("EvalMode: margin delta must be >= 0");
    return {EvalKind::PointMargin, delta};
  }

  std::string_view name() const {
    switch (kind) {
      case EvalKind::Set: return "set";
      case EvalKind::Point: return "point";
      case EvalKind::PointMargin: return "margin";
    }
    return "?";
  }
};

inline EvalKind eval_kind_from_name(std::string_view s) {
  if (s == "set") return EvalKind::Set;
  if (s == "point") return EvalKind::Point;
  if (s == "margin") return EvalKind::PointMargin;
  throw std::invalid_argument("unknown evaluation mode '" + std::string(s) + "' (expected set|point|margin)");
}

inline double eval_point(const BarrierHead& head, const Vec& z) {
  detail::require_dim(head.w.size(), z.size(), "eval_point");
  return head.w.dot(z) + head.b;
}

inline double eval_set(const BarrierHead& head, const Zonotope& z) { return linear_min(head.w, head.b, z); }

inline double eval_margin(const BarrierHead& head, const Vec& z, double delta) { return eval_point(head, z) - delta; }

/// Gap between the center evaluation and the worst case over Z.
inline double spread(const BarrierHead& head, const Zonotope& z) { return support_radius(head.w, z); }

struct HeadReport {
  HeadKind kind{};
  double h_point = 0.0;
  double h_set = 0.0;
  double spread = 0.0;
  bool safe_point = false;
  bool safe_set = false;
  bool blind_spot = false;
};

struct CertReport {
  std::vector<HeadReport> heads;

  int blind_spots() const {
    int n = 0;
    for (const auto& h : heads) n += h.blind_spot ? 1 : 0;
    return n;
  }
};

inline HeadReport report_head(const BarrierHead& head, const Zonotope& z) {
  HeadReport r;
  r.kind = head.kind;
  r.h_point = eval_point(head, z.center());
  r.spread = spread(head, z);
  // Same arithmetic as linear_min, so h_set <= h_point holds bit-exactly.
  r.h_set = r.h_point - r.spread;
  r.safe_point = r.h_point >= 0.0;
  r.safe_set = r.h_set >= 0.0;
  r.blind_spot = r.safe_point && !r.safe_set;
  return r;
}

inline CertReport report(const std::vector<BarrierHead>& heads, const Zonotope& z) {
  CertReport out;
  out.heads.reserve(heads.size());
  for (const auto& h : heads) out.heads.push_back(report_head(h, z));
  return out;
}

}  // namespace zonosafe
