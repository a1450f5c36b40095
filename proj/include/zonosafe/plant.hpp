#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string_view>

#include <Eigen/Dense>

#include "zonosafe/certificates.hpp"
#include "zonosafe/mlp.hpp"

namespace zonosafe {

inline constexpr int kStateDim = 16;
inline constexpr int kInputDim = 3;

using StateVec = Eigen::Matrix<double, kStateDim, 1>;
using Accel = Eigen::Vector3d;

inline constexpr double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }

/// Quadrotor with a rod-suspended load. Vector order:
/// [px py pz vx vy vz phi theta psi wx wy wz alpha beta alpha_dot beta_dot].
struct PlantState {
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
  Eigen::Vector3d v = Eigen::Vector3d::Zero();
  Eigen::Vector3d euler = Eigen::Vector3d::Zero();  // roll, pitch, yaw
  Eigen::Vector3d omega = Eigen::Vector3d::Zero();
  double alpha = 0.0;  // polar angle from straight down
  double beta = 0.0;   // azimuth
  double alpha_dot = 0.0;
  double beta_dot = 0.0;

  StateVec to_vector() const {
    StateVec x;
    x << p, v, euler, omega, alpha, beta, alpha_dot, beta_dot;
    return x;
  }

  static PlantState from_vector(const Eigen::Ref<const Vec>& x) {
    if (x.size() != kStateDim) throw std::invalid_argument("PlantState: expected 16 entries");
    PlantState s;
    s.p = x.segment<3>(0);
    s.v = x.segment<3>(3);
    s.euler = x.segment<3>(6);
    s.omega = x.segment<3>(9);
    s.alpha = x[12];
    s.beta = x[13];
    s.alpha_dot = x[14];
    s.beta_dot = x[15];
    return s;
  }

  bool finite() const { return to_vector().allFinite(); }

  bool operator==(const PlantState& o) const { return to_vector() == o.to_vector(); }
};

inline constexpr std::array<std::string_view, kStateDim> kStateNames = {
    "px", "py", "pz", "vx", "vy", "vz", "phi", "theta", "psi",
    "wx", "wy", "wz", "alpha", "beta", "alpha_dot", "beta_dot"};

struct PlantParams {
  double m_quad = 1.0;
  double m_load = 0.3;
  double rod_length = 0.8;
  double gravity = 9.81;
  double dt = 0.02;
  double att_kp = 20.0;
  double att_kd = 6.0;
  double tilt_max = deg2rad(30.0);
  double mu_max = 6.0;
  double r_quad = 0.15;
  double r_load = 0.05;

  void validate() const {
    for (double v : {m_quad, m_load, rod_length, gravity, dt, att_kp, att_kd, tilt_max, mu_max, r_quad, r_load}) {
      if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("PlantParams: all parameters must be positive");
    }
  }
};

struct GateSpec {
  double x_plane = 10.0;
  double half_width = 0.6;
  double half_height = 0.6;
  double center_y = 0.0;
  double center_z = 2.0;

  void validate() const {
    if (!(half_width > 0.0 && half_height > 0.0)) throw std::invalid_argument("GateSpec: opening must be positive");
  }
};

inline Eigen::Vector3d rod_direction(double alpha, double beta) {
  return {std::sin(alpha) * std::cos(beta), std::sin(alpha) * std::sin(beta), -std::cos(alpha)};
}

inline Eigen::Vector3d load_position(const PlantState& s, const PlantParams& params) {
  return s.p + params.rod_length * rod_direction(s.alpha, s.beta);
}

inline Eigen::Vector3d load_velocity(const PlantState& s, const PlantParams& params) {
  const double sa = std::sin(s.alpha), ca = std::cos(s.alpha);
  const double sb = std::sin(s.beta), cb = std::cos(s.beta);
  const Eigen::Vector3d e_alpha(ca * cb, ca * sb, sa);
  const Eigen::Vector3d e_beta(-sb, cb, 0.0);
  return s.v + params.rod_length * (s.alpha_dot * e_alpha + sa * s.beta_dot * e_beta);
}

/// Swing energy of the load relative to the pivot (kinetic + potential).
inline double swing_energy(const PlantState& s, const PlantParams& params) {
  const double sa = std::sin(s.alpha);
  const double L = params.rod_length;
  return 0.5 * params.m_load * L * L * (s.alpha_dot * s.alpha_dot + sa * sa * s.beta_dot * s.beta_dot) +
         params.m_load * params.gravity * L * (1.0 - std::cos(s.alpha));
}

inline Accel clamp_accel(const Accel& mu, const PlantParams& params) {
  return mu.cwiseMax(-params.mu_max).cwiseMin(params.mu_max);
}

namespace detail {

inline constexpr double kAzimuthSingular = 1e-6;

/// Integration state: quad position, velocity, attitude, rates, then the rod
/// unit vector q (pivot to load) and its rate. Free of the azimuth chart.
using IntegrationVec = Eigen::Matrix<double, 18, 1>;

inline Eigen::Vector3d quad_acceleration(const IntegrationVec& x, const Accel& mu, const PlantParams& prm) {
  const double g = prm.gravity;
  const double phi = x[6], theta = x[7], psi = x[8];
  const double cphi = std::cos(phi), sphi = std::sin(phi);
  const double cth = std::cos(theta), sth = std::sin(theta);
  const double cpsi = std::cos(psi), spsi = std::sin(psi);
  // Thrust per unit mass chosen so the vertical acceleration tracks mu_z.
  const double thrust = (g + mu.z()) / (cphi * cth);
  const Eigen::Vector3d body_z(cpsi * sth * cphi + spsi * sphi, spsi * sth * cphi - cpsi * sphi, cth * cphi);
  return thrust * body_z - Eigen::Vector3d(0.0, 0.0, g);
}

/// Time derivative under a held (already clamped) command.
inline IntegrationVec plant_derivative(const IntegrationVec& x, const Accel& mu, const PlantParams& prm) {
  const double g = prm.gravity;
  const double phi_des = std::clamp(-mu.y() / g, -prm.tilt_max, prm.tilt_max);
  const double theta_des = std::clamp(mu.x() / g, -prm.tilt_max, prm.tilt_max);
  const Eigen::Vector3d euler_des(phi_des, theta_des, 0.0);
  const Eigen::Vector3d accel = quad_acceleration(x, mu, prm);

  IntegrationVec dx;
  dx.segment<3>(0) = x.segment<3>(3);
  dx.segment<3>(3) = accel;
  dx.segment<3>(6) = x.segment<3>(9);
  dx.segment<3>(9) = prm.att_kp * (euler_des - x.segment<3>(6)) - prm.att_kd * x.segment<3>(9);

  // Moving-pivot rod: q'' = (I - q q^T)(g_vec - a_pivot) / L - |q'|^2 q.
  const Eigen::Vector3d q = x.segment<3>(12);
  const Eigen::Vector3d qd = x.segment<3>(15);
  const Eigen::Vector3d force = (Eigen::Vector3d(0.0, 0.0, -g) - accel) / prm.rod_length;
  dx.segment<3>(12) = qd;
  dx.segment<3>(15) = force - q * q.dot(force) - qd.squaredNorm() * q;
  return dx;
}

inline IntegrationVec to_integration(const PlantState& s) {
  const double sa = std::sin(s.alpha), ca = std::cos(s.alpha);
  const double sb = std::sin(s.beta), cb = std::cos(s.beta);
  const Eigen::Vector3d e_alpha(ca * cb, ca * sb, sa);
  const Eigen::Vector3d e_beta(-sb, cb, 0.0);
  IntegrationVec x;
  x << s.p, s.v, s.euler, s.omega, Eigen::Vector3d(sa * cb, sa * sb, -ca),
      s.alpha_dot * e_alpha + sa * s.beta_dot * e_beta;
  return x;
}

/// Back to polar/azimuth coordinates. beta stays continuous with the
/// previous value; near the pole it is frozen and beta_dot set to zero.
inline PlantState from_integration(const IntegrationVec& x, double beta_prev) {
  PlantState s;
  s.p = x.segment<3>(0);
  s.v = x.segment<3>(3);
  s.euler = x.segment<3>(6);
  s.omega = x.segment<3>(9);
  Eigen::Vector3d q = x.segment<3>(12);
  q.normalize();
  Eigen::Vector3d qd = x.segment<3>(15);
  qd -= q * q.dot(qd);
  const double horiz = std::hypot(q.x(), q.y());
  s.alpha = std::atan2(horiz, -q.z());
  const double sa = std::sin(s.alpha), ca = std::cos(s.alpha);
  if (sa < kAzimuthSingular) {
    s.beta = beta_prev;
  } else {
    const double raw = std::atan2(q.y(), q.x());
    s.beta = beta_prev + std::remainder(raw - beta_prev, 2.0 * std::numbers::pi);
  }
  const double sb = std::sin(s.beta), cb = std::cos(s.beta);
  s.alpha_dot = qd.dot(Eigen::Vector3d(ca * cb, ca * sb, sa));
  s.beta_dot = sa < kAzimuthSingular ? 0.0 : qd.dot(Eigen::Vector3d(-sb, cb, 0.0)) / sa;
  return s;
}

}  // namespace detail

/// One RK4 step of length params.dt under the command mu (clamped per axis).
/// The rod is integrated as a unit vector and converted back afterwards.
inline PlantState step(const PlantState& s, const Accel& mu, const PlantParams& params) {
  if (!mu.allFinite()) throw std::invalid_argument("plant step: non-finite command");
  const Accel u = clamp_accel(mu, params);
  const detail::IntegrationVec x = detail::to_integration(s);
  const double h = params.dt;
  const auto k1 = detail::plant_derivative(x, u, params);
  const auto k2 = detail::plant_derivative(x + 0.5 * h * k1, u, params);
  const auto k3 = detail::plant_derivative(x + 0.5 * h * k2, u, params);
  const auto k4 = detail::plant_derivative(x + h * k3, u, params);
  const detail::IntegrationVec next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  return detail::from_integration(next, s.beta);
}

enum class Body { Quad, Load };
enum class Axis { Y, Z };
enum class GateEvent { NotAtGate, Passed, Collision };

inline std::string_view body_name(Body b) { return b == Body::Quad ? "quad" : "load"; }
inline std::string_view axis_name(Axis a) { return a == Axis::Y ? "y" : "z"; }

struct GateCheck {
  GateEvent event = GateEvent::NotAtGate;
  Body body = Body::Quad;  // Collision only
  Axis axis = Axis::Z;     // Collision only
  bool quad_crossed = false;
  bool load_crossed = false;
};

namespace detail {

struct CrossingResult {
  bool crossed = false;
  bool collided = false;
  Axis axis = Axis::Z;
  double excess = 0.0;
};

inline CrossingResult check_body_crossing(const Eigen::Vector3d& a, const Eigen::Vector3d& b, double radius,
                                          const GateSpec& gate) {
  CrossingResult r;
  const double da = a.x() - gate.x_plane;
  const double db = b.x() - gate.x_plane;
  if (!((da < 0.0 && db >= 0.0) || (da > 0.0 && db <= 0.0))) return r;
  r.crossed = true;
  const double frac = da / (da - db);
  const Eigen::Vector3d hit = a + frac * (b - a);
  const double ey = std::abs(hit.y() - gate.center_y) - (gate.half_width - radius);
  const double ez = std::abs(hit.z() - gate.center_z) - (gate.half_height - radius);
  if (ey > 0.0 || ez > 0.0) {
    r.collided = true;
    r.axis = ez >= ey ? Axis::Z : Axis::Y;
    r.excess = std::max(ey, ez);
  }
  return r;
}

}  // namespace detail

/// Checks whether either body crossed the gate plane between two states and,
/// if so, whether the interpolated crossing point clears the frame.
inline GateCheck gate_crossing_check(const PlantState& prev, const PlantState& next, const GateSpec& gate,
                                     const PlantParams& params) {
  const auto quad = detail::check_body_crossing(prev.p, next.p, params.r_quad, gate);
  const auto load =
      detail::check_body_crossing(load_position(prev, params), load_position(next, params), params.r_load, gate);
  GateCheck out;
  out.quad_crossed = quad.crossed;
  out.load_crossed = load.crossed;
  if (quad.collided || load.collided) {
    const bool quad_worse = quad.collided && (!load.collided || quad.excess >= load.excess);
    out.event = GateEvent::Collision;
    out.body = quad_worse ? Body::Quad : Body::Load;
    out.axis = quad_worse ? quad.axis : load.axis;
  } else if (quad.crossed || load.crossed) {
    out.event = GateEvent::Passed;
  }
  return out;
}

/// Central-difference input sensitivity of a certificate through a
/// one-step transition: d/dmu_k of cert(step(state, mu0 +- delta e_k)),
/// divided by dt to give a rate.
template <typename State, typename StepFn, typename CertFn>
Eigen::Vector3d finite_difference_lie_g(const State& s, const Accel& mu0, double delta, double dt, StepFn&& step_fn,
                                        CertFn&& cert) {
  Eigen::Vector3d out;
  for (int k = 0; k < 3; ++k) {
    Accel up = mu0, down = mu0;
    up[k] += delta;
    down[k] -= delta;
    out[k] = (cert(step_fn(s, up)) - cert(step_fn(s, down))) / (2.0 * delta * dt);
  }
  return out;
}

/// L_g of h(E(x)) on the plant. The expansion point is pulled inside the
/// saturation limits so both probes see the unclamped dynamics.
inline Eigen::Vector3d lie_g_fd(const PlantState& s, const BarrierHead& head, const Mlp& encoder,
                                const PlantParams& params, double delta, const Accel& mu0 = Accel::Zero()) {
  const double lim = params.mu_max - delta;
  const Accel center = mu0.cwiseMax(-lim).cwiseMin(lim);
  return finite_difference_lie_g(
      s, center, delta, params.dt, [&](const PlantState& x, const Accel& mu) { return step(x, mu, params); },
      [&](const PlantState& x) { return eval_point(head, forward_point(encoder, Vec(x.to_vector()))); });
}

}  // namespace zonosafe
