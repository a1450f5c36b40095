#include <gtest/gtest.h>

#include <numbers>

#include "test_support.hpp"
#include "zonosafe/plant.hpp"

namespace zonosafe {
namespace {

PlantState hover_state() {
  PlantState s;
  s.p = {1.0, -0.5, 2.0};
  return s;
}

PlantParams with_dt(PlantParams p, double dt) {
  p.dt = dt;
  return p;
}

TEST(Plant, HoverIsAFixedPoint) {
  const PlantParams prm;
  PlantState s = hover_state();
  const PlantState start = s;
  for (int k = 0; k < 500; ++k) {
    const PlantState next = step(s, Accel::Zero(), prm);
    EXPECT_LT((next.to_vector() - s.to_vector()).cwiseAbs().maxCoeff(), 1e-9);
    s = next;
  }
  EXPECT_LT((s.to_vector() - start.to_vector()).norm(), 1e-9);
}

TEST(Plant, VectorRoundTrip) {
  Rng rng(31);
  const Vec x = testing::random_vector(kStateDim, rng);
  EXPECT_EQ(Vec(PlantState::from_vector(x).to_vector()), x);
  EXPECT_THROW(PlantState::from_vector(Vec::Zero(15)), std::invalid_argument);
}

TEST(Plant, IntegrationChartRoundTrip) {
  Rng rng(32);
  for (int t = 0; t < 200; ++t) {
    PlantState s = PlantState::from_vector(testing::random_vector(kStateDim, rng));
    s.alpha = rng.uniform(0.05, 3.0);
    s.beta = rng.uniform(-3.0, 3.0);
    const PlantState back = detail::from_integration(detail::to_integration(s), s.beta);
    EXPECT_LT((back.to_vector() - s.to_vector()).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Plant, AzimuthFrozenAtThePole) {
  PlantState s = hover_state();
  s.beta = 0.7;
  s.beta_dot = 3.0;
  const PlantState next = step(s, Accel::Zero(), PlantParams{});
  EXPECT_EQ(next.beta, 0.7);
  EXPECT_EQ(next.beta_dot, 0.0);
  EXPECT_TRUE(next.finite());
}

TEST(Plant, RejectsNonFiniteCommand) {
  EXPECT_THROW(step(hover_state(), Accel(std::nan(""), 0.0, 0.0), PlantParams{}), std::invalid_argument);
}

TEST(Plant, CommandsAreClamped) {
  const PlantParams prm;
  const Accel big(100.0, -100.0, 100.0);
  const PlantState a = step(hover_state(), big, prm);
  const PlantState b = step(hover_state(), Accel(prm.mu_max, -prm.mu_max, prm.mu_max), prm);
  EXPECT_EQ(a, b);
}

TEST(Plant, FreePendulumConservesEnergy) {
  const PlantParams prm;
  PlantState s = hover_state();
  s.alpha = deg2rad(30.0);
  s.beta = 0.4;
  s.beta_dot = 1.5;
  const double e0 = swing_energy(s, prm);
  double worst = 0.0;
  for (int k = 0; k < 500; ++k) {  // 10 s
    s = step(s, Accel::Zero(), prm);
    worst = std::max(worst, std::abs(swing_energy(s, prm) - e0) / e0);
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Plant, SmallAngleFrequency) {
  const PlantParams prm;
  PlantState s = hover_state();
  s.alpha = 0.01;
  const PlantParams fine = with_dt(prm, 0.001);
  // Signed planar angle alpha*cos(beta); time its upward zero crossings.
  std::vector<double> crossings;
  double prev = s.alpha * std::cos(s.beta);
  for (int k = 1; k <= 20000; ++k) {
    s = step(s, Accel::Zero(), fine);
    const double cur = s.alpha * std::cos(s.beta);
    if (prev < 0.0 && cur >= 0.0) crossings.push_back((k - 1 + prev / (prev - cur)) * fine.dt);
    prev = cur;
  }
  ASSERT_GE(crossings.size(), 3u);
  const double period = (crossings.back() - crossings.front()) / static_cast<double>(crossings.size() - 1);
  const double omega = 2.0 * std::numbers::pi / period;
  const double expected = std::sqrt(prm.gravity / prm.rod_length);
  EXPECT_NEAR(expected, 3.502, 1e-3);
  EXPECT_LT(std::abs(omega - expected) / expected, 0.01);
}

TEST(Plant, LoadVelocityMatchesPositionDerivative) {
  const PlantParams prm;
  PlantState s = hover_state();
  s.v = {2.0, 0.3, -0.1};
  s.alpha = 0.6;
  s.beta = 1.1;
  s.alpha_dot = 0.8;
  s.beta_dot = -1.2;
  const PlantParams fine = with_dt(prm, 1e-5);
  const PlantState fwd = step(s, Accel(1.0, 0.5, 0.0), fine);
  const Eigen::Vector3d fd = (load_position(fwd, prm) - load_position(s, prm)) / fine.dt;
  EXPECT_LT((fd - load_velocity(s, prm)).norm(), 1e-3);
}

// RK4 on a smooth forced trajectory: successive differences at dt, dt/2,
// dt/4 shrink by about 2^4.
TEST(Plant, RichardsonRatioShowsFourthOrder) {
  const PlantParams prm;
  PlantState s0 = hover_state();
  s0.v = {1.5, 0.0, 0.0};
  s0.alpha = 0.4;
  s0.beta = 0.3;
  s0.alpha_dot = 0.5;
  auto integrate = [&](int refine) {
    const PlantParams p = with_dt(prm, prm.dt / refine);
    PlantState s = s0;
    for (int k = 0; k < 50 * refine; ++k) s = step(s, Accel(1.0, -0.8, 0.5), p);
    return Vec(s.to_vector());
  };
  const Vec a = integrate(1), b = integrate(2), c = integrate(4);
  const double ratio = (a - b).norm() / (b - c).norm();
  EXPECT_GT(ratio, 12.0);
  EXPECT_LT(ratio, 20.0);
}

TEST(Plant, ParamsAndGateValidate) {
  PlantParams p;
  p.rod_length = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  GateSpec g;
  g.half_width = -1.0;
  EXPECT_THROW(g.validate(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Gate crossing against a refined oracle: integrate at dt/100 and test the
// sub-step positions nearest the plane.

struct OracleVerdict {
  bool crossed = false;
  bool collided = false;
};

OracleVerdict refined_gate_oracle(const PlantState& s, const Accel& mu, const PlantParams& prm, const GateSpec& gate) {
  const PlantParams fine = with_dt(prm, prm.dt / 100.0);
  PlantState cur = s;
  OracleVerdict v;
  for (int k = 0; k < 100; ++k) {
    const PlantState next = step(cur, mu, fine);
    const GateCheck c = gate_crossing_check(cur, next, gate, prm);
    v.crossed |= c.quad_crossed || c.load_crossed;
    v.collided |= c.event == GateEvent::Collision;
    cur = next;
  }
  return v;
}

double clearance_at_plane(const PlantState& s, const PlantParams& prm, const GateSpec& gate) {
  const Eigen::Vector3d load = load_position(s, prm);
  return std::min({gate.half_width - prm.r_quad - std::abs(s.p.y() - gate.center_y),
                   gate.half_height - prm.r_quad - std::abs(s.p.z() - gate.center_z),
                   gate.half_width - prm.r_load - std::abs(load.y() - gate.center_y),
                   gate.half_height - prm.r_load - std::abs(load.z() - gate.center_z)});
}

TEST(GateCheck, AgreesWithRefinedIntegrationOracle) {
  const PlantParams prm;
  const GateSpec gate;
  Rng rng(33);
  int checked = 0, collisions = 0, passes = 0;
  for (int t = 0; t < 3000; ++t) {
    PlantState s;
    s.v = {rng.uniform(1.0, 4.0), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    s.alpha = rng.uniform(0.0, 0.6);
    s.beta = rng.uniform(-3.0, 3.0);
    s.alpha_dot = rng.uniform(-1.0, 1.0);
    s.p = {gate.x_plane - rng.uniform(0.0, 1.0) * s.v.x() * prm.dt, rng.uniform(-0.8, 0.8),
           gate.center_z + 0.4 + rng.uniform(-0.8, 0.8)};
    const Accel mu(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
    const PlantState next = step(s, mu, prm);
    const GateCheck coarse = gate_crossing_check(s, next, gate, prm);
    if (!(coarse.quad_crossed || coarse.load_crossed)) continue;
    // Skip grazing cases where interpolation error could flip the verdict.
    if (std::abs(clearance_at_plane(s, prm, gate)) < 0.05 || std::abs(clearance_at_plane(next, prm, gate)) < 0.05)
      continue;
    const OracleVerdict fine = refined_gate_oracle(s, mu, prm, gate);
    EXPECT_TRUE(fine.crossed);
    EXPECT_EQ(coarse.event == GateEvent::Collision, fine.collided) << "trial " << t;
    ++checked;
    collisions += fine.collided;
    passes += !fine.collided;
  }
  EXPECT_GT(checked, 200);
  EXPECT_GT(collisions, 20);
  EXPECT_GT(passes, 20);
}

TEST(GateCheck, ReportsBodyAndAxis) {
  const PlantParams prm;
  const GateSpec gate;
  PlantState a;
  a.p = {gate.x_plane - 0.01, 0.0, gate.center_z + 0.5};  // load hangs at z + 0.5 - 0.8
  PlantState b = a;
  b.p.x() = gate.x_plane + 0.01;
  GateCheck c = gate_crossing_check(a, b, gate, prm);
  EXPECT_EQ(c.event, GateEvent::Collision);
  EXPECT_EQ(c.body, Body::Quad);
  EXPECT_EQ(c.axis, Axis::Z);

  a.p.z() = gate.center_z + 0.35;  // quad clears, load at -0.45 clears (-0.55 limit)
  b.p.z() = a.p.z();
  c = gate_crossing_check(a, b, gate, prm);
  EXPECT_EQ(c.event, GateEvent::Passed);
  EXPECT_TRUE(c.quad_crossed);

  a.p.z() = gate.center_z + 0.2;  // load at -0.6 hits the bottom bar
  b.p.z() = a.p.z();
  c = gate_crossing_check(a, b, gate, prm);
  EXPECT_EQ(c.event, GateEvent::Collision);
  EXPECT_EQ(c.body, Body::Load);
  EXPECT_EQ(c.axis, Axis::Z);

  a.p.z() = gate.center_z + 0.35;
  a.p.y() = b.p.y() = 0.5;
  c = gate_crossing_check(a, b, gate, prm);
  EXPECT_EQ(c.event, GateEvent::Collision);
  EXPECT_EQ(c.axis, Axis::Y);
}

TEST(GateCheck, NoEventAwayFromThePlane) {
  PlantState a, b;
  a.p = {2.0, 0.0, 2.0};
  b.p = {2.05, 0.0, 2.0};
  const GateCheck c = gate_crossing_check(a, b, GateSpec{}, PlantParams{});
  EXPECT_EQ(c.event, GateEvent::NotAtGate);
  EXPECT_FALSE(c.quad_crossed || c.load_crossed);
}

}  // namespace
}  // namespace zonosafe
