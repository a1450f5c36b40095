#include <gtest/gtest.h>

#include "model_fixture.hpp"
#include "zonosafe/controller.hpp"

namespace zonosafe {
namespace {

using testing::random_beta;
using testing::random_vector;
using testing::tiny_model;

PlantState approach_state() {
  PlantState s;
  s.p = {8.5, 0.1, 2.3};
  s.v = {2.0, 0.0, 0.1};
  s.alpha = 0.2;
  s.beta = 0.5;
  return s;
}

TEST(Budget, StandardHalfWidths) {
  const UncertaintyBudget b = UncertaintyBudget::standard();
  EXPECT_EQ(b.eps[0], 0.05);
  EXPECT_EQ(b.eps[5], 0.05);
  EXPECT_EQ(b.eps[6], 0.02);
  EXPECT_EQ(b.eps[15], 0.02);
  UncertaintyBudget bad;
  bad.eps[3] = -1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Budget, StateZonotopeIsTheBox) {
  const PlantState s = approach_state();
  const Zonotope z = build_state_zonotope(s, UncertaintyBudget::standard());
  EXPECT_EQ(z.order(), kStateDim);
  EXPECT_EQ(z.center(), Vec(s.to_vector()));
  EXPECT_EQ(build_state_zonotope(s, UncertaintyBudget::zero()).order(), 0);
}

TEST(CbfTerms, SplitMinimaMatchSampledWorstCase) {
  const LatentSafetyModel m = tiny_model(61);
  Rng rng(62);
  const Zonotope latent = forward_set(m.encoder, build_state_zonotope(approach_state(), UncertaintyBudget::standard()));
  const Mat drift = m.dynamics.drift();
  for (const auto& h : m.heads) {
    const CbfTerms t = cbf_terms(latent, h, drift);
    const double joint = joint_cbf_term(latent, h, drift, 2.0);
    // Jointly minimising can only do better than adding separate minima.
    EXPECT_GE(joint, t.lf_min + 2.0 * t.h_min - 1e-12);
    double h_lo = 1e300, lf_lo = 1e300, joint_lo = 1e300;
    for (int s = 0; s < 5000; ++s) {
      const Vec z = latent.at(random_beta(latent.order(), rng));
      const double hv = eval_point(h, z);
      const double lf = (drift.transpose() * h.w).dot(z);
      h_lo = std::min(h_lo, hv);
      lf_lo = std::min(lf_lo, lf);
      joint_lo = std::min(joint_lo, lf + 2.0 * hv);
    }
    EXPECT_LE(t.h_min, h_lo + 1e-12);
    EXPECT_LE(t.lf_min, lf_lo + 1e-12);
    EXPECT_LE(joint, joint_lo + 1e-12);
  }
}

TEST(Nominal, WaypointAndSaturation) {
  const GateSpec gate;
  const PlantParams prm;
  const NominalConfig cfg;
  const Eigen::Vector3d wp = gate_waypoint(gate, prm, cfg);
  EXPECT_DOUBLE_EQ(wp.x(), gate.x_plane + cfg.beyond_gate);
  // Quad top and load bottom clear the frame equally with the rod hanging.
  const double top_gap = gate.center_z + gate.half_height - (wp.z() + prm.r_quad);
  const double bottom_gap = (wp.z() - prm.rod_length - prm.r_load) - (gate.center_z - gate.half_height);
  EXPECT_NEAR(top_gap, bottom_gap, 1e-12);

  PlantState far;
  far.p = {-50.0, 30.0, -20.0};
  const Accel a = nominal_input(far, wp, cfg, prm.mu_max);
  EXPECT_LE(a.cwiseAbs().maxCoeff(), prm.mu_max);
  PlantState at;
  at.p = wp;
  EXPECT_EQ(nominal_input(at, wp, cfg, prm.mu_max), Accel::Zero());
}

TEST(SafeInput, ZeroBudgetMakesSetAndPointIdentical) {
  const LatentSafetyModel m = tiny_model(63);
  const PlantParams prm;
  CbfConfig set_cfg, point_cfg;
  point_cfg.mode = EvalMode::point();
  const Accel nom(1.0, -0.5, 0.3);
  const auto a = safe_input(approach_state(), nom, m, set_cfg, UncertaintyBudget::zero(), prm);
  const auto b = safe_input(approach_state(), nom, m, point_cfg, UncertaintyBudget::zero(), prm);
  EXPECT_EQ(a.qp.mu_safe, b.qp.mu_safe);
  for (std::size_t i = 0; i < a.constraints.size(); ++i) {
    EXPECT_EQ(a.constraints[i].c, b.constraints[i].c);
    EXPECT_EQ(a.constraints[i].a, b.constraints[i].a);
  }
}

TEST(SafeInput, SetConstraintIsNeverLooserThanPoint) {
  const PlantParams prm;
  Rng rng(64);
  for (int t = 0; t < 20; ++t) {
    const LatentSafetyModel m = tiny_model(100 + static_cast<std::uint64_t>(t));
    PlantState s = approach_state();
    s.p += random_vector(3, rng, 0.3);
    s.alpha = rng.uniform(0.0, 0.6);
    const Accel nom = random_vector(3, rng);
    for (bool joint : {false, true}) {
      CbfConfig set_cfg, point_cfg;
      set_cfg.joint_form = point_cfg.joint_form = joint;
      point_cfg.mode = EvalMode::point();
      const auto a = safe_input(s, nom, m, set_cfg, UncertaintyBudget::standard(), prm);
      const auto b = safe_input(s, nom, m, point_cfg, UncertaintyBudget::standard(), prm);
      for (std::size_t i = 0; i < a.constraints.size(); ++i) {
        EXPECT_LE(a.constraints[i].c, b.constraints[i].c + 1e-12);
        EXPECT_LE(a.h_used[i], b.h_used[i]);
      }
    }
  }
}

TEST(SafeInput, MarginModeShiftsByAlphaDelta) {
  const LatentSafetyModel m = tiny_model(65);
  const PlantParams prm;
  CbfConfig point_cfg, margin_cfg;
  point_cfg.mode = EvalMode::point();
  margin_cfg.mode = EvalMode::margin(0.1);
  const Accel nom(0.2, 0.1, 0.0);
  const auto a = safe_input(approach_state(), nom, m, point_cfg, UncertaintyBudget::standard(), prm);
  const auto b = safe_input(approach_state(), nom, m, margin_cfg, UncertaintyBudget::standard(), prm);
  for (std::size_t i = 0; i < a.constraints.size(); ++i) {
    EXPECT_NEAR(a.constraints[i].c - b.constraints[i].c, point_cfg.alpha * 0.1, 1e-12);
    EXPECT_NEAR(a.h_used[i] - b.h_used[i], 0.1, 1e-12);
  }
}

TEST(SafeInput, LearnedLgIsBTransposeW) {
  const LatentSafetyModel m = tiny_model(66);
  CbfConfig cfg;
  cfg.lg_source = LgSource::LearnedB;
  const auto r = safe_input(approach_state(), Accel::Zero(), m, cfg, UncertaintyBudget::standard(), PlantParams{});
  for (std::size_t i = 0; i < m.heads.size(); ++i) {
    const Eigen::Vector3d expected = m.dynamics.input_matrix().transpose() * m.heads[i].w;
    EXPECT_LT((r.constraints[i].a - expected).norm(), 1e-12);
  }
}

TEST(SafeInput, SatisfiedConstraintsLeaveNominalUntouched) {
  LatentSafetyModel m = tiny_model(67);
  for (auto& h : m.heads) h.b += 1e3;  // deep inside the safe set
  const Accel nom(0.7, -0.3, 0.4);
  const auto r = safe_input(approach_state(), nom, m, CbfConfig{}, UncertaintyBudget::standard(), PlantParams{});
  EXPECT_TRUE(r.qp.feasible);
  EXPECT_EQ(r.qp.mu_safe, nom);
  EXPECT_EQ(r.report.blind_spots(), 0);
  EXPECT_GE(r.set_forward_ms, 0.0);
}

TEST(LieG, FiniteDifferenceOnVerticalVelocity) {
  // h = v_z through an identity encoder: the vertical channel tracks mu_z
  // exactly, so L_g h = (., ., 1).
  const Mlp enc({Layer::dense(Mat::Identity(kStateDim, kStateDim), Vec::Zero(kStateDim))});
  const BarrierHead h = BarrierHead::make(HeadKind::VerticalClearance, Vec::Unit(kStateDim, 5), 0.0);
  const PlantParams prm;
  const Eigen::Vector3d lg = lie_g_fd(approach_state(), h, enc, prm, 1e-3);
  EXPECT_NEAR(lg.z(), 1.0, 1e-6);
  EXPECT_NEAR(lg.y(), 0.0, 1e-6);
}

TEST(LieG, ExpansionPointPulledInsideSaturation) {
  const Mlp enc({Layer::dense(Mat::Identity(kStateDim, kStateDim), Vec::Zero(kStateDim))});
  const BarrierHead h = BarrierHead::make(HeadKind::VerticalClearance, Vec::Unit(kStateDim, 5), 0.0);
  const PlantParams prm;
  const Eigen::Vector3d lg = lie_g_fd(approach_state(), h, enc, prm, 1e-3, Accel(0.0, 0.0, prm.mu_max));
  EXPECT_NEAR(lg.z(), 1.0, 1e-6);
}

TEST(CbfConfig, Validates) {
  CbfConfig c;
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.alpha = 1.0;
  c.fd_delta = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace zonosafe
