#include <gtest/gtest.h>

#include "test_support.hpp"
#include "zonosafe/latent_model.hpp"

namespace zonosafe {
namespace {

using testing::random_matrix;
using testing::random_vector;

TEST(LatentDynamics, RecoversExactLinearSystem) {
  Rng rng(51);
  const Mat a = Mat::Identity(5, 5) + random_matrix(5, 5, rng, 0.1);
  const Mat b = random_matrix(5, 3, rng);
  const Mat z = random_matrix(5, 200, rng);
  const Mat mu = random_matrix(3, 200, rng);
  const LatentDynamics d = fit_latent_dynamics(z, mu, a * z + b * mu, 0.02);
  EXPECT_LT((d.A - a).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((d.B - b).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(dynamics_residuals(d, z, mu, a * z + b * mu).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_NO_THROW(d.validate());
}

TEST(LatentDynamics, ContinuousTimeGenerators) {
  LatentDynamics d{Mat::Identity(2, 2) * 1.1, Mat::Ones(2, 3), 0.02};
  EXPECT_NEAR(d.drift()(0, 0), 5.0, 1e-12);
  EXPECT_EQ(d.drift()(0, 1), 0.0);
  EXPECT_NEAR(d.input_matrix()(1, 2), 50.0, 1e-12);
}

TEST(LatentDynamics, FitErrors) {
  Rng rng(52);
  EXPECT_THROW(fit_latent_dynamics(random_matrix(4, 5, rng), random_matrix(3, 5, rng), random_matrix(4, 5, rng), 0.02),
               FitError);
  Mat z = random_matrix(4, 50, rng);
  z.row(3) = 2.0 * z.row(1);
  EXPECT_THROW(fit_latent_dynamics(z, random_matrix(3, 50, rng), random_matrix(4, 50, rng), 0.02), FitError);
  EXPECT_THROW(fit_latent_dynamics(z, random_matrix(3, 49, rng), random_matrix(4, 50, rng), 0.02),
               std::invalid_argument);
}

TEST(Quantile, LinearInterpolationBetweenOrderStatistics) {
  EXPECT_DOUBLE_EQ(quantile({4.0, 1.0, 3.0, 2.0}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({4.0, 1.0, 3.0, 2.0}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile({4.0, 1.0, 3.0, 2.0}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile({10.0}, 0.3), 10.0);
  // 201 points 0..200: position 0.995 * 200 = 199.
  std::vector<double> v(201);
  for (int i = 0; i <= 200; ++i) v[static_cast<std::size_t>(i)] = i;
  EXPECT_NEAR(quantile(v, 0.995), 199.0, 1e-12);
  EXPECT_NEAR(quantile(v, 0.9975), 199.5, 1e-12);
  EXPECT_THROW(quantile({}, 0.5), std::invalid_argument);
  EXPECT_THROW(quantile({1.0}, 1.5), std::invalid_argument);
}

TEST(ErrorBounds, DirectedNotAboveBoxOnGaussianResiduals) {
  Rng rng(53);
  for (int t = 0; t < 50; ++t) {
    Mat r = random_matrix(8, 2000, rng);
    // Correlated, anisotropic residuals.
    r = random_matrix(8, 8, rng, 0.3) * r;
    const BarrierHead h = BarrierHead::make(HeadKind::VerticalClearance, random_vector(8, rng), 0.0);
    const double dir = directed_bound(h, r);
    const double box = box_bound(h, r);
    EXPECT_LE(dir, box);
    EXPECT_GT(dir, 0.0);
  }
}

// Quantiles are not subadditive: per-dimension spikes on disjoint samples
// each sit below their own 99.5% quantile, while the projection sees all
// of them. The box bound is then not an upper bound on the directed one.
TEST(ErrorBounds, QuantilesAreNotSubadditive) {
  const int n = 1000;
  Mat r = Mat::Zero(2, n);
  for (int i = 0; i < 4; ++i) r(0, i) = 1.0;
  for (int i = 4; i < 8; ++i) r(1, i) = 1.0;
  Vec w(2);
  w << 1.0, 1.0;
  BarrierHead h;
  h.w = w;
  EXPECT_EQ(box_bound(h, r), 0.0);
  EXPECT_GT(directed_bound(h, r), 0.9);
}

TEST(ErrorBounds, AttachRejectsInvertedBounds) {
  Mat r = Mat::Zero(2, 1000);
  for (int i = 0; i < 4; ++i) r(0, i) = 1.0;
  for (int i = 4; i < 8; ++i) r(1, i) = 1.0;
  std::vector<BarrierHead> heads = {BarrierHead::make(HeadKind::LateralClearance, Vec::Ones(2), 0.0)};
  EXPECT_THROW(attach_error_bounds(heads, r), std::invalid_argument);
}

TEST(Probe, PerfectLinearTargetHasUnitCorrelation) {
  Rng rng(54);
  const Mat x = random_matrix(4, 300, rng);
  Vec w(4);
  w << 1.0, -2.0, 0.5, 0.0;
  const Vec t = (x.transpose() * w).array() + 3.0;
  const ProbeFit f = fit_linear_probe(x, t);
  EXPECT_LT((f.w - w).norm(), 1e-10);
  EXPECT_NEAR(f.b, 3.0, 1e-10);
  EXPECT_NEAR(f.correlation, 1.0, 1e-12);
}

TEST(Probe, NoisyTargetMatchesMonteCarloCorrelation) {
  // t = x0 + s * noise with unit-variance x0 and noise: R = 1 / sqrt(1 + s^2).
  Rng rng(55);
  const Mat x = random_matrix(1, 200000, rng);
  const Vec noise = random_vector(200000, rng);
  for (double s : {0.5, 1.0, 2.0}) {
    const Vec t = x.row(0).transpose() + s * noise;
    EXPECT_NEAR(fit_linear_probe(x, t).correlation, 1.0 / std::sqrt(1.0 + s * s), 5e-3);
  }
}

TEST(Probe, Pearson) {
  Vec a(4), b(4);
  a << 1, 2, 3, 4;
  b << 2, 4, 6, 8;
  EXPECT_NEAR(pearson(a, b), 1.0, 1e-15);
  EXPECT_NEAR(pearson(a, -b), -1.0, 1e-15);
  EXPECT_EQ(pearson(Vec::Ones(4), Vec::Ones(4)), 1.0);
  EXPECT_EQ(pearson(a, Vec::Ones(4)), 0.0);
}

TEST(Probe, FitHeadsOnePerKind) {
  Rng rng(56);
  const Mat z = random_matrix(3, 100, rng);
  Mat margins(100, 3);
  margins.col(0) = z.row(0).transpose();
  margins.col(1) = z.row(1).transpose();
  margins.col(2) = z.row(2).transpose();
  const auto fit = fit_heads(z, margins, {kAllHeads.begin(), kAllHeads.end()});
  ASSERT_EQ(fit.heads.size(), 3u);
  EXPECT_EQ(fit.heads[2].kind, HeadKind::SwingEnergy);
  EXPECT_NEAR(fit.heads[1].w[1], 1.0, 1e-10);
  EXPECT_NEAR(fit.heads[1].lipschitz, 1.0, 1e-10);
  EXPECT_THROW(fit_heads(z, Mat(100, 2), {kAllHeads.begin(), kAllHeads.end()}), std::invalid_argument);
}

TEST(Conjugacy, GapIsTheLargestOneStepMismatch) {
  // Identity encoder: the gap is the raw-state prediction error.
  const Mlp enc({Layer::dense(Mat::Identity(kStateDim, kStateDim), Vec::Zero(kStateDim))});
  Rng rng(57);
  LatentDynamics d{Mat::Identity(kStateDim, kStateDim) * 0.99, random_matrix(kStateDim, 3, rng, 0.1), 0.02};
  std::vector<TransitionSample> steps;
  for (int i = 0; i < 20; ++i) {
    TransitionSample s;
    s.x = PlantState::from_vector(random_vector(kStateDim, rng));
    s.u = random_vector(3, rng);
    s.x_next = PlantState::from_vector(d.predict(Vec(s.x.to_vector()), Vec(s.u)));
    steps.push_back(s);
  }
  Vec bump = Vec::Zero(kStateDim);
  bump[4] = 0.3;
  bump[12] = -0.4;
  steps[7].x_next = PlantState::from_vector(Vec(steps[7].x_next.to_vector()) + bump);
  const BarrierHead h = BarrierHead::make(HeadKind::VerticalClearance, Vec::Unit(kStateDim, 4) * 2.0, 0.0, 0.1, 0.2);
  const ConjugacyReport rep = conjugacy_error(enc, d, steps, {h});
  EXPECT_NEAR(rep.eps_conj, 0.5, 1e-12);
  EXPECT_EQ(rep.steps, 20u);
  ASSERT_EQ(rep.head_margins.size(), 1u);
  EXPECT_NEAR(rep.head_margins[0], 0.1 - 2.0 * 0.5, 1e-12);
}

}  // namespace
}  // namespace zonosafe
