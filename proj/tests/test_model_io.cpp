#include <gtest/gtest.h>

#include <fstream>

#include "model_fixture.hpp"
#include "zonosafe/model.hpp"

namespace zonosafe {
namespace {

void expect_same_mlp(const Mlp& a, const Mlp& b) {
  ASSERT_EQ(a.layers().size(), b.layers().size());
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    EXPECT_EQ(a.layers()[i].kind, b.layers()[i].kind);
    EXPECT_EQ(a.layers()[i].weight, b.layers()[i].weight);
    EXPECT_EQ(a.layers()[i].bias, b.layers()[i].bias);
  }
}

LatentSafetyModel full_fixture() {
  LatentSafetyModel m = testing::tiny_model(91);
  m.conjugacy.eps_conj = 0.123456789012345;
  m.conjugacy.steps = 17;
  m.conjugacy.head_margins = {-0.1, 0.2, 1e-300};
  m.teacher.W = Mat::Ones(6, 6) / 3.0;
  m.teacher.b = Vec::LinSpaced(6, -1.0, 1.0);
  return m;
}

TEST(ModelIo, RoundTripIsExact) {
  const LatentSafetyModel m = full_fixture();
  testing::ScratchDir dir("model");
  const std::string p = (dir.path() / "m.json").string();
  save_model(m, p);
  const LatentSafetyModel b = load_model(p);
  expect_same_mlp(m.encoder, b.encoder);
  expect_same_mlp(m.decoder, b.decoder);
  EXPECT_EQ(m.dynamics.A, b.dynamics.A);
  EXPECT_EQ(m.dynamics.B, b.dynamics.B);
  EXPECT_EQ(m.dynamics.dt, b.dynamics.dt);
  EXPECT_EQ(m.teacher.W, b.teacher.W);
  EXPECT_EQ(m.teacher.b, b.teacher.b);
  ASSERT_EQ(b.heads.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(m.heads[i].kind, b.heads[i].kind);
    EXPECT_EQ(m.heads[i].w, b.heads[i].w);
    EXPECT_EQ(m.heads[i].b, b.heads[i].b);
    EXPECT_EQ(m.heads[i].eps_dir, b.heads[i].eps_dir);
    EXPECT_EQ(m.heads[i].eps_box, b.heads[i].eps_box);
  }
  EXPECT_EQ(m.head_correlation, b.head_correlation);
  EXPECT_EQ(m.head_targets, b.head_targets);
  EXPECT_EQ(m.conjugacy.eps_conj, b.conjugacy.eps_conj);
  EXPECT_EQ(m.conjugacy.steps, b.conjugacy.steps);
  EXPECT_EQ(m.conjugacy.head_margins, b.conjugacy.head_margins);
  EXPECT_EQ(m.margin_delta, b.margin_delta);
  EXPECT_EQ(m.metadata, b.metadata);

  // Saving the loaded model reproduces the file byte for byte.
  const std::string q = (dir.path() / "n.json").string();
  save_model(b, q);
  std::ifstream fa(p), fb(q);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(sa, sb);
}

TEST(ModelIo, LoadedModelBehavesIdentically) {
  const LatentSafetyModel m = full_fixture();
  const LatentSafetyModel b = model_from_json(model_to_json(m));
  Rng rng(92);
  for (int i = 0; i < 20; ++i) {
    const Vec x = testing::random_vector(16, rng);
    EXPECT_EQ(forward_point(m.encoder, x), forward_point(b.encoder, x));
  }
}

TEST(ModelIo, RejectsBadDocuments) {
  testing::ScratchDir dir("model_bad");
  const auto path = [&](const char* n) { return (dir.path() / n).string(); };
  EXPECT_THROW(load_model(path("missing.json")), std::ios_base::failure);

  std::ofstream(path("garbage.json")) << "{not json";
  EXPECT_THROW(load_model(path("garbage.json")), ModelFormatError);

  nlohmann::json j = model_to_json(full_fixture());
  j["format"] = "something-else";
  EXPECT_THROW(model_from_json(j), ModelFormatError);

  j = model_to_json(full_fixture());
  j.erase("encoder");
  EXPECT_THROW(model_from_json(j), ModelFormatError);

  j = model_to_json(full_fixture());
  j["heads"][0]["w"] = std::vector<double>{1.0, 2.0};
  EXPECT_THROW(model_from_json(j), ModelFormatError);

  j = model_to_json(full_fixture());
  j["heads"][1]["eps_dir"] = 5.0;  // above eps_box
  EXPECT_THROW(model_from_json(j), ModelFormatError);

  j = model_to_json(full_fixture());
  j["encoder"]["layers"][1]["kind"] = "relu";
  EXPECT_THROW(model_from_json(j), ModelFormatError);

  j = model_to_json(full_fixture());
  j["dynamics"]["A"]["rows"] = 5;
  EXPECT_THROW(model_from_json(j), ModelFormatError);
}

TEST(ModelIo, HeadLookup) {
  const LatentSafetyModel m = full_fixture();
  EXPECT_EQ(m.head(HeadKind::LateralClearance).kind, HeadKind::LateralClearance);
  LatentSafetyModel empty = m;
  empty.heads.clear();
  EXPECT_THROW(empty.head(HeadKind::SwingEnergy), std::out_of_range);
}

}  // namespace
}  // namespace zonosafe
