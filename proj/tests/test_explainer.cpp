#include <gtest/gtest.h>

#include <filesystem>

#include "cfkd/errors.hpp"
#include "cfkd/explainer.hpp"
#include "cfkd/io_util.hpp"
#include "cfkd/png.hpp"
#include "test_util.hpp"

using namespace cfkd;
using namespace cfkd::cf;
using fixtures::RuleModel;

namespace {

const square::Geometry kGeo;

ExplainerConfig fd_config() {
  ExplainerConfig c;
  c.gradient_mode = GradientMode::finite_difference;
  return c;
}

std::vector<square::GroupedExample> examples(double c, std::size_t n, std::uint64_t seed) {
  return square::sample_examples(fixtures::small_spec(c, n, seed), n);
}

// Invariants every result must satisfy.
void check_sound(const model::ImageModel& m, const square::GroupedExample& e, const CounterfactualResult& r,
                 const ExplainerConfig& cfg) {
  ASSERT_EQ(r.x_tilde, square::render(r.z_tilde, kGeo));
  EXPECT_TRUE(square::kForeground[0].lo <= r.z_tilde.fg + 1e-12 && r.z_tilde.fg <= 0.9 + 1e-12);
  EXPECT_GE(r.z_tilde.bg, 0.0);
  EXPECT_LE(r.z_tilde.bg, 1.0);
  EXPECT_EQ(r.z_tilde.x, std::round(r.z_tilde.x));
  EXPECT_EQ(r.z_tilde.y, std::round(r.z_tilde.y));
  if (r.converged) {
    std::vector<double> l(2);
    m.logits(r.x_tilde.values(), l);
    EXPECT_GE(model::softmax_probability(l, r.target), cfg.target_confidence);
    EXPECT_EQ(l[r.target] > l[1 - r.target], true);
  }
  (void)e;
}

}  // namespace

TEST(Explainer, GroundTruthRuleFlipsTheForeground) {
  const RuleModel rule(RuleModel::Feature::foreground, kGeo.pixels());
  const auto cfg = fd_config();
  for (const auto& e : examples(0.5, 12, 3)) {
    const auto r = generate(rule, e, other_class(e.label), cfg, kGeo);
    check_sound(rule, e, r, cfg);
    ASSERT_TRUE(r.converged) << "example " << e.id;
    EXPECT_EQ(e.latent.fg > 0.5, !(r.z_tilde.fg > 0.5));
    EXPECT_LE(std::abs(r.z_tilde.bg - e.latent.bg), 0.05);
    EXPECT_LE(std::abs(r.z_tilde.x - e.latent.x), 1.0);
    EXPECT_LE(std::abs(r.z_tilde.y - e.latent.y), 1.0);
  }
}

TEST(Explainer, BackgroundRuleFlipsTheBackground) {
  const RuleModel rule(RuleModel::Feature::background, kGeo.pixels());
  const auto cfg = fd_config();
  for (const auto& e : examples(1.0, 12, 4)) {
    const auto r = generate(rule, e, other_class(e.label), cfg, kGeo);
    check_sound(rule, e, r, cfg);
    ASSERT_TRUE(r.converged);
    EXPECT_NE(e.latent.bg > 0.5, r.z_tilde.bg > 0.5);
    EXPECT_LE(std::abs(r.z_tilde.fg - e.latent.fg), 0.05);
  }
}

TEST(Explainer, FullCorrelationStudentGetsBackgroundCounterfactuals) {
  const auto d = square::sample_dataset(fixtures::small_spec(1.0, 600, 8));
  const auto student = model::train(model::to_labeled(d.train), fixtures::quick_train(8, 30)).params;
  const auto ex = examples(1.0, 100, 9);
  std::vector<int> targets;
  for (const auto& e : ex) targets.push_back(other_class(e.label));
  const ExplainerConfig cfg;
  const auto results = batch_generate(student, ex, targets, cfg, kGeo);
  std::size_t converged = 0, bg_flips = 0;
  const model::MlpImageModel m(student);
  for (std::size_t i = 0; i < ex.size(); ++i) {
    check_sound(m, ex[i], results[i], cfg);
    if (!results[i].converged) continue;
    ++converged;
    if ((results[i].z_tilde.bg > 0.5) != (ex[i].latent.bg > 0.5) && std::abs(results[i].z_tilde.fg - ex[i].latent.fg) <= 0.05) {
      ++bg_flips;
    }
  }
  EXPECT_GE(converged, 80u);
  EXPECT_GE(bg_flips, converged * 9 / 10);
}

TEST(Explainer, UnreachableTargetDoesNotConverge) {
  const fixtures::ConstantModel flat(kGeo.pixels());
  ExplainerConfig cfg = fd_config();
  cfg.lambda_l1 = cfg.lambda_l2 = 0.0;
  cfg.target_confidence = 0.5;
  cfg.max_steps = 40;
  const auto e = examples(0.5, 1, 1)[0];
  const auto r = generate(flat, e, other_class(e.label), cfg, kGeo);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.x_tilde, square::render(r.z_tilde, kGeo));
}

TEST(Explainer, AnalyticAndFiniteDifferenceModesAgree) {
  const auto d = square::sample_dataset(fixtures::small_spec(0.9, 300, 2));
  const auto student = model::train(model::to_labeled(d.train), fixtures::quick_train(2, 10)).params;
  const model::MlpImageModel m(student);
  ExplainerConfig a;
  ExplainerConfig f = fd_config();
  std::size_t same = 0;
  const auto ex = examples(0.9, 10, 12);
  for (const auto& e : ex) {
    const auto ra = generate(m, e, other_class(e.label), a, kGeo);
    const auto rf = generate(m, e, other_class(e.label), f, kGeo);
    same += ra.converged == rf.converged && ra.z_tilde == rf.z_tilde;
  }
  // Both modes take the same greedy path unless two coordinates tie to within
  // the finite-difference error.
  EXPECT_GE(same, 9u);
}

TEST(Explainer, BatchEqualsSoloAndIsDeterministic) {
  const auto d = square::sample_dataset(fixtures::small_spec(0.9, 300, 2));
  const auto student = model::train(model::to_labeled(d.train), fixtures::quick_train(2, 10)).params;
  const auto ex = examples(0.9, 6, 13);
  std::vector<int> targets;
  for (const auto& e : ex) targets.push_back(other_class(e.label));
  ExplainerConfig cfg;
  cfg.seed = 77;
  EXPECT_TRUE(batch_generate(student, std::span<const square::GroupedExample>{}, {}, cfg, kGeo).empty());
  const auto batch = batch_generate(student, ex, targets, cfg, kGeo);
  for (std::size_t i = 0; i < ex.size(); ++i) {
    const auto solo = generate(student, ex[i], targets[i], cfg, kGeo);
    EXPECT_EQ(solo.x_tilde, batch[i].x_tilde);
    EXPECT_EQ(solo.latent_delta, batch[i].latent_delta);
    EXPECT_EQ(solo.restart_index, batch[i].restart_index);
    EXPECT_EQ(solo.steps_used, batch[i].steps_used);
  }
  const auto again = batch_generate(student, ex, targets, cfg, kGeo);
  for (std::size_t i = 0; i < ex.size(); ++i) EXPECT_EQ(again[i].z_tilde, batch[i].z_tilde);
  EXPECT_THROW(batch_generate(student, ex, std::vector<int>{1}, cfg, kGeo), ShapeError);
}

TEST(Explainer, RaisingL1NeverIncreasesTheSelectedChange) {
  const auto d = square::sample_dataset(fixtures::small_spec(0.9, 300, 5));
  const auto student = model::train(model::to_labeled(d.train), fixtures::quick_train(5, 10)).params;
  ExplainerConfig lo;
  ExplainerConfig hi;
  hi.lambda_l1 = 10 * lo.lambda_l1;
  for (const auto& e : examples(0.9, 8, 21)) {
    const auto a = generate(student, e, other_class(e.label), lo, kGeo);
    const auto b = generate(student, e, other_class(e.label), hi, kGeo);
    if (a.converged && b.converged) EXPECT_LE(b.latent_l1, a.latent_l1 + 1e-12);
  }
}

TEST(Explainer, ConfigValidationAndPreconditions) {
  ExplainerConfig c;
  c.target_confidence = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lambda_l1 = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.restarts = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  const RuleModel rule(RuleModel::Feature::foreground, kGeo.pixels());
  const auto e = examples(0.5, 1, 1)[0];
  EXPECT_THROW(generate(rule, e, e.label, fd_config(), kGeo), Error);
}

TEST(Explainer, NormalisedLatentRoundTrip) {
  const square::LatentPoint z{0.3, 0.7, 12, 24, 0.1};
  const auto v = normalize(z, kGeo);
  EXPECT_DOUBLE_EQ(v[3], 1.0);
  EXPECT_EQ(denormalize(v, kGeo), z);
  const auto box = latent_box(5);
  EXPECT_EQ(box.lo.size(), 5u);
  const auto snapped = snap_to_grid({0.95, -0.2, 3.4, 30.0, std::nullopt}, kGeo);
  EXPECT_DOUBLE_EQ(snapped.fg, 0.9);
  EXPECT_DOUBLE_EQ(snapped.bg, 0.0);
  EXPECT_DOUBLE_EQ(snapped.x, 3.0);
  EXPECT_DOUBLE_EQ(snapped.y, 24.0);
}

TEST(Explainer, MaskDotAndTriptych) {
  const auto e = examples(0.5, 1, 2)[0];
  EXPECT_EQ(mask_dot(e.image.values(), e.image.values(), e.mask), 0.0);
  square::LatentPoint z = e.latent;
  z.fg = e.latent.fg > 0.5 ? 0.2 : 0.8;
  EXPECT_GT(mask_dot(e.image.values(), square::render(z, kGeo).values(), e.mask), 0.0);
  z = e.latent;
  z.bg = e.latent.bg > 0.5 ? 0.1 : 0.9;
  EXPECT_LT(mask_dot(e.image.values(), square::render(z, kGeo).values(), e.mask), 0.0);

  const auto path = std::filesystem::temp_directory_path() / "cfkd_test_triptych.png";
  write_triptych(path, e.image, square::render(z, kGeo), 2);
  const auto img = png::decode(io::read_bytes(path));
  EXPECT_EQ(img.height, 64u);
  EXPECT_GE(img.width, 3u * 64u);
  std::filesystem::remove(path);
}
