#include <gtest/gtest.h>

#include <numeric>

#include "cfkd/baselines.hpp"
#include "cfkd/errors.hpp"
#include "test_util.hpp"

using namespace cfkd;
using namespace cfkd::baselines;

namespace {

struct Trained {
  square::Dataset data;
  model::ModelParams params;
};

const Trained& shortcut_student() {
  static const Trained t = [] {
    Trained x;
    x.data = square::sample_dataset(fixtures::small_spec(0.9, 400, 11));
    x.params = model::train(model::to_labeled(x.data.train), fixtures::quick_train(11, 10)).params;
    return x;
  }();
  return t;
}

Tensor features_of(const model::ModelParams& p, std::span<const square::GroupedExample> ex) {
  const auto d = model::to_labeled(ex);
  return model::penultimate_features(p, d.pixels, d.size());
}

}  // namespace

TEST(DiffAug, LabelsPreservedAndZeroNoiseDuplicates) {
  const auto d = square::sample_dataset(fixtures::small_spec(0.9, 100, 1));
  DiffAugConfig aug;
  const auto out = diffaug_examples(d.train, aug, d.spec.geometry());
  ASSERT_EQ(out.size(), d.train.size() * aug.n_aug_per_example);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& src = d.train[i / aug.n_aug_per_example];
    EXPECT_EQ(out[i].label, src.label);
    EXPECT_TRUE(square::kForeground[static_cast<std::size_t>(src.label)].contains(out[i].latent.fg));
  }
  aug.sigma_fraction = 0.0;
  const auto same = diffaug_examples(d.train, aug, d.spec.geometry());
  for (std::size_t i = 0; i < same.size(); ++i) EXPECT_EQ(same[i].image, d.train[i / aug.n_aug_per_example].image);
  aug.sigma_fraction = -1;
  EXPECT_THROW(diffaug_examples(d.train, aug, d.spec.geometry()), ConfigError);
}

TEST(GroupDro, WeightsStayOnTheSimplex) {
  GroupWeights w({10, 0, 5, 5});
  EXPECT_DOUBLE_EQ(w.q()[1], 0.0);
  EXPECT_NEAR(w.q()[0], 1.0 / 3, 1e-15);
  // Equal losses: uniform forever.
  for (int i = 0; i < 50; ++i) w.update({1, 1, 1, 1}, {true, false, true, true}, 0.5);
  EXPECT_NEAR(w.q()[0], 1.0 / 3, 1e-12);
  EXPECT_NEAR(w.q()[2], 1.0 / 3, 1e-12);
  // One group strictly worse: its weight strictly grows.
  double prev = w.q()[3];
  for (int i = 0; i < 20; ++i) {
    w.update({0.2, 0.0, 0.2, 0.9}, {true, false, true, true}, 0.5);
    EXPECT_GT(w.q()[3], prev);
    prev = w.q()[3];
  }
  EXPECT_THROW(GroupWeights({0, 0, 0, 0}), Error);
}

TEST(GroupDro, TrainingKeepsProbabilityVector) {
  const auto& s = shortcut_student();
  GroupDroConfig dro;
  dro.eta = 0.1;
  std::size_t updates = 0;
  dro.on_update = [&](const std::array<double, 4>& q) {
    ++updates;
    const double sum = std::accumulate(q.begin(), q.end(), 0.0);
    ASSERT_NEAR(sum, 1.0, 1e-12);
    for (double v : q) ASSERT_GE(v, 0.0);
  };
  groupdro_train(s.data.train, fixtures::quick_train(1, 2), dro);
  EXPECT_GT(updates, 0u);
}

TEST(Dfr, BodyUntouchedAndBalancedSubsets) {
  const auto& s = shortcut_student();
  Rng rng(1);
  const auto idx = balanced_subsample(s.data.train, rng);
  std::array<std::size_t, 4> counts{};
  for (auto i : idx) ++counts[square::index(s.data.train[i].group)];
  EXPECT_EQ(counts[0], counts[1]);
  EXPECT_EQ(counts[1], counts[2]);
  EXPECT_EQ(counts[2], counts[3]);

  DfrConfig cfg;
  cfg.steps = 50;
  const auto out = dfr_retrain(s.params, s.data.train, cfg);
  for (std::size_t l = 0; l + 1 < out.num_layers(); ++l) {
    EXPECT_EQ(out.weights[l], s.params.weights[l]);
    EXPECT_EQ(out.biases[l], s.params.biases[l]);
  }
  EXPECT_NE(out.weights.back(), s.params.weights.back());
}

TEST(Dfr, EmptyGroupIsNotApplicable) {
  const auto d = square::sample_dataset(fixtures::small_spec(1.0, 200, 1));
  const auto p = model::ModelParams::init_default(1024, 0);
  EXPECT_THROW(dfr_retrain(p, d.val, DfrConfig{}), NotApplicable);
  Rng rng(0);
  EXPECT_THROW(balanced_subsample(d.val, rng), NotApplicable);
}

TEST(Cav, SyntheticMeans) {
  const Tensor pos = Tensor::matrix({{1.0, 0.5}, {1.0, -0.5}});
  const Tensor neg = Tensor::matrix({{-1.0, 0.5}, {-1.0, -0.5}});
  const Cav c = fit_cav(pos, neg);
  EXPECT_NEAR(c.direction[0], 1.0, 1e-15);
  EXPECT_NEAR(c.direction[1], 0.0, 1e-15);
  EXPECT_NEAR(c.bias, 0.0, 1e-15);
  EXPECT_THROW(fit_cav(pos, pos), Error);
  EXPECT_THROW(fit_cav(pos, Tensor()), NotApplicable);
}

TEST(Cav, ConfounderIsLinearlyDecodableFromAShortcutStudent) {
  const auto d = square::sample_dataset(fixtures::small_spec(1.0, 600, 2));
  const auto p = model::train(model::to_labeled(d.train), fixtures::quick_train(2, 20)).params;
  const Cav c = fit_confounder_cav(features_of(p, d.train), d.train);
  const auto test = square::sample_examples(fixtures::small_spec(0.0, 0, 3), 500);
  const Tensor h = features_of(p, test);
  std::size_t right = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double s = -c.bias;
    for (std::size_t k = 0; k < h.cols(); ++k) s += c.direction[k] * h.at(i, k);
    right += (s > 0) == test[i].confounder;
  }
  EXPECT_GE(double(right) / double(test.size()), 0.9);
  EXPECT_THROW(fit_group_cav(features_of(p, d.train), d.train), NotApplicable);
}

TEST(PClarc, ProjectionIdentityAndIdempotence) {
  const auto& s = shortcut_student();
  const Tensor h = features_of(s.params, s.data.val);
  const Cav c = fit_confounder_cav(features_of(s.params, s.data.train), s.data.train);
  double norm = 0;
  for (double v : c.direction) norm += v * v;
  EXPECT_NEAR(norm, 1.0, 1e-12);
  const Tensor once = project_features(h, c);
  const Tensor twice = project_features(once, c);
  for (std::size_t r = 0; r < once.rows(); ++r) {
    double dot = 0;
    for (std::size_t k = 0; k < once.cols(); ++k) dot += c.direction[k] * once.at(r, k);
    EXPECT_NEAR(dot, c.bias, 1e-9);
  }
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-12);
}

TEST(PClarc, OrthogonalCavLeavesPredictionsUnchanged) {
  const auto& s = shortcut_student();
  // A direction in the null space of the head: w0 - w1 is what decides the
  // class, so any v with v . (w0 - w1) = 0 cannot move the decision.
  const Tensor& head = s.params.weights.back();
  std::vector<double> diff(head.rows());
  for (std::size_t k = 0; k < head.rows(); ++k) diff[k] = head.at(k, 0) - head.at(k, 1);
  std::vector<double> v(diff.size(), 0.0);
  v[0] = diff[1];
  v[1] = -diff[0];
  double n = std::hypot(v[0], v[1]);
  ASSERT_GT(n, 0.0);
  v[0] /= n;
  v[1] /= n;
  const Cav c{v, 0.3, "orthogonal"};
  const auto d = model::to_labeled(s.data.val);
  EXPECT_EQ(pclarc_predict(s.params, c, d.pixels, d.size()), model::predict(s.params, d).classes);
  const Cav wrong{std::vector<double>(3, 0.0), 0.0, "bad"};
  EXPECT_THROW(pclarc_predict(s.params, wrong, d.pixels, d.size()), ShapeError);
}

TEST(RrClarc, ZeroLambdaIsBitIdenticalToErm) {
  const auto& s = shortcut_student();
  const auto cfg = fixtures::quick_train(11, 10);
  const Cav c = fit_confounder_cav(features_of(s.params, s.data.train), s.data.train);
  EXPECT_EQ(rrclarc_train(s.data.train, c, 0.0, cfg), s.params);
  EXPECT_THROW(rrclarc_train(s.data.train, c, -1.0, cfg), ConfigError);
}

TEST(RrClarc, PenaltyVanishesWhenGradientIsOrthogonal) {
  // logits = h W, dCE/dh = W (p - y). With both head columns equal, the
  // gradient is zero in every direction, so the penalty is zero.
  ad::Tape t;
  const Tensor W = Tensor::matrix({{1.0, 1.0}, {2.0, 2.0}});
  const auto w = t.constant(W);
  const auto logits = t.linear(t.constant(Tensor::matrix({{0.3, -0.2}})), w, t.constant(Tensor::vector({0, 0})));
  const std::vector<int> y{1};
  const std::vector<double> v{0.6, 0.8};
  EXPECT_DOUBLE_EQ(t.value(t.head_gradient_penalty(logits, w, v, y))[0], 0.0);
}

TEST(RrClarc, SweepPicksBestValidationAga) {
  const auto& s = shortcut_student();
  const Cav c = fit_confounder_cav(features_of(s.params, s.data.train), s.data.train);
  const std::vector<double> lambdas{0.0, 1.0};
  const auto r = rrclarc_sweep(s.data.train, s.data.val, c, lambdas, fixtures::quick_train(11, 3));
  ASSERT_EQ(r.validation_aga.size(), 2u);
  const auto best = std::max_element(r.validation_aga.begin(), r.validation_aga.end()) - r.validation_aga.begin();
  EXPECT_EQ(r.lambda, lambdas[static_cast<std::size_t>(best)]);
  EXPECT_THROW(rrclarc_sweep(s.data.train, s.data.val, c, {}, fixtures::quick_train()), ConfigError);
}
