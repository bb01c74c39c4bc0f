#include <gtest/gtest.h>

#include <filesystem>

#include "cfkd/classifier.hpp"
#include "cfkd/errors.hpp"
#include "test_util.hpp"

using namespace cfkd;
using namespace cfkd::model;
using square::Group;

namespace {

square::GroupedExample labelled(int label, bool conf) {
  square::GroupedExample e;
  e.label = label;
  e.confounder = conf;
  e.group = square::group_of(label, conf);
  return e;
}

}  // namespace

TEST(Train, SeparableToySetReachesFullAccuracy) {
  LabeledImages data;
  data.dim = 2;
  data.append(std::vector<double>{1.0, 0.0}, 0);
  data.append(std::vector<double>{0.0, 1.0}, 1);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 2;
  const auto params = ModelParams::init({2, 8, 2}, 3);
  const auto result = train(data, cfg, params);
  const auto pred = predict(result.params, data);
  EXPECT_EQ(pred.classes, (std::vector<int>{0, 1}));
  EXPECT_EQ(result.loss_history.size(), 200u);
  EXPECT_LT(result.loss_history.back(), result.loss_history.front());
}

TEST(Train, BitReproducible) {
  const auto d = square::sample_dataset(fixtures::small_spec(0.9, 200));
  const auto data = to_labeled(d.train);
  const auto cfg = fixtures::quick_train(4, 3);
  EXPECT_EQ(train(data, cfg).params, train(data, cfg).params);
}

TEST(Train, ConfigValidation) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  LabeledImages empty;
  empty.dim = 1024;
  EXPECT_THROW(train(empty, TrainConfig{}), Error);
}

TEST(Train, DivergenceReportsStep) {
  const auto d = square::sample_dataset(fixtures::small_spec(0.9, 100));
  auto data = to_labeled(d.train);
  data.pixels[5 * data.dim + 3] = std::nan("");
  try {
    train(data, fixtures::quick_train(0, 5));
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.step(), 0u);
  }
}

TEST(Predict, TieGoesToLowerClassAndRowsSumToOne) {
  auto p = ModelParams::init({4, 3, 2}, 1);
  for (auto& w : p.weights) w.fill(0.0);
  for (auto& b : p.biases) b.fill(0.0);
  const std::vector<double> img(8, 0.7);
  const auto pred = predict(p, img, 2);
  EXPECT_EQ(pred.classes, (std::vector<int>{0, 0}));

  const auto q = ModelParams::init({4, 5, 2}, 2);
  std::vector<double> many(4 * 300);
  for (std::size_t i = 0; i < many.size(); ++i) many[i] = double(i % 17) / 17.0;
  const auto pr = predict(q, many, 300);
  for (std::size_t r = 0; r < 300; ++r) EXPECT_NEAR(pr.probabilities.at(r, 0) + pr.probabilities.at(r, 1), 1.0, 1e-9);
  EXPECT_THROW(predict(q, std::vector<double>(5), 1), ShapeError);
}

TEST(Evaluate, AgaExamples) {
  std::vector<square::GroupedExample> ex{labelled(0, true), labelled(0, false), labelled(1, true), labelled(1, false)};
  auto r = report_from_predictions(ex, std::vector<int>{0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(r.aga, 1.0);
  r = report_from_predictions(ex, std::vector<int>{0, 1, 1, 0});
  EXPECT_DOUBLE_EQ(r.aga, 0.5);
  EXPECT_FALSE(r.has_empty_groups);

  // One empty group, others at 0.9, 0.8, 0.7.
  std::vector<square::GroupedExample> ex2;
  std::vector<int> pred;
  auto add = [&](int label, bool conf, int n, int correct) {
    for (int i = 0; i < n; ++i) {
      ex2.push_back(labelled(label, conf));
      pred.push_back(i < correct ? label : 1 - label);
    }
  };
  add(0, false, 10, 9);
  add(1, true, 10, 8);
  add(1, false, 10, 7);
  r = report_from_predictions(ex2, pred);
  EXPECT_NEAR(r.aga, 0.8, 1e-12);
  EXPECT_TRUE(r.has_empty_groups);
  EXPECT_EQ(r.group_counts[square::index(Group::w1_pos)], 0u);
  EXPECT_THROW(report_from_predictions({}, std::vector<int>{}), Error);
}

TEST(Features, ShapeAndHeadConsistency) {
  const auto p = ModelParams::init_default(1024, 5);
  const auto d = square::sample_dataset(fixtures::small_spec(0.5, 40));
  const auto data = to_labeled(d.train);
  const Tensor h = penultimate_features(p, data.pixels, data.size());
  EXPECT_EQ(h.cols(), 64u);
  EXPECT_EQ(h.rows(), data.size());
  const Tensor via_head = head_logits(p, h);
  const Tensor direct = logits(p, data.pixels, data.size());
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(via_head[i], direct[i], 1e-12);

  // A mid-grey image is all-zero after the input shift, so features are the
  // bias propagation alone: zero biases give zero features.
  const Tensor zero = penultimate_features(p, std::vector<double>(1024, 0.5), 1);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(Checkpoint, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "cfkd_test_ckpt";
  std::filesystem::remove_all(dir);
  const auto p = ModelParams::init({6, 4, 2}, 99);
  save_checkpoint(dir, p);
  EXPECT_EQ(load_checkpoint(dir), p);
  std::filesystem::remove(dir / "weights.bin");
  EXPECT_THROW(load_checkpoint(dir), Error);
  std::filesystem::remove_all(dir);
}

TEST(ImageModel, MlpInputGradientMatchesFiniteDifferences) {
  const auto p = ModelParams::init({16, 8, 2}, 7);
  const MlpImageModel m(p);
  std::vector<double> x(16);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.3 + 0.04 * double(i);
  std::vector<double> g(16);
  m.cross_entropy_gradient(x, 1, g);
  auto ce = [&](const std::vector<double>& v) {
    std::vector<double> l(2);
    m.logits(v, l);
    return -std::log(softmax_probability(l, 1));
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto a = x, b = x;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    EXPECT_NEAR(g[i], (ce(a) - ce(b)) / 2e-6, 1e-6);
  }
}

TEST(CleverHans, FullCorrelationStudentPredictsTheBackground) {
  const auto d = square::sample_dataset(fixtures::small_spec(1.0, 1000, 1));
  const auto p = train(to_labeled(d.train), fixtures::quick_train(1, 30)).params;
  const auto test = square::sample_examples(fixtures::small_spec(0.0, 0, 2), 1000);
  EXPECT_GT(confounder_decoding_accuracy(p, test), 0.9);
}

TEST(Train, DecorrelatedDataLearnsTheSquare) {
  const auto d = square::sample_dataset(fixtures::small_spec(0.0, 1000, 1));
  const auto p = train(to_labeled(d.train), TrainConfig{}).params;
  const auto test = square::sample_examples(fixtures::small_spec(0.0, 0, 2), 1000);
  EXPECT_GE(evaluate_groups(p, test).aga, 0.95);
}
