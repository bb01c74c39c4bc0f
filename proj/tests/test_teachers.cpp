#include <gtest/gtest.h>

#include <thread>

#include "cfkd/annotation_queue.hpp"
#include "cfkd/errors.hpp"
#include "cfkd/teachers.hpp"
#include "test_util.hpp"

using namespace cfkd;
using namespace cfkd::teach;

namespace {

const square::Geometry kGeo;

square::GroupedExample example(int label = 0) {
  return square::make_example(7, {label == 0 ? 0.3 : 0.7, 0.2, 5, 9, std::nullopt}, label, kGeo);
}

cf::CounterfactualResult edited(const square::GroupedExample& e, square::LatentPoint z, bool converged = true) {
  cf::CounterfactualResult r;
  r.z_tilde = z;
  r.x_tilde = square::render(z, kGeo);
  r.target = cf::other_class(e.label);
  r.converged = converged;
  return r;
}

// One-layer net that reads a single pixel: class 1 iff that pixel > 0.5.
model::ModelParams pixel_reader(std::size_t pixel) {
  auto p = model::ModelParams::init({kGeo.pixels(), 2, 2}, 0);
  p.weights[0].fill(0.0);
  p.weights[0].at(pixel, 0) = 1.0;
  p.weights[0].at(pixel, 1) = -1.0;
  p.biases[0].fill(0.0);
  p.weights[1] = Tensor::matrix({{-10.0, 10.0}, {10.0, -10.0}});
  p.biases[1].fill(0.0);
  return p;
}

}  // namespace

TEST(Verdict, LabelRule) {
  const auto t = make_verdict(VerdictKind::true_counterfactual, 0, 1, "x");
  EXPECT_EQ(t.assigned_label, 1);
  const auto f = make_verdict(VerdictKind::false_counterfactual, 0, 1, "x");
  EXPECT_EQ(f.assigned_label, 0);
  EXPECT_TRUE(satisfies_label_rule(t, 0, 1));
  Verdict bad = t;
  bad.assigned_label = 0;
  EXPECT_FALSE(satisfies_label_rule(bad, 0, 1));
}

TEST(MaskTeacher, SignOfCausalChange) {
  const auto e = example(0);
  auto z = e.latent;
  z.fg = 0.8;
  EXPECT_EQ(mask_verdict(edited(e, z), e).kind, VerdictKind::true_counterfactual);
  z = e.latent;
  z.bg = 0.9;
  const auto v = mask_verdict(edited(e, z), e);
  EXPECT_EQ(v.kind, VerdictKind::false_counterfactual);
  EXPECT_EQ(v.assigned_label, e.label);
  ASSERT_TRUE(v.rationale.has_value());
  EXPECT_LT(*v.rationale, 0.0);
  EXPECT_EQ(mask_verdict(edited(e, e.latent), e).kind, VerdictKind::false_counterfactual);
}

TEST(MaskTeacher, DependsOnlyOnAbsoluteChange) {
  const auto e = square::make_example(1, {0.3, 0.5, 5, 9, std::nullopt}, 0, kGeo);
  auto up = e.latent, down = e.latent;
  up.bg = 0.8;
  down.bg = 0.2;
  EXPECT_DOUBLE_EQ(*mask_verdict(edited(e, up), e).rationale, *mask_verdict(edited(e, down), e).rationale);
}

TEST(MaskTeacher, RejectsNonConvergedAndMissingMask) {
  auto e = example();
  EXPECT_THROW(mask_verdict(edited(e, e.latent, false), e), Error);
  e.mask.values.clear();
  EXPECT_THROW(mask_verdict(edited(e, e.latent), e), Error);
}

TEST(OracleTeacher, AgreementMeansTrue) {
  const auto e = example(0);
  auto z = e.latent;
  z.fg = 0.8;
  const auto r = edited(e, z);
  // Oracle reads the square, student reads the background.
  const auto square_reader = pixel_reader((9 + 4) * 32 + 5 + 4);
  const auto bg_reader = pixel_reader(0);
  EXPECT_EQ(oracle_verdict(square_reader, square_reader, r, e).kind, VerdictKind::true_counterfactual);
  auto zb = e.latent;
  zb.bg = 0.9;
  const auto rb = edited(e, zb);
  const auto v = oracle_verdict(square_reader, bg_reader, rb, e);
  EXPECT_EQ(v.kind, VerdictKind::false_counterfactual);
  EXPECT_EQ(v.assigned_label, e.label);
  EXPECT_THROW(oracle_verdict(square_reader, square_reader, edited(e, z, false), e), Error);
}

TEST(OracleTeacher, IdentityOracleAlwaysTrue) {
  const auto d = square::sample_dataset(fixtures::small_spec(0.9, 200));
  const auto s = model::train(model::to_labeled(d.train), fixtures::quick_train(0, 5)).params;
  for (const auto& e : d.val) {
    const auto r = cf::generate(s, e, cf::other_class(e.label), cf::ExplainerConfig{}, kGeo);
    if (r.converged) EXPECT_EQ(oracle_verdict(s, s, r, e).kind, VerdictKind::true_counterfactual);
  }
}

TEST(RandomTeacher, FairAndReproducible) {
  const auto e = example();
  const auto r = edited(e, e.latent);
  Rng a(5), b(5);
  std::size_t accepted = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto va = random_verdict(a, r, e);
    ASSERT_EQ(va.kind, random_verdict(b, r, e).kind);
    accepted += va.kind == VerdictKind::false_counterfactual;
  }
  EXPECT_GE(accepted, 4800u);
  EXPECT_LE(accepted, 5200u);

  // Independent of content: a different counterfactual draws the same sequence.
  auto z = e.latent;
  z.fg = 0.9;
  Rng c(5), d(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(random_verdict(c, r, e).kind, random_verdict(d, edited(e, z), e).kind);
}

TEST(HumanTeacher, IncorporateDiscardAndTimeout) {
  annotate::AnnotationQueue q;
  const auto e = example(1);
  const auto r = edited(e, e.latent);
  auto answer = [&q](annotate::Choice c) {
    return std::thread([&q, c] {
      for (;;) {
        const auto p = q.pending();
        if (!p.empty()) {
          q.post(p.front().id, c);
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
      }
    });
  };
  auto t1 = answer(annotate::Choice::incorporate);
  const auto v1 = human_verdict(q, r, e, 1, std::chrono::seconds(10));
  t1.join();
  ASSERT_TRUE(v1);
  EXPECT_EQ(v1->kind, VerdictKind::false_counterfactual);
  EXPECT_EQ(v1->assigned_label, e.label);

  auto t2 = answer(annotate::Choice::discard);
  const auto v2 = human_verdict(q, r, e, 1, std::chrono::seconds(10));
  t2.join();
  ASSERT_TRUE(v2);
  EXPECT_EQ(v2->kind, VerdictKind::true_counterfactual);
  EXPECT_EQ(v2->assigned_label, r.target);

  EXPECT_FALSE(human_verdict(q, r, e, 1, std::chrono::milliseconds(20)));
  const auto s = q.status();
  EXPECT_EQ(s.expired, 1u);
  EXPECT_EQ(s.decided, 2u);
}

TEST(TeacherKinds, ParseRoundTrip) {
  for (auto k : {TeacherKind::oracle, TeacherKind::mask, TeacherKind::random, TeacherKind::human}) {
    EXPECT_EQ(parse_teacher_kind(to_string(k)), k);
  }
  EXPECT_FALSE(parse_teacher_kind("crowd"));
}
