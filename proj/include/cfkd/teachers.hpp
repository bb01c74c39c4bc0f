#pragma once

// Teachers decide whether a counterfactual flips the causal feature (a true
// counterfactual) or only exposes a shortcut (a false one). False ones keep
// the original label when they are added to the training data.

#include <chrono>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "cfkd/annotation_queue.hpp"
#include "cfkd/classifier.hpp"
#include "cfkd/explainer.hpp"
#include "cfkd/random.hpp"
#include "cfkd/squareworld.hpp"

namespace cfkd::teach {

enum class VerdictKind { true_counterfactual, false_counterfactual };

struct Verdict {
  VerdictKind kind = VerdictKind::false_counterfactual;
  int assigned_label = 0;
  std::string teacher_id;
  /// Teacher-specific evidence, e.g. the mask dot product or the oracle's class.
  std::optional<double> rationale;
};

const char* to_string(VerdictKind k) noexcept;

/// Builds a verdict obeying the label rule: true -> y_target, false -> y.
Verdict make_verdict(VerdictKind kind, int original_label, int target, std::string teacher_id,
                     std::optional<double> rationale = std::nullopt);
bool satisfies_label_rule(const Verdict& v, int original_label, int target) noexcept;

struct Query {
  const square::GroupedExample& original;
  const cf::CounterfactualResult& result;
  /// The student that produced the counterfactual.
  const model::ModelParams& student;
  std::size_t iteration = 0;
};

enum class TeacherKind { oracle, mask, random, human };
const char* to_string(TeacherKind k) noexcept;
std::optional<TeacherKind> parse_teacher_kind(std::string_view s) noexcept;

class Teacher {
 public:
  virtual ~Teacher() = default;
  [[nodiscard]] virtual TeacherKind kind() const noexcept = 0;
  [[nodiscard]] std::string id() const { return to_string(kind()); }
  /// nullopt means the pair was skipped (human teacher timeout).
  virtual std::optional<Verdict> judge(const Query& q) = 0;
};

Verdict oracle_verdict(const model::ModelParams& oracle, const model::ModelParams& student,
                       const cf::CounterfactualResult& result, const square::GroupedExample& original);
Verdict mask_verdict(const cf::CounterfactualResult& result, const square::GroupedExample& original);
Verdict random_verdict(Rng& rng, const cf::CounterfactualResult& result, const square::GroupedExample& original);
/// Enqueues the pair and blocks for a decision. incorporate -> false
/// counterfactual (label y), discard -> true counterfactual.
std::optional<Verdict> human_verdict(annotate::AnnotationQueue& queue, const cf::CounterfactualResult& result,
                                     const square::GroupedExample& original, std::size_t iteration,
                                     std::chrono::milliseconds timeout);

class OracleTeacher final : public Teacher {
 public:
  explicit OracleTeacher(model::ModelParams oracle) : oracle_(std::move(oracle)) {}
  [[nodiscard]] TeacherKind kind() const noexcept override { return TeacherKind::oracle; }
  std::optional<Verdict> judge(const Query& q) override;
  [[nodiscard]] const model::ModelParams& oracle() const noexcept { return oracle_; }

 private:
  model::ModelParams oracle_;
};

class MaskTeacher final : public Teacher {
 public:
  [[nodiscard]] TeacherKind kind() const noexcept override { return TeacherKind::mask; }
  std::optional<Verdict> judge(const Query& q) override;
};

class RandomTeacher final : public Teacher {
 public:
  explicit RandomTeacher(std::uint64_t seed) : rng_(derive_seed(seed, "random-teacher")) {}
  [[nodiscard]] TeacherKind kind() const noexcept override { return TeacherKind::random; }
  std::optional<Verdict> judge(const Query& q) override;

 private:
  std::mutex mu_;
  Rng rng_;
};

class HumanTeacher final : public Teacher {
 public:
  HumanTeacher(annotate::AnnotationQueue& queue, std::chrono::milliseconds timeout)
      : queue_(&queue), timeout_(timeout) {}
  [[nodiscard]] TeacherKind kind() const noexcept override { return TeacherKind::human; }
  std::optional<Verdict> judge(const Query& q) override;

 private:
  annotate::AnnotationQueue* queue_;
  std::chrono::milliseconds timeout_;
};

}  // namespace cfkd::teach
