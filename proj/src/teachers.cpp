#include "cfkd/teachers.hpp"

#include "cfkd/errors.hpp"

namespace cfkd::teach {

namespace {

void require_converged(const cf::CounterfactualResult& r) {
  if (!r.converged) throw Error("non-converged counterfactuals never reach a teacher");
}

}  // namespace

const char* to_string(VerdictKind k) noexcept {
  return k == VerdictKind::true_counterfactual ? "true" : "false";
}

const char* to_string(TeacherKind k) noexcept {
  switch (k) {
    case TeacherKind::oracle: return "oracle";
    case TeacherKind::mask: return "mask";
    case TeacherKind::random: return "random";
    case TeacherKind::human: return "human";
  }
  return "?";
}

std::optional<TeacherKind> parse_teacher_kind(std::string_view s) noexcept {
  for (auto k : {TeacherKind::oracle, TeacherKind::mask, TeacherKind::random, TeacherKind::human}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

Verdict make_verdict(VerdictKind kind, int original_label, int target, std::string teacher_id,
                     std::optional<double> rationale) {
  Verdict v;
  v.kind = kind;
  v.assigned_label = kind == VerdictKind::true_counterfactual ? target : original_label;
  v.teacher_id = std::move(teacher_id);
  v.rationale = rationale;
  return v;
}

bool satisfies_label_rule(const Verdict& v, int original_label, int target) noexcept {
  return v.kind == VerdictKind::true_counterfactual ? v.assigned_label == target : v.assigned_label == original_label;
}

Verdict oracle_verdict(const model::ModelParams& oracle, const model::ModelParams& student,
                       const cf::CounterfactualResult& result, const square::GroupedExample& original) {
  require_converged(result);
  const int o = model::predict_one(oracle, result.x_tilde.values());
  const int s = model::predict_one(student, result.x_tilde.values());
  const auto kind = o == s ? VerdictKind::true_counterfactual : VerdictKind::false_counterfactual;
  return make_verdict(kind, original.label, result.target, "oracle", static_cast<double>(o));
}

Verdict mask_verdict(const cf::CounterfactualResult& result, const square::GroupedExample& original) {
  require_converged(result);
  if (original.mask.values.empty()) throw Error("mask teacher needs the example's causal mask");
  const double s = cf::mask_dot(original.image.values(), result.x_tilde.values(), original.mask);
  // s == 0 carries no evidence of a causal flip and counts as false.
  const auto kind = s > 0.0 ? VerdictKind::true_counterfactual : VerdictKind::false_counterfactual;
  return make_verdict(kind, original.label, result.target, "mask", s);
}

Verdict random_verdict(Rng& rng, const cf::CounterfactualResult& result, const square::GroupedExample& original) {
  const bool accept = std::bernoulli_distribution(0.5)(rng);
  // "incorporate" adds the pair with the original label, i.e. a false verdict.
  const auto kind = accept ? VerdictKind::false_counterfactual : VerdictKind::true_counterfactual;
  return make_verdict(kind, original.label, result.target, "random");
}

std::optional<Verdict> human_verdict(annotate::AnnotationQueue& queue, const cf::CounterfactualResult& result,
                                     const square::GroupedExample& original, std::size_t iteration,
                                     std::chrono::milliseconds timeout) {
  require_converged(result);
  const std::string id =
      queue.enqueue(original.id, iteration, original.label, result.target, original.image, result.x_tilde);
  const auto choice = queue.wait(id, timeout);
  if (!choice) return std::nullopt;
  const auto kind =
      *choice == annotate::Choice::incorporate ? VerdictKind::false_counterfactual : VerdictKind::true_counterfactual;
  return make_verdict(kind, original.label, result.target, "human");
}

std::optional<Verdict> OracleTeacher::judge(const Query& q) {
  return oracle_verdict(oracle_, q.student, q.result, q.original);
}

std::optional<Verdict> MaskTeacher::judge(const Query& q) { return mask_verdict(q.result, q.original); }

std::optional<Verdict> RandomTeacher::judge(const Query& q) {
  std::lock_guard lock(mu_);
  return random_verdict(rng_, q.result, q.original);
}

std::optional<Verdict> HumanTeacher::judge(const Query& q) {
  return human_verdict(*queue_, q.result, q.original, q.iteration, timeout_);
}

}  // namespace cfkd::teach
