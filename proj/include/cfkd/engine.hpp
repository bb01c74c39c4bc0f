#pragma once

// The distillation loop: explain, ask the teacher, augment, retrain, measure
// feedback accuracy on validation counterfactuals, keep the best iteration.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cfkd/classifier.hpp"
#include "cfkd/explainer.hpp"
#include "cfkd/squareworld.hpp"
#include "cfkd/teachers.hpp"

namespace cfkd::engine {

struct CfkdConfig {
  std::size_t n_iterations = 5;
  /// Also append true counterfactuals, with the target label.
  bool add_true_counterfactuals = false;
  std::size_t feedback_subset_size = 200;
  /// Continue from the previous iteration's weights instead of the init seed.
  bool warm_start = false;
  /// Measure feedback accuracy of the incoming student too (iteration 0).
  bool measure_initial_feedback = true;
  /// Triptychs written per iteration when a run directory is given.
  std::size_t triptychs_per_iteration = 8;
  cf::ExplainerConfig explainer;
  model::TrainConfig train;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One teacher decision; the counterfactual image is the hard render of z_tilde.
struct CounterfactualRecord {
  std::size_t example_id = 0;
  std::size_t iteration = 0;
  /// "train" records decide augmentation, "val" records feed feedback accuracy.
  std::string split;
  int label = 0;
  int target = 0;
  square::LatentPoint z_tilde;
  teach::Verdict verdict;
};

std::string to_json_line(const CounterfactualRecord& r);
CounterfactualRecord record_from_json_line(std::string_view line);

/// Append-only JSON-lines log. Each record is one atomic line append.
class RecordStore {
 public:
  RecordStore() = default;
  explicit RecordStore(std::filesystem::path file) : file_(std::move(file)) {}
  void append(const CounterfactualRecord& r);
  [[nodiscard]] const std::vector<CounterfactualRecord>& records() const noexcept { return records_; }
  [[nodiscard]] const std::optional<std::filesystem::path>& file() const noexcept { return file_; }
  static std::vector<CounterfactualRecord> load(const std::filesystem::path& file);

 private:
  std::optional<std::filesystem::path> file_;
  std::vector<CounterfactualRecord> records_;
};

struct FeedbackResult {
  /// nullopt when no counterfactual converged.
  std::optional<double> accuracy;
  std::size_t n_correct = 0;
  std::size_t n_total = 0;
  std::size_t n_attempted = 0;
  std::size_t n_skipped = 0;
};

struct IterationResult {
  std::size_t iteration = 0;
  model::ModelParams params;
  FeedbackResult feedback;
  std::optional<model::EvalReport> test_report;
  std::size_t generated = 0;
  std::size_t converged = 0;
  std::size_t judged_true = 0;
  std::size_t judged_false = 0;
  std::size_t skipped = 0;
  std::size_t added = 0;
  std::size_t augmented_size = 0;
  double seconds = 0.0;
};

struct CfkdState {
  /// Index 0 is the incoming student; 1..n are retrained students.
  std::vector<IterationResult> iterations;
  model::LabeledImages augmented;
  /// Ids of the validation examples used for feedback accuracy.
  std::vector<std::size_t> feedback_ids;
  std::optional<std::size_t> selected;
  bool aborted = false;
  std::string error;
};

struct CfkdResult {
  model::ModelParams refined;
  CfkdState state;
  std::vector<CounterfactualRecord> records;
};

/// Progress hooks, e.g. for the annotation service's status endpoint.
struct Observer {
  std::function<void(std::size_t iteration)> on_iteration_start;
  std::function<void(const FeedbackResult&)> on_feedback;
  std::function<void(const IterationResult&)> on_iteration_end;
};

/// Seeded subset of the validation split, sorted by id; identical for every
/// iteration of a run.
std::vector<std::size_t> feedback_subset(std::span<const square::GroupedExample> val, std::size_t subset_size,
                                         std::uint64_t seed);

/// N_correct / N_total over converged counterfactuals of the subset.
FeedbackResult feedback_accuracy(const model::ModelParams& student, std::span<const square::GroupedExample> val,
                                 std::span<const std::size_t> subset, const cf::ExplainerConfig& explainer,
                                 teach::Teacher& teacher, const square::Geometry& geometry, std::size_t iteration,
                                 RecordStore* store = nullptr);

/// Argmax over defined feedback accuracies, ties to the earliest index.
/// Throws when every entry is undefined.
std::size_t select_model(std::span<const std::optional<double>> feedback);

struct RunInputs {
  const model::ModelParams& student;
  const square::Dataset& dataset;
  teach::Teacher& teacher;
  /// Held-out decorrelated test set for diagnostics; never used for selection.
  std::span<const square::GroupedExample> test;
  std::optional<std::filesystem::path> run_dir;
  const Observer* observer = nullptr;
};

CfkdResult run_cfkd(const RunInputs& in, const CfkdConfig& config);

}  // namespace cfkd::engine
