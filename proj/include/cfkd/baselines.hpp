#pragma once

// Group-robustness baselines. All of them receive ground-truth group labels.

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfkd/classifier.hpp"
#include "cfkd/random.hpp"
#include "cfkd/squareworld.hpp"
#include "cfkd/tensor.hpp"

namespace cfkd::baselines {

// ---- DiffAug analog -------------------------------------------------------

struct DiffAugConfig {
  std::size_t n_aug_per_example = 4;
  /// Noise scale as a fraction of each latent coordinate's range.
  double sigma_fraction = 0.1;
  std::uint64_t seed = 0;
};

/// Label-preserving latent perturbations of every example, re-rendered hard.
std::vector<square::GroupedExample> diffaug_examples(std::span<const square::GroupedExample> examples,
                                                     const DiffAugConfig& aug, const square::Geometry& geometry);
model::ModelParams diffaug_train(std::span<const square::GroupedExample> train, const DiffAugConfig& aug,
                                 const model::TrainConfig& config, const square::Geometry& geometry);

// ---- GroupDRO -------------------------------------------------------------

/// Exponentiated-gradient weights over groups.
class GroupWeights {
 public:
  /// Uniform over groups with a nonzero count; throws if all are empty.
  explicit GroupWeights(const std::array<std::size_t, square::kNumGroups>& counts);
  /// q_g <- q_g * exp(eta * loss_g) for groups present in the batch, then renormalise.
  void update(const std::array<double, square::kNumGroups>& group_loss,
              const std::array<bool, square::kNumGroups>& present, double eta);
  [[nodiscard]] const std::array<double, square::kNumGroups>& q() const noexcept { return q_; }

 private:
  std::array<double, square::kNumGroups> q_{};
};

struct GroupDroConfig {
  double eta = 0.01;
  /// Called after every weight update; used by the simplex property test.
  std::function<void(const std::array<double, square::kNumGroups>&)> on_update;
};

model::ModelParams groupdro_train(std::span<const square::GroupedExample> train, const model::TrainConfig& config,
                                  const GroupDroConfig& dro);

// ---- DFR ------------------------------------------------------------------

struct DfrConfig {
  std::size_t n_subsamples = 10;
  std::size_t steps = 1000;
  double learning_rate = 0.1;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

/// Indices of one group-balanced subsample: every group cut to the smallest count.
std::vector<std::size_t> balanced_subsample(std::span<const square::GroupedExample> examples, Rng& rng);

/// Retrains only the last layer on group-balanced subsets of `heldout` and
/// averages the fitted heads. Throws NotApplicable if a group is empty.
model::ModelParams dfr_retrain(const model::ModelParams& params, std::span<const square::GroupedExample> heldout,
                               const DfrConfig& config);

// ---- CAV, P-ClArC, RR-ClArC ----------------------------------------------

struct Cav {
  std::vector<double> direction;
  double bias = 0.0;
  std::string method;
};

/// Difference of means of confounder-positive and -negative features,
/// normalised; bias = v . (midpoint of the means).
Cav fit_cav(const Tensor& positive, const Tensor& negative);

/// Class-conditional variant: v ~ sum over classes of (mean(c,+) - mean(c,-)),
/// so the class signal shared by both confounder values cancels. Needs all
/// four groups; throws NotApplicable otherwise.
Cav fit_group_cav(const Tensor& features, std::span<const square::GroupedExample> examples);

/// Plain fit_cav on the penultimate features of `examples` split by confounder.
Cav fit_confounder_cav(const Tensor& features, std::span<const square::GroupedExample> examples);

/// h' = h - v (v.h - b), row by row.
Tensor project_features(const Tensor& features, const Cav& cav);
std::vector<int> pclarc_predict(const model::ModelParams& params, const Cav& cav, std::span<const double> pixels,
                                std::size_t count);
model::EvalReport pclarc_evaluate(const model::ModelParams& params, const Cav& cav,
                                  std::span<const square::GroupedExample> examples);

/// CE + lambda * mean_b (v . dCE_b/dh_b)^2, trained end to end.
model::ModelParams rrclarc_train(std::span<const square::GroupedExample> train, const Cav& cav, double lambda,
                                 const model::TrainConfig& config);

struct RrSweepResult {
  model::ModelParams params;
  double lambda = 0.0;
  /// Validation AGA per swept lambda, in sweep order.
  std::vector<double> validation_aga;
};

/// Trains one model per lambda and keeps the one with the best validation AGA
/// (ties to the first).
RrSweepResult rrclarc_sweep(std::span<const square::GroupedExample> train,
                            std::span<const square::GroupedExample> validation, const Cav& cav,
                            std::span<const double> lambdas, const model::TrainConfig& config);

}  // namespace cfkd::baselines
