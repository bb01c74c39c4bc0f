#pragma once

// The student / oracle network: a ReLU MLP over flattened images.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfkd/autodiff.hpp"
#include "cfkd/errors.hpp"
#include "cfkd/squareworld.hpp"
#include "cfkd/tensor.hpp"

namespace cfkd::model {

/// Weights and biases of a fully connected ReLU network. Layer k maps
/// layer_sizes[k] -> layer_sizes[k+1]; weights are stored [in x out].
struct ModelParams {
  std::vector<std::size_t> layer_sizes;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  std::uint64_t init_seed = 0;
  /// Subtracted from every input pixel before the first layer.
  double input_shift = 0.5;

  /// He-normal weights, zero biases.
  static ModelParams init(std::vector<std::size_t> layer_sizes, std::uint64_t seed);
  /// Default architecture input -> 128 -> 64 -> 2.
  static ModelParams init_default(std::size_t input_size, std::uint64_t seed);

  [[nodiscard]] std::size_t input_size() const { return layer_sizes.front(); }
  [[nodiscard]] std::size_t num_classes() const { return layer_sizes.back(); }
  [[nodiscard]] std::size_t feature_size() const { return layer_sizes[layer_sizes.size() - 2]; }
  [[nodiscard]] std::size_t num_layers() const { return weights.size(); }
  [[nodiscard]] std::size_t parameter_count() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Images and labels in a flat buffer; the unit the trainer consumes.
struct LabeledImages {
  std::size_t dim = 0;
  std::vector<double> pixels;
  std::vector<int> labels;
  /// Group index per sample, or -1 when unknown (e.g. counterfactual images).
  std::vector<int> groups;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels).subspan(i * dim, dim);
  }
  void append(std::span<const double> image, int label, int group = -1);
  void append(const LabeledImages& other);
};

LabeledImages to_labeled(std::span<const square::GroupedExample> examples);

struct ForwardTrace {
  ad::NodeId input;
  ad::NodeId penultimate;
  ad::NodeId logits;
  std::vector<ad::NodeId> weights;
  std::vector<ad::NodeId> biases;
};

/// Records the network on `tape`. `batch` holds raw pixels [n x input];
/// the input shift is applied here. Parameters are borrowed from `params`.
ForwardTrace forward(ad::Tape& tape, const ModelParams& params, Tensor batch, bool param_grads,
                     bool input_grad = false);

enum class Optimizer { sgd, momentum };

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  Optimizer optimizer = Optimizer::momentum;
  std::uint64_t seed = 0;
  /// Per-sample loss weights (length = dataset size) or empty.
  std::vector<double> sample_weights;
  /// Per-group loss weights, applied to samples with a known group.
  std::optional<std::array<double, square::kNumGroups>> group_weights;

  void validate() const;
};

/// Custom batch objective: receives the recorded forward pass and the dataset
/// indices of the batch, returns the scalar loss node.
using BatchObjective =
    std::function<ad::NodeId(ad::Tape&, const ForwardTrace&, std::span<const std::size_t> batch)>;

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(std::size_t step, double loss);
  [[nodiscard]] std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct TrainResult {
  ModelParams params;
  /// Mean training loss per epoch.
  std::vector<double> loss_history;
};

/// Minimises weighted cross-entropy. Starts from `ModelParams::init_default`
/// with `config.seed`, or from `initial` when given. Deterministic.
TrainResult train(const LabeledImages& data, const TrainConfig& config,
                  const std::optional<ModelParams>& initial = std::nullopt);
/// Same loop with a caller-provided objective.
TrainResult train_with_objective(const LabeledImages& data, const TrainConfig& config, const BatchObjective& objective,
                                 const std::optional<ModelParams>& initial = std::nullopt);

/// Weighted cross-entropy objective honouring the config's sample and group weights.
BatchObjective cross_entropy_objective(const LabeledImages& data, const TrainConfig& config);

Tensor logits(const ModelParams& params, std::span<const double> pixels, std::size_t count);

struct Prediction {
  std::vector<int> classes;
  /// [count x classes], rows sum to one.
  Tensor probabilities;
};

/// Argmax of the softmax; ties go to the lower class id.
Prediction predict(const ModelParams& params, std::span<const double> pixels, std::size_t count);
Prediction predict(const ModelParams& params, const LabeledImages& data);
int predict_one(const ModelParams& params, std::span<const double> image);

/// Activations entering the final linear layer, [count x feature_size].
Tensor penultimate_features(const ModelParams& params, std::span<const double> pixels, std::size_t count);
/// Applies only the final linear layer to precomputed features.
Tensor head_logits(const ModelParams& params, const Tensor& features);

struct EvalReport {
  double overall_accuracy = 0.0;
  std::array<double, square::kNumGroups> group_accuracy{};
  std::array<std::size_t, square::kNumGroups> group_counts{};
  /// Mean accuracy over groups with at least one sample.
  double aga = 0.0;
  /// True when some group had no samples and was left out of the mean.
  bool has_empty_groups = false;
};

EvalReport evaluate_groups(const ModelParams& params, std::span<const square::GroupedExample> examples);
/// Report from predictions already computed (e.g. by a projected head).
EvalReport report_from_predictions(std::span<const square::GroupedExample> examples, std::span<const int> predicted);

std::string to_json(const EvalReport& r);
std::string csv_header();
std::string to_csv_row(const EvalReport& r);

/// Fraction of examples whose predicted class equals the background flag
/// (class w2 <-> confounder +). Measures reliance on the shortcut.
double confounder_decoding_accuracy(const ModelParams& params, std::span<const square::GroupedExample> examples);

/// Manifest (architecture, seeds) plus a binary weight file.
void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& dir);

/// Differentiable view of a classifier over single images, used by the
/// counterfactual search.
class ImageModel {
 public:
  virtual ~ImageModel() = default;
  [[nodiscard]] virtual std::size_t input_size() const = 0;
  [[nodiscard]] virtual std::size_t num_classes() const = 0;
  virtual void logits(std::span<const double> image, std::span<double> out) const = 0;
  [[nodiscard]] virtual bool has_input_gradient() const { return false; }
  /// Returns CE(logits(image), target) and writes d CE / d image into `grad`.
  virtual double cross_entropy_gradient(std::span<const double> image, int target, std::span<double> grad) const;
};

class MlpImageModel final : public ImageModel {
 public:
  explicit MlpImageModel(const ModelParams& params) : params_(&params) {}
  [[nodiscard]] std::size_t input_size() const override { return params_->input_size(); }
  [[nodiscard]] std::size_t num_classes() const override { return params_->num_classes(); }
  void logits(std::span<const double> image, std::span<double> out) const override;
  [[nodiscard]] bool has_input_gradient() const override { return true; }
  double cross_entropy_gradient(std::span<const double> image, int target, std::span<double> grad) const override;

 private:
  const ModelParams* params_;
};

/// Softmax probability of `target` for given logits.
double softmax_probability(std::span<const double> logits, int target);

}  // namespace cfkd::model
