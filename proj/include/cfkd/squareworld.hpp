#pragma once

// The Square dataset: a foreground square on a uniform background, with the
// square's intensity deciding the class and the background intensity acting
// as a spurious confounder whose alignment with the class is controlled by a
// correlation parameter c in [0, 1].

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cfkd/tensor.hpp"

namespace cfkd::square {

constexpr int kClassW1 = 0;
constexpr int kClassW2 = 1;
constexpr int kNumClasses = 2;

/// Group ids, in the column order used by every report.
enum class Group : int { w1_pos = 0, w1_neg = 1, w2_pos = 2, w2_neg = 3 };
constexpr std::size_t kNumGroups = 4;

constexpr Group group_of(int label, bool confounder_pos) noexcept {
  if (label == kClassW1) return confounder_pos ? Group::w1_pos : Group::w1_neg;
  return confounder_pos ? Group::w2_pos : Group::w2_neg;
}
constexpr std::size_t index(Group g) noexcept { return static_cast<std::size_t>(g); }
const char* group_name(Group g) noexcept;

struct Range {
  double lo;
  double hi;
  [[nodiscard]] constexpr bool contains(double v) const noexcept { return v >= lo && v <= hi; }
};

/// Foreground intensity range of each class; the 0.10 gap keeps labels unambiguous.
constexpr std::array<Range, 2> kForeground{{{0.10, 0.45}, {0.55, 0.90}}};
constexpr Range kConfounderNeg{0.00, 0.40};
constexpr Range kConfounderPos{0.60, 1.00};
constexpr double kClassThreshold = 0.5;
constexpr double kConfounderThreshold = 0.5;

struct Geometry {
  std::size_t image_size = 32;
  std::size_t square_size = 8;
  /// Border frame width used by the two-confounder variant.
  std::size_t frame_width = 2;

  [[nodiscard]] std::size_t pixels() const noexcept { return image_size * image_size; }
  [[nodiscard]] double max_position() const noexcept { return static_cast<double>(image_size - square_size); }
  [[nodiscard]] bool in_frame(std::size_t r, std::size_t c) const noexcept {
    return r < frame_width || c < frame_width || r >= image_size - frame_width || c >= image_size - frame_width;
  }
};

/// A point on the data manifold. Positions are the top-left corner of the
/// square in pixels; they are integral for generated data and may be real
/// during counterfactual search.
struct LatentPoint {
  double fg = 0.0;
  double bg = 0.0;
  double x = 0.0;
  double y = 0.0;
  std::optional<double> bg2;

  friend bool operator==(const LatentPoint&, const LatentPoint&) = default;
};

/// +1 on the foreground square, -1 elsewhere.
struct CausalMask {
  std::vector<std::int8_t> values;
  friend bool operator==(const CausalMask&, const CausalMask&) = default;
};

struct GroupedExample {
  std::size_t id = 0;
  Tensor image;
  int label = kClassW1;
  bool confounder = false;
  std::optional<bool> confounder2;
  Group group = Group::w1_neg;
  LatentPoint latent;
  CausalMask mask;
};

struct SplitFractions {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

struct DatasetSpec {
  std::size_t n_samples = 1000;
  double correlation = 0.96;
  std::size_t image_size = 32;
  std::size_t square_size = 8;
  bool two_confounders = false;
  std::uint64_t seed = 0;
  SplitFractions split;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
  [[nodiscard]] Geometry geometry() const { return Geometry{image_size, square_size, 2}; }
  /// Probability that the confounder takes the value aligned with the class.
  [[nodiscard]] double alignment_probability() const noexcept { return 0.5 * (1.0 + correlation); }
};

struct Dataset {
  DatasetSpec spec;
  std::vector<GroupedExample> train;
  std::vector<GroupedExample> val;
  std::vector<GroupedExample> test;

  [[nodiscard]] std::size_t size() const noexcept { return train.size() + val.size() + test.size(); }
};

enum class RenderMode { hard, soft };

/// Deterministic in `spec`; rejects n_samples < 4.
Dataset sample_dataset(const DatasetSpec& spec);
/// The decorrelated dataset D*: the same generator with correlation 0.
Dataset oracle_dataset(const DatasetSpec& spec);
/// `count` examples drawn i.i.d. from the spec's distribution, ids starting at 0.
/// Used for evaluation sets that are not split.
std::vector<GroupedExample> sample_examples(const DatasetSpec& spec, std::size_t count);

/// Hard mode draws the square at the rounded position; soft mode blends with
/// a logistic edge profile of the given temperature and is smooth in every
/// latent coordinate. Throws on a nonpositive temperature in soft mode.
Tensor render(const LatentPoint& latent, const Geometry& geometry, RenderMode mode = RenderMode::hard,
              double temperature = 0.5);

/// Latent coordinates in a fixed order: fg, bg, x, y[, bg2].
std::size_t latent_dims(const LatentPoint& latent) noexcept;
std::vector<double> latent_to_vector(const LatentPoint& latent);
LatentPoint latent_from_vector(std::span<const double> v);

/// Pulls a pixel-space gradient back to latent space through the soft
/// render: out[k] = sum_p pixel_grad[p] * d render_soft[p] / d latent[k].
void soft_render_vjp(const LatentPoint& latent, const Geometry& geometry, double temperature,
                     std::span<const double> pixel_grad, std::span<double> latent_grad);

CausalMask causal_mask(const LatentPoint& latent, const Geometry& geometry);

/// Builds a fully populated example (image, group, mask) from a latent.
/// The confounder flags are read off the background intensities.
GroupedExample make_example(std::size_t id, const LatentPoint& latent, int label, const Geometry& geometry);

std::array<std::size_t, kNumGroups> group_counts(std::span<const GroupedExample> examples);

/// FNV-1a over labels, groups and image bytes; used to fingerprint runs.
std::uint64_t dataset_hash(const Dataset& dataset);

}  // namespace cfkd::square
