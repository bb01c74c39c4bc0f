#pragma once

// Counterfactual search on the Square data manifold.
//
// The search runs in a normalised latent space (intensities as they are,
// positions divided by the largest admissible offset) so that one step size
// and one pair of regularisation weights apply to every coordinate. Each
// step moves the single coordinate with the steepest L1-regularised descent
// direction, which keeps counterfactuals sparse: a student that relies on
// the background gets a background-only edit, a student that relies on the
// square gets a foreground-only edit.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cfkd/classifier.hpp"
#include "cfkd/squareworld.hpp"
#include "cfkd/tensor.hpp"

namespace cfkd::cf {

enum class GradientMode { analytic, finite_difference };

struct ExplainerConfig {
  double lambda_l1 = 0.05;
  double lambda_l2 = 0.05;
  /// Target-class probability required on the hard render.
  double target_confidence = 0.9;
  std::size_t max_steps = 500;
  double step_size = 0.05;
  std::size_t restarts = 4;
  double init_jitter_scale = 0.1;
  GradientMode gradient_mode = GradientMode::analytic;
  double temperature = 0.5;
  /// Central-difference step in normalised latent units.
  double fd_epsilon = 1e-4;
  /// Reset coordinates to their factual value when the hard render still
  /// reaches the target without them.
  bool prune = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CounterfactualResult {
  Tensor x_tilde;
  square::LatentPoint z_tilde;
  int target = 0;
  bool converged = false;
  double final_target_probability = 0.0;
  std::size_t steps_used = 0;
  std::size_t restart_index = 0;
  /// z_tilde - z in raw latent units (fg, bg, x, y[, bg2]).
  std::vector<double> latent_delta;
  /// L1 distance in normalised latent units; the restart selection key.
  double latent_l1 = 0.0;
};

/// Box of admissible latent values in normalised units.
struct LatentBox {
  std::vector<double> lo;
  std::vector<double> hi;
};

LatentBox latent_box(std::size_t dims);
std::vector<double> normalize(const square::LatentPoint& z, const square::Geometry& g);
square::LatentPoint denormalize(std::span<const double> v, const square::Geometry& g);
/// Positions rounded to whole pixels, everything clipped to the box.
square::LatentPoint snap_to_grid(const square::LatentPoint& z, const square::Geometry& g);

/// Seed used for the restarts of `example`; batch and solo calls share it.
std::uint64_t example_seed(const ExplainerConfig& config, const square::GroupedExample& example);

/// Optimises CE(f(render_soft(z)), target) + l1 |z - z0|_1 + l2 |z - z0|^2
/// from K starting points and returns the converged restart with the
/// smallest L1 change. Never throws for a failed search.
CounterfactualResult generate(const model::ImageModel& student, const square::GroupedExample& example, int target,
                              const ExplainerConfig& config, const square::Geometry& geometry);
CounterfactualResult generate(const model::ModelParams& student, const square::GroupedExample& example, int target,
                              const ExplainerConfig& config, const square::Geometry& geometry);

/// Order-preserving; fans out across threads when the parallel policy is on.
std::vector<CounterfactualResult> batch_generate(const model::ImageModel& student,
                                                 std::span<const square::GroupedExample> examples,
                                                 std::span<const int> targets, const ExplainerConfig& config,
                                                 const square::Geometry& geometry);
std::vector<CounterfactualResult> batch_generate(const model::ModelParams& student,
                                                 std::span<const square::GroupedExample> examples,
                                                 std::span<const int> targets, const ExplainerConfig& config,
                                                 const square::Geometry& geometry);

/// The other class of a binary task.
int other_class(int label);

/// sum_p |x - x_tilde|_p * M_p
double mask_dot(std::span<const double> x, std::span<const double> x_tilde, const square::CausalMask& mask);

/// factual | counterfactual | signed difference, side by side.
void write_triptych(const std::filesystem::path& path, const Tensor& factual, const Tensor& counterfactual,
                    std::size_t scale = 4);

}  // namespace cfkd::cf
