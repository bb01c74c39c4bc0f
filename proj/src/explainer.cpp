#include "cfkd/explainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>

#include "cfkd/errors.hpp"
#include "cfkd/kernels.hpp"
#include "cfkd/png.hpp"
#include "cfkd/random.hpp"

namespace cfkd::cf {

namespace {

using square::Geometry;
using square::LatentPoint;

struct Probe {
  double ce = 0.0;
  double probability = 0.0;
  /// Target logit strictly above every other logit; a tie is not a flip.
  bool strict = false;
};

Probe probe_image(const model::ImageModel& m, std::span<const double> image, int target) {
  std::vector<double> z(m.num_classes());
  m.logits(image, z);
  Probe p;
  p.probability = model::softmax_probability(z, target);
  p.ce = -std::log(std::max(p.probability, 1e-300));
  p.strict = true;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (static_cast<int>(k) != target && z[k] >= z[static_cast<std::size_t>(target)]) p.strict = false;
  }
  return p;
}

class Search {
 public:
  Search(const model::ImageModel& m, const LatentPoint& z0, int target, const ExplainerConfig& cfg, const Geometry& g)
      : m_(m), target_(target), cfg_(cfg), g_(g), z0_(normalize(z0, g)), box_(latent_box(z0_.size())) {
    if (m.input_size() != g.pixels()) throw ShapeError("model input size differs from the image geometry");
  }

  struct Outcome {
    std::vector<double> z;
    bool converged = false;
    double probability = 0.0;
    std::size_t steps = 0;
  };

  /// Hard render of the snapped latent; true when it reaches the target.
  bool hard_check(std::span<const double> zn, double& probability) const {
    const LatentPoint z = snap_to_grid(denormalize(zn, g_), g_);
    const Tensor img = square::render(z, g_, square::RenderMode::hard);
    const Probe p = probe_image(m_, img.values(), target_);
    probability = p.probability;
    return p.strict && p.probability >= cfg_.target_confidence;
  }

  Outcome run(std::vector<double> z) const {
    Outcome out;
    const std::size_t d = z.size();
    std::vector<double> grad(d), eff(d);
    for (std::size_t step = 0; step < cfg_.max_steps; ++step) {
      const double p = objective_gradient(z, grad);
      if (p >= cfg_.target_confidence) {
        double ph = 0.0;
        if (hard_check(z, ph)) {
          out.converged = true;
          out.probability = ph;
          out.steps = step;
          out.z = snap(z);
          return out;
        }
      }
      for (std::size_t k = 0; k < d; ++k) {
        const double delta = z[k] - z0_[k];
        const double g = grad[k] + 2.0 * cfg_.lambda_l2 * delta;
        double e;
        if (delta != 0.0) {
          e = g + cfg_.lambda_l1 * (delta > 0 ? 1.0 : -1.0);
        } else {
          e = std::copysign(std::max(std::abs(g) - cfg_.lambda_l1, 0.0), g);
        }
        if ((z[k] <= box_.lo[k] && e > 0) || (z[k] >= box_.hi[k] && e < 0)) e = 0.0;
        eff[k] = e;
      }
      std::size_t best = 0;
      for (std::size_t k = 1; k < d; ++k) {
        if (std::abs(eff[k]) > std::abs(eff[best])) best = k;
      }
      if (eff[best] == 0.0) {
        out.steps = step;
        break;
      }
      double move = eff[best] > 0 ? -cfg_.step_size : cfg_.step_size;
      const double delta = z[best] - z0_[best];
      // Moving back toward the factual value stops at it.
      if (delta != 0.0 && (move > 0) != (delta > 0) && std::abs(move) > std::abs(delta)) move = -delta;
      z[best] = std::clamp(z[best] + move, box_.lo[best], box_.hi[best]);
      out.steps = step + 1;
    }
    out.z = snap(z);
    hard_check(out.z, out.probability);
    return out;
  }

  /// Resets coordinates to the factual value, smallest change first, while
  /// the hard render keeps reaching the target.
  void prune(Outcome& o) const {
    std::vector<std::size_t> order(o.z.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(o.z[a] - z0_[a]) < std::abs(o.z[b] - z0_[b]);
    });
    for (std::size_t k : order) {
      if (o.z[k] == z0_[k]) continue;
      std::vector<double> trial = o.z;
      trial[k] = z0_[k];
      double ph = 0.0;
      if (hard_check(trial, ph)) {
        o.z = std::move(trial);
        o.probability = ph;
      }
    }
  }

  double l1(std::span<const double> z) const {
    double s = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) s += std::abs(z[k] - z0_[k]);
    return s;
  }

  [[nodiscard]] const std::vector<double>& z0() const { return z0_; }
  [[nodiscard]] const LatentBox& box() const { return box_; }

 private:
  std::vector<double> snap(std::span<const double> z) const { return normalize(snap_to_grid(denormalize(z, g_), g_), g_); }

  // Returns the soft-render target probability; writes dCE/dz into grad.
  double objective_gradient(std::span<const double> zn, std::span<double> grad) const {
    const LatentPoint z = denormalize(zn, g_);
    const Tensor img = square::render(z, g_, square::RenderMode::soft, cfg_.temperature);
    if (cfg_.gradient_mode == GradientMode::analytic && m_.has_input_gradient()) {
      std::vector<double> pix(img.size());
      const double ce = m_.cross_entropy_gradient(img.values(), target_, pix);
      square::soft_render_vjp(z, g_, cfg_.temperature, pix, grad);
      grad[2] *= g_.max_position();
      grad[3] *= g_.max_position();
      return std::exp(-ce);
    }
    const double p = probe_image(m_, img.values(), target_).probability;
    std::vector<double> shifted(zn.begin(), zn.end());
    for (std::size_t k = 0; k < zn.size(); ++k) {
      shifted[k] = zn[k] + cfg_.fd_epsilon;
      const double up = soft_ce(shifted);
      shifted[k] = zn[k] - cfg_.fd_epsilon;
      const double down = soft_ce(shifted);
      shifted[k] = zn[k];
      grad[k] = (up - down) / (2.0 * cfg_.fd_epsilon);
    }
    return p;
  }

  double soft_ce(std::span<const double> zn) const {
    const Tensor img = square::render(denormalize(zn, g_), g_, square::RenderMode::soft, cfg_.temperature);
    return probe_image(m_, img.values(), target_).ce;
  }

  const model::ImageModel& m_;
  int target_;
  const ExplainerConfig& cfg_;
  const Geometry& g_;
  std::vector<double> z0_;
  LatentBox box_;
};

}  // namespace

void ExplainerConfig::validate() const {
  if (lambda_l1 < 0 || lambda_l2 < 0) throw ConfigError("explainer regularisation weights must be nonnegative");
  if (!(target_confidence >= 0.5 && target_confidence < 1.0)) {
    throw ConfigError("target confidence must lie in [0.5, 1)");
  }
  if (!(step_size > 0) || restarts == 0) throw ConfigError("step size and restart count must be positive");
  if (init_jitter_scale < 0) throw ConfigError("jitter scale must be nonnegative");
  if (!(temperature > 0)) throw ConfigError("soft render temperature must be positive");
  if (!(fd_epsilon > 0)) throw ConfigError("finite-difference step must be positive");
}

LatentBox latent_box(std::size_t dims) {
  LatentBox b;
  b.lo = {square::kForeground[0].lo, 0.0, 0.0, 0.0};
  b.hi = {square::kForeground[1].hi, 1.0, 1.0, 1.0};
  if (dims == 5) {
    b.lo.push_back(0.0);
    b.hi.push_back(1.0);
  }
  return b;
}

std::vector<double> normalize(const LatentPoint& z, const Geometry& g) {
  std::vector<double> v = square::latent_to_vector(z);
  v[2] /= g.max_position();
  v[3] /= g.max_position();
  return v;
}

LatentPoint denormalize(std::span<const double> v, const Geometry& g) {
  std::vector<double> raw(v.begin(), v.end());
  raw[2] *= g.max_position();
  raw[3] *= g.max_position();
  return square::latent_from_vector(raw);
}

LatentPoint snap_to_grid(const LatentPoint& z, const Geometry& g) {
  const LatentBox box = latent_box(square::latent_dims(z));
  LatentPoint s = z;
  s.fg = std::clamp(z.fg, box.lo[0], box.hi[0]);
  s.bg = std::clamp(z.bg, box.lo[1], box.hi[1]);
  s.x = std::clamp(std::round(z.x), 0.0, g.max_position());
  s.y = std::clamp(std::round(z.y), 0.0, g.max_position());
  if (z.bg2) s.bg2 = std::clamp(*z.bg2, 0.0, 1.0);
  return s;
}

std::uint64_t example_seed(const ExplainerConfig& config, const square::GroupedExample& example) {
  return derive_seed(config.seed, static_cast<std::uint64_t>(example.id));
}

int other_class(int label) { return label == square::kClassW1 ? square::kClassW2 : square::kClassW1; }

CounterfactualResult generate(const model::ImageModel& student, const square::GroupedExample& example, int target,
                              const ExplainerConfig& config, const Geometry& geometry) {
  config.validate();
  if (target == example.label) throw Error("counterfactual target must differ from the example's label");
  if (target < 0 || static_cast<std::size_t>(target) >= student.num_classes()) throw Error("target class out of range");
  const Search search(student, example.latent, target, config, geometry);
  const auto& z0 = search.z0();
  const auto& box = search.box();

  Rng rng(example_seed(config, example));
  std::normal_distribution<double> normal(0.0, 1.0);
  Search::Outcome chosen;
  std::size_t chosen_index = 0;
  double chosen_l1 = 0.0;
  bool have = false;
  Search::Outcome first;
  for (std::size_t r = 0; r < config.restarts; ++r) {
    std::vector<double> start = z0;
    if (r > 0) {
      for (std::size_t k = 0; k < start.size(); ++k) {
        start[k] = std::clamp(start[k] + config.init_jitter_scale * normal(rng), box.lo[k], box.hi[k]);
      }
    }
    Search::Outcome o = search.run(std::move(start));
    if (o.converged && config.prune) search.prune(o);
    if (r == 0) first = o;
    if (!o.converged) continue;
    const double l1 = search.l1(o.z);
    if (!have || l1 < chosen_l1) {
      chosen = std::move(o);
      chosen_index = r;
      chosen_l1 = l1;
      have = true;
    }
  }
  if (!have) {
    chosen = std::move(first);
    chosen_index = 0;
    chosen_l1 = search.l1(chosen.z);
  }

  CounterfactualResult res;
  res.target = target;
  res.converged = chosen.converged;
  res.final_target_probability = chosen.probability;
  res.steps_used = chosen.steps;
  res.restart_index = chosen_index;
  res.latent_l1 = chosen_l1;
  res.z_tilde = snap_to_grid(denormalize(chosen.z, geometry), geometry);
  res.x_tilde = square::render(res.z_tilde, geometry, square::RenderMode::hard);
  const auto a = square::latent_to_vector(res.z_tilde);
  const auto b = square::latent_to_vector(example.latent);
  res.latent_delta.resize(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) res.latent_delta[k] = a[k] - b[k];
  return res;
}

CounterfactualResult generate(const model::ModelParams& student, const square::GroupedExample& example, int target,
                              const ExplainerConfig& config, const Geometry& geometry) {
  return generate(model::MlpImageModel(student), example, target, config, geometry);
}

std::vector<CounterfactualResult> batch_generate(const model::ImageModel& student,
                                                 std::span<const square::GroupedExample> examples,
                                                 std::span<const int> targets, const ExplainerConfig& config,
                                                 const Geometry& geometry) {
  if (examples.size() != targets.size()) throw ShapeError("examples and targets differ in length");
  config.validate();
  std::vector<CounterfactualResult> out(examples.size());
  const auto n = static_cast<std::ptrdiff_t>(examples.size());
  std::exception_ptr failure;
  const bool fan_out = kernels::exec_policy() == kernels::ExecPolicy::parallel && kernels::max_threads() > 1;
#pragma omp parallel for schedule(dynamic, 4) if (fan_out)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] = generate(student, examples[static_cast<std::size_t>(i)],
                                                  targets[static_cast<std::size_t>(i)], config, geometry);
    } catch (...) {
#pragma omp critical(cfkd_cf_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<CounterfactualResult> batch_generate(const model::ModelParams& student,
                                                 std::span<const square::GroupedExample> examples,
                                                 std::span<const int> targets, const ExplainerConfig& config,
                                                 const Geometry& geometry) {
  return batch_generate(model::MlpImageModel(student), examples, targets, config, geometry);
}

double mask_dot(std::span<const double> x, std::span<const double> x_tilde, const square::CausalMask& mask) {
  if (x.size() != x_tilde.size() || mask.values.size() != x.size()) {
    throw ShapeError("mask dot product needs equally sized images and mask");
  }
  double s = 0.0;
  for (std::size_t p = 0; p < x.size(); ++p) s += std::abs(x[p] - x_tilde[p]) * mask.values[p];
  return s;
}

void write_triptych(const std::filesystem::path& path, const Tensor& factual, const Tensor& counterfactual,
                    std::size_t scale) {
  if (factual.shape() != counterfactual.shape() || factual.rank() != 2) {
    throw ShapeError("triptych needs two images of equal 2-d shape");
  }
  const std::size_t h = factual.shape()[0];
  const std::size_t w = factual.shape()[1];
  std::vector<double> diff(factual.size());
  for (std::size_t p = 0; p < diff.size(); ++p) diff[p] = counterfactual[p] - factual[p];
  const png::Image panels[3] = {png::upscale(png::from_unit_gray(factual.values(), w, h), scale),
                                png::upscale(png::from_unit_gray(counterfactual.values(), w, h), scale),
                                png::upscale(png::diverging(diff, w, h), scale)};
  const std::size_t gap = 2;
  const std::size_t pw = w * scale;
  const std::size_t ph = h * scale;
  png::Image out{3 * pw + 2 * gap, ph, 3, {}};
  out.pixels.assign(out.width * out.height * 3, 128);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& p = panels[k];
    for (std::size_t r = 0; r < ph; ++r) {
      for (std::size_t c = 0; c < pw; ++c) {
        const std::size_t dst = (r * out.width + k * (pw + gap) + c) * 3;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          out.pixels[dst + ch] = p.pixels[(r * pw + c) * p.channels + (p.channels == 3 ? ch : 0)];
        }
      }
    }
  }
  png::write_file(path, out);
}

}  // namespace cfkd::cf
