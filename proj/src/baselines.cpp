#include "cfkd/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfkd/autodiff.hpp"
#include "cfkd/errors.hpp"
#include "cfkd/random.hpp"

namespace cfkd::baselines {

namespace {

using square::kNumGroups;

std::array<std::vector<std::size_t>, kNumGroups> indices_by_group(std::span<const square::GroupedExample> ex) {
  std::array<std::vector<std::size_t>, kNumGroups> out;
  for (std::size_t i = 0; i < ex.size(); ++i) out[square::index(ex[i].group)].push_back(i);
  return out;
}

std::vector<double> row_mean(const Tensor& f, std::span<const std::size_t> rows) {
  std::vector<double> m(f.cols(), 0.0);
  for (std::size_t r : rows) {
    const auto row = f.row(r);
    for (std::size_t k = 0; k < m.size(); ++k) m[k] += row[k];
  }
  for (double& v : m) v /= static_cast<double>(rows.size());
  return m;
}

Cav from_difference(std::vector<double> diff, const std::vector<double>& midpoint, std::string method) {
  double norm = 0.0;
  for (double v : diff) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 1e-12)) throw Error("confounder groups have identical feature means; no CAV direction");
  Cav cav;
  for (double& v : diff) v /= norm;
  cav.direction = std::move(diff);
  for (std::size_t k = 0; k < midpoint.size(); ++k) cav.bias += cav.direction[k] * midpoint[k];
  cav.method = std::move(method);
  return cav;
}

// Softmax regression head on fixed features, fitted by full-batch momentum GD.
std::pair<Tensor, Tensor> fit_head(const Tensor& features, std::span<const int> labels, std::size_t classes,
                                   const DfrConfig& cfg) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  // Standardise, fit, then fold the scaling back into the weights.
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < d; ++k) mu[k] += features.at(r, k);
  }
  for (double& v : mu) v /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < d; ++k) sd[k] += (features.at(r, k) - mu[k]) * (features.at(r, k) - mu[k]);
  }
  for (double& v : sd) v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-8);
  Tensor z({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < d; ++k) z.at(r, k) = (features.at(r, k) - mu[k]) / sd[k];
  }
  Tensor w({d, classes}), b({classes});
  Tensor vw({d, classes}), vb({classes});
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    ad::Tape tape;
    const auto x = tape.borrow(z, false);
    const auto wn = tape.borrow(w, true);
    const auto bn = tape.borrow(b, true);
    const auto logits = tape.linear(x, wn, bn);
    const auto loss = tape.add(tape.softmax_cross_entropy(logits, labels), tape.scale(tape.squared_l2_norm(wn), cfg.l2));
    tape.backward(loss);
    const Tensor& gw = tape.grad(wn);
    const Tensor& gb = tape.grad(bn);
    for (std::size_t k = 0; k < w.size(); ++k) {
      vw[k] = 0.9 * vw[k] + gw[k];
      w[k] -= cfg.learning_rate * vw[k];
    }
    for (std::size_t k = 0; k < b.size(); ++k) {
      vb[k] = 0.9 * vb[k] + gb[k];
      b[k] -= cfg.learning_rate * vb[k];
    }
  }
  Tensor w_raw({d, classes}), b_raw = b;
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t c = 0; c < classes; ++c) {
      w_raw.at(k, c) = w.at(k, c) / sd[k];
      b_raw[c] -= mu[k] * w_raw.at(k, c);
    }
  }
  return {std::move(w_raw), std::move(b_raw)};
}

}  // namespace

// ---- DiffAug --------------------------------------------------------------

std::vector<square::GroupedExample> diffaug_examples(std::span<const square::GroupedExample> examples,
                                                     const DiffAugConfig& aug, const square::Geometry& geometry) {
  if (aug.sigma_fraction < 0) throw ConfigError("augmentation noise must be nonnegative");
  Rng rng(derive_seed(aug.seed, "diffaug"));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double fg_span = square::kForeground[1].hi - square::kForeground[0].lo;
  const double pos_span = geometry.max_position();
  std::vector<square::GroupedExample> out;
  out.reserve(examples.size() * aug.n_aug_per_example);
  std::size_t next_id = 0;
  for (const auto& e : examples) next_id = std::max(next_id, e.id + 1);
  for (const auto& e : examples) {
    const square::Range fr = square::kForeground[static_cast<std::size_t>(e.label)];
    for (std::size_t k = 0; k < aug.n_aug_per_example; ++k) {
      square::LatentPoint z = e.latent;
      z.fg = std::clamp(z.fg + aug.sigma_fraction * fg_span * normal(rng), fr.lo, fr.hi);
      z.bg = std::clamp(z.bg + aug.sigma_fraction * normal(rng), 0.0, 1.0);
      z.x = std::clamp(std::round(z.x + aug.sigma_fraction * pos_span * normal(rng)), 0.0, pos_span);
      z.y = std::clamp(std::round(z.y + aug.sigma_fraction * pos_span * normal(rng)), 0.0, pos_span);
      if (z.bg2) z.bg2 = std::clamp(*z.bg2 + aug.sigma_fraction * normal(rng), 0.0, 1.0);
      out.push_back(square::make_example(next_id++, z, e.label, geometry));
    }
  }
  return out;
}

model::ModelParams diffaug_train(std::span<const square::GroupedExample> train, const DiffAugConfig& aug,
                                 const model::TrainConfig& config, const square::Geometry& geometry) {
  model::LabeledImages data = model::to_labeled(train);
  data.append(model::to_labeled(diffaug_examples(train, aug, geometry)));
  return model::train(data, config).params;
}

// ---- GroupDRO -------------------------------------------------------------

GroupWeights::GroupWeights(const std::array<std::size_t, kNumGroups>& counts) {
  const auto nonempty = static_cast<double>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
  if (nonempty == 0) throw Error("GroupDRO needs at least one nonempty group");
  for (std::size_t g = 0; g < kNumGroups; ++g) q_[g] = counts[g] > 0 ? 1.0 / nonempty : 0.0;
}

void GroupWeights::update(const std::array<double, kNumGroups>& group_loss, const std::array<bool, kNumGroups>& present,
                          double eta) {
  double sum = 0.0;
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    if (present[g]) q_[g] *= std::exp(eta * group_loss[g]);
    sum += q_[g];
  }
  for (double& v : q_) v /= sum;
}

model::ModelParams groupdro_train(std::span<const square::GroupedExample> train, const model::TrainConfig& config,
                                  const GroupDroConfig& dro) {
  if (dro.eta < 0) throw ConfigError("GroupDRO step size must be nonnegative");
  const model::LabeledImages data = model::to_labeled(train);
  GroupWeights weights(square::group_counts(train));
  auto objective = [&](ad::Tape& tape, const model::ForwardTrace& tr, std::span<const std::size_t> batch) {
    std::vector<int> labels(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) labels[b] = data.labels[batch[b]];
    std::array<bool, kNumGroups> present{};
    std::array<double, kNumGroups> loss_value{};
    std::array<ad::NodeId, kNumGroups> loss_node{};
    for (std::size_t g = 0; g < kNumGroups; ++g) {
      std::vector<double> w(batch.size(), 0.0);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        if (data.groups[batch[b]] == static_cast<int>(g)) {
          w[b] = 1.0;
          present[g] = true;
        }
      }
      if (!present[g]) continue;
      loss_node[g] = tape.softmax_cross_entropy(tr.logits, labels, w);
      loss_value[g] = tape.value(loss_node[g])[0];
    }
    weights.update(loss_value, present, dro.eta);
    if (dro.on_update) dro.on_update(weights.q());
    std::optional<ad::NodeId> total;
    for (std::size_t g = 0; g < kNumGroups; ++g) {
      if (!present[g]) continue;
      const auto term = tape.scale(loss_node[g], weights.q()[g]);
      total = total ? tape.add(*total, term) : term;
    }
    return *total;
  };
  return model::train_with_objective(data, config, objective).params;
}

// ---- DFR ------------------------------------------------------------------

std::vector<std::size_t> balanced_subsample(std::span<const square::GroupedExample> examples, Rng& rng) {
  auto groups = indices_by_group(examples);
  std::size_t smallest = examples.size();
  for (const auto& g : groups) smallest = std::min(smallest, g.size());
  if (smallest == 0) throw NotApplicable("DFR is not applicable: a group is empty in the held-out set");
  std::vector<std::size_t> out;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    out.insert(out.end(), g.begin(), g.begin() + static_cast<std::ptrdiff_t>(smallest));
  }
  std::sort(out.begin(), out.end());
  return out;
}

model::ModelParams dfr_retrain(const model::ModelParams& params, std::span<const square::GroupedExample> heldout,
                               const DfrConfig& config) {
  if (config.n_subsamples == 0) throw ConfigError("DFR needs at least one subsample");
  for (const auto& g : indices_by_group(heldout)) {
    if (g.empty()) throw NotApplicable("DFR is not applicable: a group is empty in the held-out set");
  }
  const model::LabeledImages data = model::to_labeled(heldout);
  const Tensor features = model::penultimate_features(params, data.pixels, data.size());
  const std::size_t d = features.cols();
  const std::size_t classes = params.num_classes();
  Tensor w_avg({d, classes}), b_avg({classes});
  Rng rng(derive_seed(config.seed, "dfr"));
  for (std::size_t s = 0; s < config.n_subsamples; ++s) {
    const auto idx = balanced_subsample(heldout, rng);
    Tensor sub({idx.size(), d});
    std::vector<int> labels;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto src = features.row(idx[r]);
      std::copy(src.begin(), src.end(), sub.row(r).begin());
      labels.push_back(heldout[idx[r]].label);
    }
    const auto [w, b] = fit_head(sub, labels, classes, config);
    for (std::size_t k = 0; k < w.size(); ++k) w_avg[k] += w[k] / static_cast<double>(config.n_subsamples);
    for (std::size_t k = 0; k < b.size(); ++k) b_avg[k] += b[k] / static_cast<double>(config.n_subsamples);
  }
  model::ModelParams out = params;
  out.weights.back() = std::move(w_avg);
  out.biases.back() = std::move(b_avg);
  return out;
}

// ---- CAV family -----------------------------------------------------------

Cav fit_cav(const Tensor& positive, const Tensor& negative) {
  if (positive.empty() || negative.empty()) throw NotApplicable("CAV needs both confounder groups to be nonempty");
  if (positive.cols() != negative.cols()) throw ShapeError("CAV feature dimensions differ");
  std::vector<std::size_t> pi(positive.rows()), ni(negative.rows());
  std::iota(pi.begin(), pi.end(), std::size_t{0});
  std::iota(ni.begin(), ni.end(), std::size_t{0});
  const auto mp = row_mean(positive, pi);
  const auto mn = row_mean(negative, ni);
  std::vector<double> diff(mp.size()), mid(mp.size());
  for (std::size_t k = 0; k < mp.size(); ++k) {
    diff[k] = mp[k] - mn[k];
    mid[k] = 0.5 * (mp[k] + mn[k]);
  }
  return from_difference(std::move(diff), mid, "difference-of-means");
}

Cav fit_confounder_cav(const Tensor& features, std::span<const square::GroupedExample> examples) {
  if (features.rows() != examples.size()) throw ShapeError("one feature row per example expected");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < examples.size(); ++i) (examples[i].confounder ? pos : neg).push_back(i);
  auto gather = [&](const std::vector<std::size_t>& rows) {
    if (rows.empty()) return Tensor();
    Tensor t({rows.size(), features.cols()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto src = features.row(rows[r]);
      std::copy(src.begin(), src.end(), t.row(r).begin());
    }
    return t;
  };
  return fit_cav(gather(pos), gather(neg));
}

Cav fit_group_cav(const Tensor& features, std::span<const square::GroupedExample> examples) {
  if (features.rows() != examples.size()) throw ShapeError("one feature row per example expected");
  const auto groups = indices_by_group(examples);
  for (const auto& g : groups) {
    if (g.empty()) throw NotApplicable("class-conditional CAV needs all four groups to be nonempty");
  }
  std::array<std::vector<double>, kNumGroups> means;
  for (std::size_t g = 0; g < kNumGroups; ++g) means[g] = row_mean(features, groups[g]);
  const std::size_t d = features.cols();
  std::vector<double> diff(d), mid(d);
  using square::Group;
  for (std::size_t k = 0; k < d; ++k) {
    diff[k] = (means[index(Group::w1_pos)][k] - means[index(Group::w1_neg)][k]) +
              (means[index(Group::w2_pos)][k] - means[index(Group::w2_neg)][k]);
    mid[k] = 0.25 * (means[0][k] + means[1][k] + means[2][k] + means[3][k]);
  }
  return from_difference(std::move(diff), mid, "class-conditional-difference-of-means");
}

Tensor project_features(const Tensor& features, const Cav& cav) {
  if (features.cols() != cav.direction.size()) throw ShapeError("CAV dimension differs from the feature dimension");
  Tensor out = features;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double s = -cav.bias;
    for (std::size_t k = 0; k < row.size(); ++k) s += cav.direction[k] * row[k];
    for (std::size_t k = 0; k < row.size(); ++k) row[k] -= cav.direction[k] * s;
  }
  return out;
}

std::vector<int> pclarc_predict(const model::ModelParams& params, const Cav& cav, std::span<const double> pixels,
                                std::size_t count) {
  if (cav.direction.size() != params.feature_size()) throw ShapeError("CAV was fitted on a different architecture");
  const Tensor h = project_features(model::penultimate_features(params, pixels, count), cav);
  const Tensor z = model::head_logits(params, h);
  std::vector<int> out(count);
  for (std::size_t b = 0; b < count; ++b) {
    const auto row = z.row(b);
    out[b] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

model::EvalReport pclarc_evaluate(const model::ModelParams& params, const Cav& cav,
                                  std::span<const square::GroupedExample> examples) {
  const model::LabeledImages data = model::to_labeled(examples);
  const auto pred = pclarc_predict(params, cav, data.pixels, data.size());
  return model::report_from_predictions(examples, pred);
}

model::ModelParams rrclarc_train(std::span<const square::GroupedExample> train, const Cav& cav, double lambda,
                                 const model::TrainConfig& config) {
  if (lambda < 0) throw ConfigError("RR-ClArC lambda must be nonnegative");
  const model::LabeledImages data = model::to_labeled(train);
  const auto ce = model::cross_entropy_objective(data, config);
  auto objective = [&](ad::Tape& tape, const model::ForwardTrace& tr, std::span<const std::size_t> batch) {
    if (tape.value(tr.weights.back()).rows() != cav.direction.size()) {
      throw ShapeError("CAV dimension differs from the model's feature width");
    }
    std::vector<int> labels(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) labels[b] = data.labels[batch[b]];
    const auto loss = ce(tape, tr, batch);
    const auto penalty = tape.head_gradient_penalty(tr.logits, tr.weights.back(), cav.direction, labels);
    return tape.add(loss, tape.scale(penalty, lambda));
  };
  return model::train_with_objective(data, config, objective).params;
}

RrSweepResult rrclarc_sweep(std::span<const square::GroupedExample> train,
                            std::span<const square::GroupedExample> validation, const Cav& cav,
                            std::span<const double> lambdas, const model::TrainConfig& config) {
  if (lambdas.empty()) throw ConfigError("RR-ClArC sweep needs at least one lambda");
  RrSweepResult out;
  double best = -1.0;
  for (double lambda : lambdas) {
    auto params = rrclarc_train(train, cav, lambda, config);
    const double aga = model::evaluate_groups(params, validation).aga;
    out.validation_aga.push_back(aga);
    if (aga > best) {
      best = aga;
      out.params = std::move(params);
      out.lambda = lambda;
    }
  }
  return out;
}

}  // namespace cfkd::baselines
