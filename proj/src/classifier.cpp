#include "cfkd/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cfkd/io_util.hpp"
#include "cfkd/random.hpp"

namespace cfkd::model {

namespace {

using square::kNumGroups;

constexpr std::size_t kEvalChunk = 256;

Tensor gather_batch(const LabeledImages& data, std::span<const std::size_t> idx) {
  Tensor batch({idx.size(), data.dim});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto src = data.image(idx[b]);
    std::copy(src.begin(), src.end(), batch.row(b).begin());
  }
  return batch;
}

Tensor to_batch(std::span<const double> pixels, std::size_t begin, std::size_t count, std::size_t dim) {
  return Tensor({count, dim}, std::vector<double>(pixels.begin() + static_cast<std::ptrdiff_t>(begin * dim),
                                                  pixels.begin() + static_cast<std::ptrdiff_t>((begin + count) * dim)));
}

void check_input(const ModelParams& params, std::span<const double> pixels, std::size_t count) {
  if (pixels.size() != count * params.input_size()) {
    throw ShapeError("expected " + std::to_string(count) + " images of " + std::to_string(params.input_size()) +
                     " pixels, got " + std::to_string(pixels.size()) + " values");
  }
}

}  // namespace

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) n += weights[k].size() + biases[k].size();
  return n;
}

ModelParams ModelParams::init(std::vector<std::size_t> layer_sizes, std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw ConfigError("an MLP needs at least an input and an output layer");
  ModelParams p;
  p.layer_sizes = std::move(layer_sizes);
  p.init_seed = seed;
  Rng rng(derive_seed(seed, "init"));
  for (std::size_t k = 0; k + 1 < p.layer_sizes.size(); ++k) {
    const std::size_t in = p.layer_sizes[k];
    const std::size_t out = p.layer_sizes[k + 1];
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    Tensor w({in, out});
    for (auto& v : w.values()) v = normal(rng);
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(std::vector<std::size_t>{out});
  }
  return p;
}

ModelParams ModelParams::init_default(std::size_t input_size, std::uint64_t seed) {
  return init({input_size, 128, 64, 2}, seed);
}

void LabeledImages::append(std::span<const double> image, int label, int group) {
  if (dim == 0) dim = image.size();
  if (image.size() != dim) throw ShapeError("image size differs from the dataset's");
  pixels.insert(pixels.end(), image.begin(), image.end());
  labels.push_back(label);
  groups.push_back(group);
}

void LabeledImages::append(const LabeledImages& other) {
  if (other.size() == 0) return;
  if (dim == 0) dim = other.dim;
  if (other.dim != dim) throw ShapeError("image size differs from the dataset's");
  pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  groups.insert(groups.end(), other.groups.begin(), other.groups.end());
}

LabeledImages to_labeled(std::span<const square::GroupedExample> examples) {
  LabeledImages out;
  for (const auto& e : examples) out.append(e.image.values(), e.label, static_cast<int>(square::index(e.group)));
  return out;
}

ForwardTrace forward(ad::Tape& tape, const ModelParams& params, Tensor batch, bool param_grads, bool input_grad) {
  if (batch.cols() != params.input_size()) {
    throw ShapeError("input has " + std::to_string(batch.cols()) + " features, model expects " +
                     std::to_string(params.input_size()));
  }
  for (auto& v : batch.values()) v -= params.input_shift;
  ForwardTrace tr;
  tr.input = input_grad ? tape.variable(std::move(batch)) : tape.constant(std::move(batch));
  ad::NodeId h = tr.input;
  const std::size_t layers = params.num_layers();
  for (std::size_t k = 0; k < layers; ++k) {
    tr.weights.push_back(tape.borrow(params.weights[k], param_grads));
    tr.biases.push_back(tape.borrow(params.biases[k], param_grads));
    h = tape.linear(h, tr.weights.back(), tr.biases.back());
    if (k + 1 < layers) {
      h = tape.relu(h);
      if (k + 2 == layers) tr.penultimate = h;
    }
  }
  if (layers == 1) tr.penultimate = tr.input;
  tr.logits = h;
  return tr;
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0 || !(learning_rate > 0.0)) {
    throw ConfigError("epochs, batch size and learning rate must be positive");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
}

TrainingDiverged::TrainingDiverged(std::size_t step, double loss)
    : NumericError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
      step_(step) {}

BatchObjective cross_entropy_objective(const LabeledImages& data, const TrainConfig& config) {
  const bool weighted = !config.sample_weights.empty() || config.group_weights.has_value();
  if (!config.sample_weights.empty() && config.sample_weights.size() != data.size()) {
    throw ShapeError("sample weight count differs from dataset size");
  }
  return [&data, &config, weighted](ad::Tape& tape, const ForwardTrace& tr, std::span<const std::size_t> batch) {
    std::vector<int> labels(batch.size());
    std::vector<double> w;
    if (weighted) w.resize(batch.size(), 1.0);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      labels[b] = data.labels[batch[b]];
      if (!weighted) continue;
      if (!config.sample_weights.empty()) w[b] *= config.sample_weights[batch[b]];
      const int g = data.groups.empty() ? -1 : data.groups[batch[b]];
      if (config.group_weights && g >= 0) w[b] *= (*config.group_weights)[static_cast<std::size_t>(g)];
    }
    double wsum = 0.0;
    for (double v : w) wsum += v;
    if (weighted && wsum <= 0.0) {
      // A batch carrying no weight contributes nothing.
      return tape.scale(tape.softmax_cross_entropy(tr.logits, labels), 0.0);
    }
    return tape.softmax_cross_entropy(tr.logits, labels, w);
  };
}

TrainResult train(const LabeledImages& data, const TrainConfig& config, const std::optional<ModelParams>& initial) {
  config.validate();
  return train_with_objective(data, config, cross_entropy_objective(data, config), initial);
}

TrainResult train_with_objective(const LabeledImages& data, const TrainConfig& config, const BatchObjective& objective,
                                 const std::optional<ModelParams>& initial) {
  config.validate();
  if (data.size() == 0) throw Error("cannot train on an empty dataset");
  TrainResult res;
  res.params = initial ? *initial : ModelParams::init_default(data.dim, config.seed);
  if (res.params.input_size() != data.dim) throw ShapeError("model input size differs from image size");
  ModelParams& p = res.params;

  std::vector<Tensor> vel_w, vel_b;
  for (std::size_t k = 0; k < p.num_layers(); ++k) {
    vel_w.emplace_back(p.weights[k].shape());
    vel_b.emplace_back(p.biases[k].shape());
  }
  const bool use_momentum = config.optimizer == Optimizer::momentum;
  auto update = [&](Tensor& param, Tensor& vel, const Tensor& grad) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      double g = grad[i];
      if (use_momentum) {
        vel[i] = config.momentum * vel[i] + g;
        g = vel[i];
      }
      param[i] -= config.learning_rate * g;
    }
  };

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(config.seed, "shuffle"));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, n);
      ad::Tape tape;
      const ForwardTrace tr = forward(tape, p, gather_batch(data, idx), true);
      const ad::NodeId loss = objective(tape, tr, idx);
      const double lv = tape.value(loss)[0];
      if (!std::isfinite(lv)) throw TrainingDiverged(step, lv);
      tape.backward(loss);
      for (std::size_t k = 0; k < p.num_layers(); ++k) {
        update(p.weights[k], vel_w[k], tape.grad(tr.weights[k]));
        update(p.biases[k], vel_b[k], tape.grad(tr.biases[k]));
      }
      // ReLU can hide a NaN input from the loss while the weight gradient still carries it.
      for (std::size_t k = 0; k < p.num_layers(); ++k) {
        for (double v : p.weights[k].values()) {
          if (!std::isfinite(v)) throw TrainingDiverged(step, v);
        }
      }
      epoch_loss += lv;
      ++batches;
      ++step;
    }
    res.loss_history.push_back(epoch_loss / static_cast<double>(batches));
  }
  for (std::size_t k = 0; k < p.num_layers(); ++k) {
    p.weights[k].check_finite("trained weights");
    p.biases[k].check_finite("trained biases");
  }
  return res;
}

Tensor logits(const ModelParams& params, std::span<const double> pixels, std::size_t count) {
  check_input(params, pixels, count);
  Tensor out({std::max<std::size_t>(count, 1), params.num_classes()});
  for (std::size_t start = 0; start < count; start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, count - start);
    ad::Tape tape;
    const auto tr = forward(tape, params, to_batch(pixels, start, n, params.input_size()), false);
    const Tensor& z = tape.value(tr.logits);
    std::copy(z.values().begin(), z.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(start * params.num_classes()));
  }
  return out;
}

double softmax_probability(std::span<const double> z, int target) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  return std::exp(z[static_cast<std::size_t>(target)] - mx) / sum;
}

Prediction predict(const ModelParams& params, std::span<const double> pixels, std::size_t count) {
  Prediction pr;
  if (count == 0) return pr;
  const Tensor z = logits(params, pixels, count);
  const std::size_t k = params.num_classes();
  pr.probabilities = Tensor({count, k});
  pr.classes.resize(count);
  for (std::size_t b = 0; b < count; ++b) {
    const auto row = z.row(b);
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (row[c] > row[best]) best = c;
    }
    pr.classes[b] = static_cast<int>(best);
    const double mx = row[best];
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < k; ++c) pr.probabilities.at(b, c) = std::exp(row[c] - mx) / sum;
  }
  return pr;
}

Prediction predict(const ModelParams& params, const LabeledImages& data) {
  return predict(params, data.pixels, data.size());
}

int predict_one(const ModelParams& params, std::span<const double> image) { return predict(params, image, 1).classes[0]; }

Tensor penultimate_features(const ModelParams& params, std::span<const double> pixels, std::size_t count) {
  check_input(params, pixels, count);
  const std::size_t f = params.feature_size();
  Tensor out({std::max<std::size_t>(count, 1), f});
  for (std::size_t start = 0; start < count; start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, count - start);
    ad::Tape tape;
    const auto tr = forward(tape, params, to_batch(pixels, start, n, params.input_size()), false);
    const Tensor& h = tape.value(tr.penultimate);
    if (tr.penultimate == tr.input) {
      for (std::size_t k = 0; k < h.size(); ++k) out[start * f + k] = h[k] + params.input_shift;
    } else {
      std::copy(h.values().begin(), h.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(start * f));
    }
  }
  return out;
}

Tensor head_logits(const ModelParams& params, const Tensor& features) {
  const Tensor& w = params.weights.back();
  const Tensor& b = params.biases.back();
  if (features.cols() != w.shape()[0]) throw ShapeError("feature dimension differs from the head's input");
  ad::Tape tape;
  const auto x = tape.borrow(features, false);
  const auto out = tape.linear(x, tape.borrow(w, false), tape.borrow(b, false));
  return tape.value(out);
}

EvalReport report_from_predictions(std::span<const square::GroupedExample> examples, std::span<const int> predicted) {
  if (examples.empty()) throw Error("cannot evaluate on an empty dataset");
  if (predicted.size() != examples.size()) throw ShapeError("prediction count differs from example count");
  EvalReport r;
  std::array<std::size_t, kNumGroups> correct{};
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto g = square::index(examples[i].group);
    ++r.group_counts[g];
    if (predicted[i] == examples[i].label) {
      ++correct[g];
      ++total_correct;
    }
  }
  r.overall_accuracy = static_cast<double>(total_correct) / static_cast<double>(examples.size());
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    if (r.group_counts[g] == 0) {
      r.has_empty_groups = true;
      r.group_accuracy[g] = 0.0;
      continue;
    }
    r.group_accuracy[g] = static_cast<double>(correct[g]) / static_cast<double>(r.group_counts[g]);
    sum += r.group_accuracy[g];
    ++present;
  }
  r.aga = sum / static_cast<double>(present);
  return r;
}

EvalReport evaluate_groups(const ModelParams& params, std::span<const square::GroupedExample> examples) {
  if (examples.empty()) throw Error("cannot evaluate on an empty dataset");
  const LabeledImages data = to_labeled(examples);
  const Prediction pr = predict(params, data);
  return report_from_predictions(examples, pr.classes);
}

double confounder_decoding_accuracy(const ModelParams& params, std::span<const square::GroupedExample> examples) {
  if (examples.empty()) throw Error("cannot evaluate on an empty dataset");
  const Prediction pr = predict(params, to_labeled(examples));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if ((pr.classes[i] == square::kClassW2) == examples[i].confounder) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

std::string to_json(const EvalReport& r) {
  nlohmann::json j;
  j["overall_accuracy"] = r.overall_accuracy;
  j["aga"] = r.aga;
  j["has_empty_groups"] = r.has_empty_groups;
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    const char* name = square::group_name(static_cast<square::Group>(g));
    j["groups"][name] = {{"accuracy", r.group_accuracy[g]}, {"count", r.group_counts[g]}};
  }
  return j.dump(2);
}

std::string csv_header() {
  return "overall_accuracy,acc_w1p,acc_w1n,acc_w2p,acc_w2n,n_w1p,n_w1n,n_w2p,n_w2n,aga,has_empty_groups";
}

std::string to_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.overall_accuracy;
  for (double a : r.group_accuracy) os << ',' << a;
  for (auto n : r.group_counts) os << ',' << n;
  os << ',' << r.aga << ',' << (r.has_empty_groups ? 1 : 0);
  return os.str();
}

void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params) {
  nlohmann::json m;
  m["format"] = "cfkd-mlp-v1";
  m["layer_sizes"] = params.layer_sizes;
  m["init_seed"] = params.init_seed;
  m["input_shift"] = params.input_shift;
  m["activation"] = "relu";
  m["weights_file"] = "weights.bin";
  std::vector<std::uint8_t> bin;
  bin.reserve(params.parameter_count() * 8);
  for (std::size_t k = 0; k < params.num_layers(); ++k) {
    for (double v : params.weights[k].values()) io::put_f64(bin, v);
    for (double v : params.biases[k].values()) io::put_f64(bin, v);
  }
  io::write_atomic(dir / "weights.bin", std::span<const std::uint8_t>(bin));
  io::write_atomic(dir / "manifest.json", m.dump(2));
}

ModelParams load_checkpoint(const std::filesystem::path& dir) {
  const auto m = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
  if (m.value("format", "") != "cfkd-mlp-v1") throw Error("unrecognised checkpoint format in " + dir.string());
  ModelParams p;
  p.layer_sizes = m.at("layer_sizes").get<std::vector<std::size_t>>();
  p.init_seed = m.at("init_seed").get<std::uint64_t>();
  p.input_shift = m.at("input_shift").get<double>();
  const auto bin = io::read_bytes(dir / m.value("weights_file", std::string("weights.bin")));
  std::size_t off = 0;
  for (std::size_t k = 0; k + 1 < p.layer_sizes.size(); ++k) {
    Tensor w({p.layer_sizes[k], p.layer_sizes[k + 1]});
    Tensor b({p.layer_sizes[k + 1]});
    for (auto& v : w.values()) v = io::get_f64(bin, off);
    for (auto& v : b.values()) v = io::get_f64(bin, off);
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
  }
  if (off != bin.size()) throw Error("checkpoint weight file has trailing bytes");
  return p;
}

double ImageModel::cross_entropy_gradient(std::span<const double>, int, std::span<double>) const {
  throw Error("this model does not provide input gradients");
}

void MlpImageModel::logits(std::span<const double> image, std::span<double> out) const {
  const Tensor z = model::logits(*params_, image, 1);
  std::copy(z.values().begin(), z.values().end(), out.begin());
}

double MlpImageModel::cross_entropy_gradient(std::span<const double> image, int target, std::span<double> grad) const {
  ad::Tape tape;
  const auto tr =
      forward(tape, *params_, Tensor({1, image.size()}, std::vector<double>(image.begin(), image.end())), false, true);
  const int label[1] = {target};
  const auto loss = tape.softmax_cross_entropy(tr.logits, label);
  tape.backward(loss);
  const Tensor& g = tape.grad(tr.input);
  std::copy(g.values().begin(), g.values().end(), grad.begin());
  return tape.value(loss)[0];
}

}  // namespace cfkd::model
