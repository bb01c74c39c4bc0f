#include "cfkd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cfkd/errors.hpp"
#include "cfkd/kernels.hpp"

namespace cfkd::ad {

namespace {

std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (std::size_t k = 0; k < t.shape().size(); ++k) {
    if (k) s += "x";
    s += std::to_string(t.shape()[k]);
  }
  return s + "]";
}

Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

// Row-wise stable softmax of a [rows x cols] block.
void softmax_rows(const Tensor& logits, std::vector<double>& probs, std::vector<double>& log_norm) {
  const std::size_t rows = logits.rows();
  const std::size_t cols = logits.cols();
  probs.assign(rows * cols, 0.0);
  log_norm.assign(rows, 0.0);
  for (std::size_t b = 0; b < rows; ++b) {
    const auto r = logits.row(b);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (std::size_t k = 0; k < cols; ++k) {
      probs[b * cols + k] = std::exp(r[k] - mx);
      z += probs[b * cols + k];
    }
    for (std::size_t k = 0; k < cols; ++k) probs[b * cols + k] /= z;
    log_norm[b] = mx + std::log(z);
  }
}

}  // namespace

const Tape::Node& Tape::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw Error("unknown tape node " + std::to_string(id.index));
  return nodes_[id.index];
}

Tensor& Tape::grad_slot(std::size_t index) { return nodes_[index].grad; }

NodeId Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&, std::size_t)> backprop) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

NodeId Tape::constant(Tensor value) { return push(std::move(value), false, {}); }

NodeId Tape::variable(Tensor value) { return push(std::move(value), true, {}); }

NodeId Tape::borrow(const Tensor& value, bool requires_grad) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

const Tensor& Tape::value(NodeId id) const { return node(id).value(); }

const Tensor& Tape::grad(NodeId id) const { return node(id).grad; }

NodeId Tape::linear(NodeId input, NodeId weights, NodeId bias) {
  const Tensor& x = value(input);
  const Tensor& w = value(weights);
  const Tensor& b = value(bias);
  if (w.rank() != 2 || x.cols() != w.shape()[0] || b.size() != w.shape()[1]) {
    throw ShapeError("linear: input " + shape_str(x) + ", weights " + shape_str(w) + ", bias " + shape_str(b));
  }
  const kernels::GemmShape s{x.rows(), w.shape()[0], w.shape()[1]};
  Tensor out({s.batch, s.out});
  kernels::linear_forward(s, x.values(), w.values(), b.values(), out.values());

  const bool rg = requires_grad(input) || requires_grad(weights) || requires_grad(bias);
  const std::size_t xi = input.index, wi = weights.index, bi = bias.index;
  return push(std::move(out), rg, [s, xi, wi, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    if (t.nodes_[xi].requires_grad) {
      Tensor gin({s.batch, s.in});
      kernels::linear_grad_input(s, g.values(), t.nodes_[wi].value().values(), gin.values());
      auto& acc = t.grad_slot(xi);
      for (std::size_t k = 0; k < gin.size(); ++k) acc[k] += gin[k];
    }
    if (t.nodes_[wi].requires_grad) {
      kernels::linear_grad_weights(s, t.nodes_[xi].value().values(), g.values(), t.grad_slot(wi).values());
    }
    if (t.nodes_[bi].requires_grad) {
      kernels::column_sums(s.batch, s.out, g.values(), t.grad_slot(bi).values());
    }
  });
}

NodeId Tape::relu(NodeId input) {
  const Tensor& x = value(input);
  Tensor out(x.shape());
  kernels::relu_forward(x.values(), out.values());
  const std::size_t xi = input.index;
  return push(std::move(out), requires_grad(input), [xi](Tape& t, std::size_t self) {
    kernels::relu_backward(t.nodes_[xi].value().values(), t.nodes_[self].grad.values(), t.grad_slot(xi).values());
  });
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.shape() != y.shape()) throw ShapeError("add: " + shape_str(x) + " vs " + shape_str(y));
  Tensor out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = x[k] + y[k];
  const std::size_t ai = a.index, bi = b.index;
  return push(std::move(out), requires_grad(a) || requires_grad(b), [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    for (std::size_t idx : {ai, bi}) {
      if (!t.nodes_[idx].requires_grad) continue;
      auto& acc = t.grad_slot(idx);
      for (std::size_t k = 0; k < g.size(); ++k) acc[k] += g[k];
    }
  });
}

NodeId Tape::scale(NodeId a, double factor) {
  const Tensor& x = value(a);
  Tensor out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = factor * x[k];
  const std::size_t ai = a.index;
  return push(std::move(out), requires_grad(a), [ai, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.nodes_[self].grad;
    auto& acc = t.grad_slot(ai);
    for (std::size_t k = 0; k < g.size(); ++k) acc[k] += factor * g[k];
  });
}

NodeId Tape::softmax_cross_entropy(NodeId logits, std::span<const int> labels, std::span<const double> sample_weights) {
  const Tensor& z = value(logits);
  const std::size_t rows = z.rows();
  const std::size_t cols = z.cols();
  if (labels.size() != rows) throw ShapeError("softmax_cross_entropy: label count differs from batch");
  if (!sample_weights.empty() && sample_weights.size() != rows) {
    throw ShapeError("softmax_cross_entropy: weight count differs from batch");
  }
  std::vector<double> w(rows, 1.0);
  double wsum = static_cast<double>(rows);
  if (!sample_weights.empty()) {
    wsum = 0.0;
    for (std::size_t b = 0; b < rows; ++b) {
      if (!(sample_weights[b] >= 0.0)) throw Error("softmax_cross_entropy: negative sample weight");
      w[b] = sample_weights[b];
      wsum += w[b];
    }
    if (wsum <= 0.0) throw Error("softmax_cross_entropy: sample weights sum to zero");
  }
  std::vector<double> probs, log_norm;
  softmax_rows(z, probs, log_norm);
  double loss = 0.0;
  for (std::size_t b = 0; b < rows; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw Error("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    }
    loss += w[b] * (log_norm[b] - z.at(b, static_cast<std::size_t>(y)));
  }
  loss /= wsum;

  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t li = logits.index;
  return push(scalar(loss), requires_grad(logits),
              [li, rows, cols, wsum, w = std::move(w), probs = std::move(probs), lab = std::move(lab)](
                  Tape& t, std::size_t self) {
                const double g = t.nodes_[self].grad[0];
                auto& acc = t.grad_slot(li);
                for (std::size_t b = 0; b < rows; ++b) {
                  const double f = g * w[b] / wsum;
                  for (std::size_t k = 0; k < cols; ++k) {
                    const double onehot = static_cast<int>(k) == lab[b] ? 1.0 : 0.0;
                    acc[b * cols + k] += f * (probs[b * cols + k] - onehot);
                  }
                }
              });
}

NodeId Tape::l1_norm(NodeId a) {
  const Tensor& x = value(a);
  double s = 0.0;
  for (double v : x.values()) s += std::abs(v);
  const std::size_t ai = a.index;
  return push(scalar(s), requires_grad(a), [ai](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad[0];
    const Tensor& x = t.nodes_[ai].value();
    auto& acc = t.grad_slot(ai);
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (x[k] > 0.0) {
        acc[k] += g;
      } else if (x[k] < 0.0) {
        acc[k] -= g;
      }
    }
  });
}

NodeId Tape::squared_l2_norm(NodeId a) {
  const Tensor& x = value(a);
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  const std::size_t ai = a.index;
  return push(scalar(s), requires_grad(a), [ai](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad[0];
    const Tensor& x = t.nodes_[ai].value();
    auto& acc = t.grad_slot(ai);
    for (std::size_t k = 0; k < x.size(); ++k) acc[k] += 2.0 * g * x[k];
  });
}

NodeId Tape::dot(NodeId a, NodeId b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.size() != y.size()) throw ShapeError("dot: " + shape_str(x) + " vs " + shape_str(y));
  double s = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * y[k];
  const std::size_t ai = a.index, bi = b.index;
  return push(scalar(s), requires_grad(a) || requires_grad(b), [ai, bi](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad[0];
    const Tensor& x = t.nodes_[ai].value();
    const Tensor& y = t.nodes_[bi].value();
    if (t.nodes_[ai].requires_grad) {
      auto& acc = t.grad_slot(ai);
      for (std::size_t k = 0; k < x.size(); ++k) acc[k] += g * y[k];
    }
    if (t.nodes_[bi].requires_grad) {
      auto& acc = t.grad_slot(bi);
      for (std::size_t k = 0; k < x.size(); ++k) acc[k] += g * x[k];
    }
  });
}

NodeId Tape::head_gradient_penalty(NodeId logits, NodeId head_weights, std::span<const double> direction,
                                   std::span<const int> labels) {
  const Tensor& z = value(logits);
  const Tensor& w = value(head_weights);
  const std::size_t rows = z.rows();
  const std::size_t cols = z.cols();
  if (w.rank() != 2 || w.shape()[1] != cols || w.shape()[0] != direction.size()) {
    throw ShapeError("head_gradient_penalty: head " + shape_str(w) + " vs logits " + shape_str(z));
  }
  if (labels.size() != rows) throw ShapeError("head_gradient_penalty: label count differs from batch");
  const std::size_t feat = w.shape()[0];

  // u = W^T v
  std::vector<double> u(cols, 0.0);
  for (std::size_t i = 0; i < feat; ++i) {
    for (std::size_t k = 0; k < cols; ++k) u[k] += direction[i] * w.at(i, k);
  }
  std::vector<double> probs, log_norm;
  softmax_rows(z, probs, log_norm);
  std::vector<double> s(rows, 0.0);
  double pen = 0.0;
  for (std::size_t b = 0; b < rows; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) throw Error("head_gradient_penalty: label out of range");
    for (std::size_t k = 0; k < cols; ++k) {
      const double onehot = static_cast<int>(k) == y ? 1.0 : 0.0;
      s[b] += u[k] * (probs[b * cols + k] - onehot);
    }
    pen += s[b] * s[b];
  }
  pen /= static_cast<double>(rows);

  std::vector<double> v(direction.begin(), direction.end());
  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t li = logits.index, wi = head_weights.index;
  const bool rg = requires_grad(logits) || requires_grad(head_weights);
  return push(scalar(pen), rg,
              [li, wi, rows, cols, feat, u = std::move(u), probs = std::move(probs), s = std::move(s),
               v = std::move(v), lab = std::move(lab)](Tape& t, std::size_t self) {
                const double g = t.nodes_[self].grad[0] / static_cast<double>(rows);
                if (t.nodes_[li].requires_grad) {
                  auto& acc = t.grad_slot(li);
                  for (std::size_t b = 0; b < rows; ++b) {
                    const double* p = probs.data() + b * cols;
                    double up = 0.0;
                    for (std::size_t k = 0; k < cols; ++k) up += u[k] * p[k];
                    for (std::size_t j = 0; j < cols; ++j) acc[b * cols + j] += g * 2.0 * s[b] * p[j] * (u[j] - up);
                  }
                }
                if (t.nodes_[wi].requires_grad) {
                  // d pen / d u_k = 2 s_b (p_bk - e_bk);  d u_k / d W_ik = v_i
                  std::vector<double> du(cols, 0.0);
                  for (std::size_t b = 0; b < rows; ++b) {
                    for (std::size_t k = 0; k < cols; ++k) {
                      const double onehot = static_cast<int>(k) == lab[b] ? 1.0 : 0.0;
                      du[k] += 2.0 * s[b] * (probs[b * cols + k] - onehot);
                    }
                  }
                  auto& acc = t.grad_slot(wi);
                  for (std::size_t i = 0; i < feat; ++i) {
                    for (std::size_t k = 0; k < cols; ++k) acc[i * cols + k] += g * v[i] * du[k];
                  }
                }
              });
}

void Tape::backward(NodeId loss) {
  if (nodes_.empty()) throw Error("backward called on an empty tape (no forward pass recorded)");
  if (loss.index >= nodes_.size()) throw Error("backward: unknown loss node");
  if (nodes_[loss.index].value().size() != 1) throw ShapeError("backward: loss must be a scalar");
  for (auto& n : nodes_) {
    if (n.requires_grad) {
      if (n.grad.shape() != n.value().shape()) {
        n.grad = Tensor(n.value().shape());
      } else {
        n.grad.fill(0.0);
      }
    } else {
      n.grad = Tensor();
    }
  }
  if (!nodes_[loss.index].requires_grad) return;
  nodes_[loss.index].grad[0] = 1.0;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.requires_grad && n.backprop) n.backprop(*this, i);
  }
}

}  // namespace cfkd::ad
