#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records primitive operations in execution order. Values of leaves
// may be owned by the tape or borrowed from the caller (parameters are
// borrowed so that a forward pass never copies weights); borrowed tensors
// must outlive the tape. `backward` walks the recorded nodes once in reverse
// order and accumulates gradients into every node that requires them.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cfkd/tensor.hpp"

namespace cfkd::ad {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Leaf owning its value.
  NodeId constant(Tensor value);
  /// Owned leaf whose gradient is tracked (e.g. an input to differentiate).
  NodeId variable(Tensor value);
  /// Borrowed leaf; `value` must outlive the tape.
  NodeId borrow(const Tensor& value, bool requires_grad);

  /// out[b,j] = sum_i in[b,i] * w[i,j] + bias[j]
  NodeId linear(NodeId input, NodeId weights, NodeId bias);
  /// max(0, v); subgradient at 0 is 0.
  NodeId relu(NodeId input);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  /// Weighted mean over the batch of -log softmax(logits)[label]. Scalar.
  /// Empty `sample_weights` means uniform weights.
  NodeId softmax_cross_entropy(NodeId logits, std::span<const int> labels,
                               std::span<const double> sample_weights = {});
  /// Sum of absolute values. Scalar. Subgradient at 0 is 0.
  NodeId l1_norm(NodeId a);
  /// Sum of squares. Scalar.
  NodeId squared_l2_norm(NodeId a);
  /// Sum of elementwise products of two equally sized tensors. Scalar.
  NodeId dot(NodeId a, NodeId b);
  /// Mean over the batch of (u . (softmax(logits_b) - onehot(label_b)))^2 with
  /// u = head_weights^T * direction. This is (direction . dCE/dh)^2 for a final
  /// linear layer logits = h * head_weights + bias. Scalar.
  NodeId head_gradient_penalty(NodeId logits, NodeId head_weights, std::span<const double> direction,
                               std::span<const int> labels);

  [[nodiscard]] const Tensor& value(NodeId id) const;
  /// Gradient from the last backward pass; empty for nodes without gradients.
  [[nodiscard]] const Tensor& grad(NodeId id) const;
  [[nodiscard]] bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be a scalar node.
  /// Throws Error if nothing was recorded.
  void backward(NodeId loss);

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&, std::size_t)> backprop;

    [[nodiscard]] const Tensor& value() const { return borrowed != nullptr ? *borrowed : owned; }
  };

  NodeId push(Tensor value, bool requires_grad, std::function<void(Tape&, std::size_t)> backprop);
  Tensor& grad_slot(std::size_t index);
  const Node& node(NodeId id) const;

  std::vector<Node> nodes_;
};

}  // namespace cfkd::ad
