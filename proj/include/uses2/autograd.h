// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a graph node. Ops build new nodes whose backward
// closures accumulate into the gradients of their inputs. Nodes whose inputs
// carry no gradient are created as constants, so inference builds no graph.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "uses2/tensor.h"

namespace uses2 {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Zero-initialized on first use.
  Tensor<T>& Grad() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::int64_t i) const { return node_->value.dim(i); }
  std::int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  // Empty tensor until backward reaches this node.
  const Tensor<T>& grad() const { return node_->grad; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Creates the result node of an op. `backward` receives the result node; its
// grad is populated and it must accumulate into inputs that require grad.
template <typename T>
Var<T> MakeResult(Tensor<T> value, const std::vector<Var<T>>& inputs,
                  std::function<void(Node<T>&)> backward) {
  bool any = false;
  for (const auto& v : inputs) any = any || (v.defined() && v.requires_grad());
  Var<T> out(std::move(value), any);
  if (any) {
    auto* node = out.node();
    node->inputs.reserve(inputs.size());
    for (const auto& v : inputs) node->inputs.push_back(v.defined() ? v.shared() : nullptr);
    node->backward = std::move(backward);
  }
  return out;
}

// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
template <typename T>
void Backward(const Var<T>& root);

// Multiply-accumulate bookkeeping for the heavy ops on this thread. Used to
// cross-check the analytic complexity model against executed work.
std::uint64_t MacCounter();
void ResetMacCounter();
void AddMacs(std::uint64_t macs);

namespace ops {

template <typename T> Var<T> Reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> Permute(const Var<T>& x, const std::vector<int>& axes);
template <typename T> Var<T> Add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> Sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> Mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> Scale(const Var<T>& x, T s);
// x scaled by a one-element Var.
template <typename T> Var<T> ScaleBy(const Var<T>& x, const Var<T>& s);
// Quotient of two one-element Vars.
template <typename T> Var<T> Divide(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> Dot(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> Sum(const Var<T>& x);
template <typename T> Var<T> Mean(const Var<T>& x);
template <typename T> Var<T> Abs(const Var<T>& x);
template <typename T> Var<T> Relu(const Var<T>& x);
template <typename T> Var<T> Gelu(const Var<T>& x);
// Single learned slope shared by every element.
template <typename T> Var<T> Prelu(const Var<T>& x, const Var<T>& slope);

// y = x W^T + b over the last axis. W: [out, in]; b: [out] or undefined.
template <typename T> Var<T> Linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
// Normalization over the last axis.
template <typename T>
Var<T> LayerNorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

template <typename T> Var<T> Concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> Slice(const Var<T>& x, int axis, std::int64_t start, std::int64_t length);

// out[i] = x[index[i]], or 0 where index[i] < 0. Backward scatter-adds.
template <typename T>
Var<T> Gather(const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> index, Shape out_shape);

// Row gather over the last axis: x viewed as [rows, D]; out row r is
// x row index[r], or zeros where index[r] < 0. Result is [index.size(), D].
template <typename T>
Var<T> GatherRows(const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> index);

// [n, ...] -> [1, ...] mean over the leading axis, and its broadcast inverse.
template <typename T> Var<T> MeanLeading(const Var<T>& x);
template <typename T> Var<T> RepeatLeading(const Var<T>& x, std::int64_t n);

// Multi-head self-attention on packed projections q, k, v: [B, L, D], D split
// into `heads` contiguous groups. logits = scale * q k^T (+ bias[h]) where
// bias is [heads, L, L]. mask, if given, is [M, L, L] bytes applied to batch b
// as mask[b % M]; nonzero entries are excluded from the softmax. If
// `probabilities` is non-null it receives the [B, heads, L, L] softmax map.
template <typename T>
Var<T> Attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, T scale,
                 const Var<T>& bias = Var<T>(),
                 std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr,
                 Tensor<T>* probabilities = nullptr);

// Single-direction GRU over axis 1 of x: [B, L, in] -> [B, L, hidden].
// Gate order (reset, update, new) with weights [3H, in] and [3H, H].
template <typename T>
Var<T> Gru(const Var<T>& x, const Var<T>& w_ih, const Var<T>& w_hh, const Var<T>& b_ih,
           const Var<T>& b_hh, bool reverse);

// Same-padded 2-D convolution over axes (1, 2) of channels-last x: [B, H, W, Cin].
// weight: [Cout, Cin, kh, kw] with odd kernel sizes; bias: [Cout] or undefined.
template <typename T>
Var<T> Conv2dSame(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

}  // namespace ops
}  // namespace uses2
