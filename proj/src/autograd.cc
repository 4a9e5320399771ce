// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/autograd.h"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace uses2 {

namespace {

thread_local std::uint64_t g_macs = 0;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> Vec(Tensor<T>& t) {
  return {t.data(), t.numel()};
}
template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> Vec(const Tensor<T>& t) {
  return {t.data(), t.numel()};
}

template <typename T>
bool Wants(const Node<T>& self, size_t i) {
  return self.inputs[i] && self.inputs[i]->requires_grad;
}

void CheckSameShape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw Error(std::string(op) + ": shape mismatch " + ShapeString(a) + " vs " +
                ShapeString(b));
}

template <typename T>
T Scalar(const Var<T>& v, const char* op) {
  if (v.numel() != 1) throw Error(std::string(op) + ": expected a one-element tensor");
  return v.value()[0];
}

}  // namespace

std::uint64_t MacCounter() { return g_macs; }
void ResetMacCounter() { g_macs = 0; }
void AddMacs(std::uint64_t macs) { g_macs += macs; }

template <typename T>
void Backward(const Var<T>& root) {
  if (!root.defined() || !root.requires_grad()) return;
  if (root.numel() != 1) throw Error("Backward: root must be a one-element tensor");
  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->Grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->grad.numel() == node->value.numel()) node->backward(*node);
  }
}

namespace ops {

template <typename T>
Var<T> Reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().Reshaped(std::move(shape));
  return MakeResult<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

namespace {

// Source offset for every destination element of a permutation.
std::vector<std::int64_t> PermuteIndex(const Shape& in, const std::vector<int>& axes, Shape* out) {
  const int rank = static_cast<int>(in.size());
  if (static_cast<int>(axes.size()) != rank) throw Error("Permute: axes rank mismatch");
  std::vector<std::int64_t> in_stride(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in[i + 1];
  out->assign(rank, 0);
  std::vector<std::int64_t> stride(rank);
  for (int i = 0; i < rank; ++i) {
    (*out)[i] = in.at(axes[i]);
    stride[i] = in_stride[axes[i]];
  }
  const std::int64_t n = NumElements(*out);
  std::vector<std::int64_t> index(n);
  std::vector<std::int64_t> counter(rank, 0);
  std::int64_t src = 0;
  for (std::int64_t d = 0; d < n; ++d) {
    index[d] = src;
    for (int a = rank - 1; a >= 0; --a) {
      src += stride[a];
      if (++counter[a] < (*out)[a]) break;
      src -= stride[a] * (*out)[a];
      counter[a] = 0;
    }
  }
  return index;
}

}  // namespace

template <typename T>
Var<T> Permute(const Var<T>& x, const std::vector<int>& axes) {
  Shape out_shape;
  auto index = std::make_shared<std::vector<std::int64_t>>(PermuteIndex(x.shape(), axes, &out_shape));
  auto out = Tensor<T>::Uninitialized(out_shape);
  const T* src = x.value().data();
  for (std::int64_t d = 0; d < out.numel(); ++d) out[d] = src[(*index)[d]];
  return MakeResult<T>(std::move(out), {x}, [index](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    for (std::int64_t d = 0; d < self.grad.numel(); ++d) g[(*index)[d]] += self.grad[d];
  });
}

template <typename T>
Var<T> Add(const Var<T>& a, const Var<T>& b) {
  CheckSameShape(a.shape(), b.shape(), "Add");
  auto out = Tensor<T>::Uninitialized(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return MakeResult<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (size_t k = 0; k < 2; ++k)
      if (Wants(self, k)) {
        auto& g = self.inputs[k]->Grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
      }
  });
}

template <typename T>
Var<T> Sub(const Var<T>& a, const Var<T>& b) {
  CheckSameShape(a.shape(), b.shape(), "Sub");
  auto out = Tensor<T>::Uninitialized(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return MakeResult<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (Wants(self, 0)) {
      auto& g = self.inputs[0]->Grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (Wants(self, 1)) {
      auto& g = self.inputs[1]->Grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> Mul(const Var<T>& a, const Var<T>& b) {
  CheckSameShape(a.shape(), b.shape(), "Mul");
  auto out = Tensor<T>::Uninitialized(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return MakeResult<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (Wants(self, 0)) {
      auto& g = self.inputs[0]->Grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (Wants(self, 1)) {
      auto& g = self.inputs[1]->Grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> Scale(const Var<T>& x, T s) {
  auto out = Tensor<T>::Uninitialized(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * s;
  return MakeResult<T>(std::move(out), {x}, [s](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Var<T> ScaleBy(const Var<T>& x, const Var<T>& s) {
  const T sv = Scalar(s, "ScaleBy");
  auto out = Tensor<T>::Uninitialized(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * sv;
  return MakeResult<T>(std::move(out), {x, s}, [sv](Node<T>& self) {
    if (Wants(self, 0)) {
      auto& g = self.inputs[0]->Grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * sv;
    }
    if (Wants(self, 1)) {
      const auto& xv = self.inputs[0]->value;
      T acc = 0;
      for (std::int64_t i = 0; i < xv.numel(); ++i) acc += self.grad[i] * xv[i];
      self.inputs[1]->Grad()[0] += acc;
    }
  });
}

template <typename T>
Var<T> Divide(const Var<T>& a, const Var<T>& b) {
  const T av = Scalar(a, "Divide");
  const T bv = Scalar(b, "Divide");
  if (bv == T(0)) throw Error("Divide: division by zero");
  Tensor<T> out(Shape{}, std::vector<T>{av / bv});
  return MakeResult<T>(std::move(out), {a, b}, [av, bv](Node<T>& self) {
    const T g = self.grad[0];
    if (Wants(self, 0)) self.inputs[0]->Grad()[0] += g / bv;
    if (Wants(self, 1)) self.inputs[1]->Grad()[0] -= g * av / (bv * bv);
  });
}

template <typename T>
Var<T> Dot(const Var<T>& a, const Var<T>& b) {
  if (a.numel() != b.numel()) throw Error("Dot: size mismatch");
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.value()[i]) * b.value()[i];
  return MakeResult<T>(Tensor<T>(Shape{}, std::vector<T>{static_cast<T>(acc)}), {a, b}, [](Node<T>& self) {
    const T g = self.grad[0];
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (Wants(self, 0)) {
      auto& ga = self.inputs[0]->Grad();
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += g * bv[i];
    }
    if (Wants(self, 1)) {
      auto& gb = self.inputs[1]->Grad();
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] += g * av[i];
    }
  });
}

template <typename T>
Var<T> Sum(const Var<T>& x) {
  double acc = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.value()[i];
  return MakeResult<T>(Tensor<T>(Shape{}, std::vector<T>{static_cast<T>(acc)}), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    const T s = self.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s;
  });
}

template <typename T>
Var<T> Mean(const Var<T>& x) {
  if (x.numel() == 0) throw Error("Mean: empty tensor");
  return Scale(Sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Var<T> Abs(const Var<T>& x) {
  auto out = Tensor<T>::Uninitialized(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(x.value()[i]);
  return MakeResult<T>(std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = self.inputs[0]->Grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += xv[i] > 0 ? self.grad[i] : (xv[i] < 0 ? -self.grad[i] : T(0));
  });
}

template <typename T>
Var<T> Relu(const Var<T>& x) {
  auto out = Tensor<T>::Uninitialized(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(x.value()[i], T(0));
  return MakeResult<T>(std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = self.inputs[0]->Grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (xv[i] > 0) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> Gelu(const Var<T>& x) {
  static constexpr T kInvSqrt2 = T(0.70710678118654752440);
  static constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  auto out = Tensor<T>::Uninitialized(x.shape());
  const auto xv = Vec<T>(x.value());
  Vec<T>(out) = T(0.5) * xv * (T(1) + (xv * kInvSqrt2).erf());
  return MakeResult<T>(std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = self.inputs[0]->Grad();
    const auto v = Vec<T>(xv);
    const auto cdf = T(0.5) * (T(1) + (v * kInvSqrt2).erf());
    Vec<T>(g) += Vec<T>(self.grad) * (cdf + v * kInvSqrt2Pi * (T(-0.5) * v.square()).exp());
  });
}

template <typename T>
Var<T> Prelu(const Var<T>& x, const Var<T>& slope) {
  const T a = Scalar(slope, "Prelu");
  auto out = Tensor<T>::Uninitialized(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const T v = x.value()[i];
    out[i] = v > 0 ? v : a * v;
  }
  return MakeResult<T>(std::move(out), {x, slope}, [a](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    if (Wants(self, 0)) {
      auto& g = self.inputs[0]->Grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += xv[i] > 0 ? self.grad[i] : a * self.grad[i];
    }
    if (Wants(self, 1)) {
      T acc = 0;
      for (std::int64_t i = 0; i < xv.numel(); ++i)
        if (xv[i] <= 0) acc += self.grad[i] * xv[i];
      self.inputs[1]->Grad()[0] += acc;
    }
  });
}

template <typename T>
Var<T> Linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (weight.value().rank() != 2) throw Error("Linear: weight must be rank 2");
  const std::int64_t out_dim = weight.dim(0);
  const std::int64_t in_dim = weight.dim(1);
  if (x.value().rank() < 1 || x.dim(-1) != in_dim)
    throw Error("Linear: input " + ShapeString(x.shape()) + " incompatible with weight " +
                ShapeString(weight.shape()));
  if (bias.defined() && bias.numel() != out_dim) throw Error("Linear: bias size mismatch");
  const std::int64_t rows = x.numel() / in_dim;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  auto out = Tensor<T>::Uninitialized(out_shape);
  ConstMatMap<T> X(x.value().data(), rows, in_dim);
  ConstMatMap<T> W(weight.value().data(), out_dim, in_dim);
  MatMap<T> Y(out.data(), rows, out_dim);
  Y.noalias() = X * W.transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.value().data(), out_dim);
    Y.rowwise() += b;
  }
  AddMacs(static_cast<std::uint64_t>(rows * in_dim * out_dim));
  return MakeResult<T>(std::move(out), {x, weight, bias}, [rows, in_dim, out_dim](Node<T>& self) {
    ConstMatMap<T> dY(self.grad.data(), rows, out_dim);
    if (Wants(self, 0)) {
      MatMap<T> dX(self.inputs[0]->Grad().data(), rows, in_dim);
      ConstMatMap<T> W(self.inputs[1]->value.data(), out_dim, in_dim);
      dX.noalias() += dY * W;
    }
    if (Wants(self, 1)) {
      MatMap<T> dW(self.inputs[1]->Grad().data(), out_dim, in_dim);
      ConstMatMap<T> X(self.inputs[0]->value.data(), rows, in_dim);
      dW.noalias() += dY.transpose() * X;
    }
    if (Wants(self, 2)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(self.inputs[2]->Grad().data(), out_dim);
      db += dY.colwise().sum();
    }
  });
}

template <typename T>
Var<T> LayerNorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) throw Error("LayerNorm: parameter size mismatch");
  const std::int64_t rows = x.numel() / d;
  auto out = Tensor<T>::Uninitialized(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::int64_t i = 0; i < d; ++i) {
      const T h = (row[i] - mean) * is;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return MakeResult<T>(std::move(out), {x, gamma, beta}, [d, rows, xhat, inv_std](Node<T>& self) {
    const T* dy = self.grad.data();
    const T* gv = self.inputs[1]->value.data();
    if (Wants(self, 1)) {
      auto& gg = self.inputs[1]->Grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < d; ++i) gg[i] += dy[r * d + i] * (*xhat)[r * d + i];
    }
    if (Wants(self, 2)) {
      auto& gb = self.inputs[2]->Grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < d; ++i) gb[i] += dy[r * d + i];
    }
    if (Wants(self, 0)) {
      auto& gx = self.inputs[0]->Grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        T mean_dh = 0, mean_dh_h = 0;
        for (std::int64_t i = 0; i < d; ++i) {
          const T dh = dy[r * d + i] * gv[i];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + i];
        }
        mean_dh /= static_cast<T>(d);
        mean_dh_h /= static_cast<T>(d);
        const T is = (*inv_std)[r];
        for (std::int64_t i = 0; i < d; ++i) {
          const T dh = dy[r * d + i] * gv[i];
          gx[r * d + i] += is * (dh - mean_dh - (*xhat)[r * d + i] * mean_dh_h);
        }
      }
    }
  });
}

template <typename T>
Var<T> Concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw Error("Concat: no inputs");
  const Shape& s0 = xs[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw Error("Concat: bad axis");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < rank; ++i) inner *= s0[i];
  std::vector<std::int64_t> widths;
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (static_cast<int>(s.size()) != rank) throw Error("Concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && s[i] != s0[i]) throw Error("Concat: shape mismatch " + ShapeString(s));
    widths.push_back(s[axis] * inner);
    out_shape[axis] += s[axis];
  }
  const std::int64_t total = out_shape[axis] * inner;
  auto out = Tensor<T>::Uninitialized(out_shape);
  std::int64_t col = 0;
  for (size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].value().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(src + o * widths[k], src + (o + 1) * widths[k], out.data() + o * total + col);
    col += widths[k];
  }
  return MakeResult<T>(std::move(out), xs, [outer, total, widths](Node<T>& self) {
    std::int64_t col = 0;
    for (size_t k = 0; k < widths.size(); ++k) {
      if (Wants(self, k)) {
        auto& g = self.inputs[k]->Grad();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < widths[k]; ++i)
            g[o * widths[k] + i] += self.grad[o * total + col + i];
      }
      col += widths[k];
    }
  });
}

template <typename T>
Var<T> Slice(const Var<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const Shape& s = x.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank || start < 0 || length < 0 || start + length > s[axis])
    throw Error("Slice: range out of bounds for " + ShapeString(s));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < rank; ++i) inner *= s[i];
  const std::int64_t src_w = s[axis] * inner, dst_w = length * inner, off = start * inner;
  Shape out_shape = s;
  out_shape[axis] = length;
  auto out = Tensor<T>::Uninitialized(out_shape);
  const T* src = x.value().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(src + o * src_w + off, src + o * src_w + off + dst_w, out.data() + o * dst_w);
  return MakeResult<T>(std::move(out), {x}, [outer, src_w, dst_w, off](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < dst_w; ++i) g[o * src_w + off + i] += self.grad[o * dst_w + i];
  });
}

template <typename T>
Var<T> Gather(const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> index, Shape out_shape) {
  if (static_cast<std::int64_t>(index->size()) != NumElements(out_shape))
    throw Error("Gather: index size does not match output shape");
  auto out = Tensor<T>::Uninitialized(out_shape);
  const T* src = x.value().data();
  const std::int64_t n = x.numel();
  for (std::int64_t d = 0; d < out.numel(); ++d) {
    const std::int64_t i = (*index)[d];
    if (i >= n) throw Error("Gather: index out of range");
    out[d] = i >= 0 ? src[i] : T(0);
  }
  return MakeResult<T>(std::move(out), {x}, [index](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    for (std::int64_t d = 0; d < self.grad.numel(); ++d) {
      const std::int64_t i = (*index)[d];
      if (i >= 0) g[i] += self.grad[d];
    }
  });
}

template <typename T>
Var<T> GatherRows(const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> index) {
  const std::int64_t D = x.dim(-1);
  const std::int64_t rows = x.numel() / D;
  const std::int64_t n = static_cast<std::int64_t>(index->size());
  Tensor<T> out(Shape{n, D});
  const T* src = x.value().data();
  for (std::int64_t r = 0; r < n; ++r) {
    const std::int64_t i = (*index)[r];
    if (i >= rows) throw Error("GatherRows: index out of range");
    if (i >= 0) std::copy(src + i * D, src + (i + 1) * D, out.data() + r * D);
  }
  return MakeResult<T>(std::move(out), {x}, [index, D](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    for (size_t r = 0; r < index->size(); ++r) {
      const std::int64_t i = (*index)[r];
      if (i < 0) continue;
      const T* src = self.grad.data() + r * D;
      T* dst = g.data() + i * D;
      for (std::int64_t k = 0; k < D; ++k) dst[k] += src[k];
    }
  });
}

template <typename T>
Var<T> MeanLeading(const Var<T>& x) {
  const std::int64_t n = x.dim(0);
  const std::int64_t inner = x.numel() / n;
  Shape out_shape = x.shape();
  out_shape[0] = 1;
  Tensor<T> out(out_shape);
  for (std::int64_t c = 0; c < n; ++c)
    for (std::int64_t i = 0; i < inner; ++i) out[i] += x.value()[c * inner + i];
  for (std::int64_t i = 0; i < inner; ++i) out[i] /= static_cast<T>(n);
  return MakeResult<T>(std::move(out), {x}, [n, inner](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    const T s = T(1) / static_cast<T>(n);
    for (std::int64_t c = 0; c < n; ++c)
      for (std::int64_t i = 0; i < inner; ++i) g[c * inner + i] += self.grad[i] * s;
  });
}

template <typename T>
Var<T> RepeatLeading(const Var<T>& x, std::int64_t n) {
  if (x.dim(0) != 1) throw Error("RepeatLeading: leading axis must be 1");
  const std::int64_t inner = x.numel();
  Shape out_shape = x.shape();
  out_shape[0] = n;
  auto out = Tensor<T>::Uninitialized(out_shape);
  for (std::int64_t c = 0; c < n; ++c)
    std::copy(x.value().data(), x.value().data() + inner, out.data() + c * inner);
  return MakeResult<T>(std::move(out), {x}, [n, inner](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    for (std::int64_t c = 0; c < n; ++c)
      for (std::int64_t i = 0; i < inner; ++i) g[i] += self.grad[c * inner + i];
  });
}

template <typename T>
Var<T> Attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, T scale,
                 const Var<T>& bias, std::shared_ptr<const std::vector<std::uint8_t>> mask,
                 Tensor<T>* probabilities) {
  CheckSameShape(q.shape(), k.shape(), "Attention");
  CheckSameShape(q.shape(), v.shape(), "Attention");
  if (q.value().rank() != 3) throw Error("Attention: expected [B, L, D] inputs");
  const std::int64_t B = q.dim(0), L = q.dim(1), D = q.dim(2);
  if (heads < 1 || D % heads != 0) throw Error("Attention: heads must divide the embedding size");
  const std::int64_t dh = D / heads;
  if (bias.defined() && bias.shape() != Shape{heads, L, L})
    throw Error("Attention: bias must be [heads, L, L], got " + ShapeString(bias.shape()));
  std::int64_t groups = 0;
  if (mask) {
    if (mask->size() % static_cast<size_t>(L * L) != 0) throw Error("Attention: bad mask size");
    groups = static_cast<std::int64_t>(mask->size()) / (L * L);
  }
  const bool keep = q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                    (bias.defined() && bias.requires_grad());
  auto probs = std::make_shared<std::vector<T>>();
  if (keep || probabilities) probs->resize(static_cast<size_t>(B * heads * L * L));
  auto out = Tensor<T>::Uninitialized(q.shape());
  RowMat<T> S(L, L);
  for (std::int64_t b = 0; b < B; ++b) {
    const std::uint8_t* m = mask ? mask->data() + (b % groups) * L * L : nullptr;
    for (std::int64_t h = 0; h < heads; ++h) {
      const std::int64_t off = b * L * D + h * dh;
      ConstStridedMap<T> Q(q.value().data() + off, L, dh, Eigen::OuterStride<>(D));
      ConstStridedMap<T> K(k.value().data() + off, L, dh, Eigen::OuterStride<>(D));
      ConstStridedMap<T> V(v.value().data() + off, L, dh, Eigen::OuterStride<>(D));
      StridedMap<T> O(out.data() + off, L, dh, Eigen::OuterStride<>(D));
      S.noalias() = scale * (Q * K.transpose());
      if (bias.defined()) S += ConstMatMap<T>(bias.value().data() + h * L * L, L, L);
      if (m) {
        for (std::int64_t i = 0; i < L * L; ++i)
          if (m[i]) S.data()[i] = -std::numeric_limits<T>::infinity();
      }
      for (std::int64_t i = 0; i < L; ++i) S.row(i) = (S.row(i).array() - S.row(i).maxCoeff()).exp();
      if (m) {
        for (std::int64_t i = 0; i < L * L; ++i)
          if (m[i]) S.data()[i] = T(0);
      }
      S.array().colwise() /= S.rowwise().sum().array();
      O.noalias() = S * V;
      if (!probs->empty()) MatMap<T>(probs->data() + (b * heads + h) * L * L, L, L) = S;
    }
  }
  AddMacs(static_cast<std::uint64_t>(2 * B * L * L * D));
  if (probabilities) *probabilities = Tensor<T>(Shape{B, heads, L, L}, *probs);
  if (!keep) return Var<T>(std::move(out));
  return MakeResult<T>(std::move(out), {q, k, v, bias}, [B, L, D, dh, heads, scale, probs](Node<T>& self) {
    const bool wq = Wants(self, 0), wk = Wants(self, 1), wv = Wants(self, 2), wb = Wants(self, 3);
    T* gq = wq ? self.inputs[0]->Grad().data() : nullptr;
    T* gk = wk ? self.inputs[1]->Grad().data() : nullptr;
    T* gv = wv ? self.inputs[2]->Grad().data() : nullptr;
    T* gb = wb ? self.inputs[3]->Grad().data() : nullptr;
    RowMat<T> dP(L, L);
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t off = b * L * D + h * dh;
        ConstStridedMap<T> Q(self.inputs[0]->value.data() + off, L, dh, Eigen::OuterStride<>(D));
        ConstStridedMap<T> K(self.inputs[1]->value.data() + off, L, dh, Eigen::OuterStride<>(D));
        ConstStridedMap<T> V(self.inputs[2]->value.data() + off, L, dh, Eigen::OuterStride<>(D));
        ConstStridedMap<T> dO(self.grad.data() + off, L, dh, Eigen::OuterStride<>(D));
        ConstMatMap<T> P(probs->data() + (b * heads + h) * L * L, L, L);
        if (wv) StridedMap<T>(gv + off, L, dh, Eigen::OuterStride<>(D)).noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        for (std::int64_t i = 0; i < L; ++i) {
          const T dot = P.row(i).dot(dP.row(i));
          for (std::int64_t j = 0; j < L; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot);
        }
        // dP now holds d(logits).
        if (wb) MatMap<T>(gb + h * L * L, L, L) += dP;
        if (wq) StridedMap<T>(gq + off, L, dh, Eigen::OuterStride<>(D)).noalias() += scale * (dP * K);
        if (wk) StridedMap<T>(gk + off, L, dh, Eigen::OuterStride<>(D)).noalias() += scale * (dP.transpose() * Q);
      }
    }
  });
}

template <typename T>
Var<T> Gru(const Var<T>& x, const Var<T>& w_ih, const Var<T>& w_hh, const Var<T>& b_ih,
           const Var<T>& b_hh, bool reverse) {
  if (x.value().rank() != 3) throw Error("Gru: expected [B, L, in] input");
  const std::int64_t B = x.dim(0), L = x.dim(1), I = x.dim(2);
  const std::int64_t H = w_hh.dim(1);
  if (w_ih.shape() != Shape{3 * H, I} || w_hh.shape() != Shape{3 * H, H} || b_ih.numel() != 3 * H ||
      b_hh.numel() != 3 * H)
    throw Error("Gru: parameter shapes inconsistent with input " + ShapeString(x.shape()));
  // Input projections for all steps at once: [B*L, 3H].
  auto gx = std::make_shared<RowMat<T>>(B * L, 3 * H);
  {
    ConstMatMap<T> X(x.value().data(), B * L, I);
    ConstMatMap<T> W(w_ih.value().data(), 3 * H, I);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bi(b_ih.value().data(), 3 * H);
    gx->noalias() = X * W.transpose();
    gx->rowwise() += bi;
  }
  const bool keep = x.requires_grad() || w_ih.requires_grad() || w_hh.requires_grad() ||
                    b_ih.requires_grad() || b_hh.requires_grad();
  // Per step: r, z, n, (W_hn h + b_hn) and the previous state, each [B, H].
  auto cache = std::make_shared<std::vector<T>>(keep ? static_cast<size_t>(L * 5 * B * H) : 0);
  auto out = Tensor<T>::Uninitialized(Shape{B, L, H});
  ConstMatMap<T> Whh(w_hh.value().data(), 3 * H, H);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bh(b_hh.value().data(), 3 * H);
  RowMat<T> h = RowMat<T>::Zero(B, H);
  RowMat<T> gh(B, 3 * H), R(B, H), Z(B, H), N(B, H);
  for (std::int64_t s = 0; s < L; ++s) {
    const std::int64_t t = reverse ? L - 1 - s : s;
    gh.noalias() = h * Whh.transpose();
    gh.rowwise() += bh;
    T* c = keep ? cache->data() + s * 5 * B * H : nullptr;
    ConstStridedMap<T> GX(gx->data() + t * 3 * H, B, 3 * H, Eigen::OuterStride<>(L * 3 * H));
    R = (GX.leftCols(H) + gh.leftCols(H)).array().logistic();
    Z = (GX.middleCols(H, H) + gh.middleCols(H, H)).array().logistic();
    N = (GX.rightCols(H).array() + R.array() * gh.rightCols(H).array()).tanh();
    if (keep) {
      T* c = cache->data() + s * 5 * B * H;
      MatMap<T>(c, B, H) = R;
      MatMap<T>(c + B * H, B, H) = Z;
      MatMap<T>(c + 2 * B * H, B, H) = N;
      MatMap<T>(c + 3 * B * H, B, H) = gh.rightCols(H);
      MatMap<T>(c + 4 * B * H, B, H) = h;
    }
    h = ((T(1) - Z.array()) * N.array() + Z.array() * h.array()).matrix();
    StridedMap<T>(out.data() + t * H, B, H, Eigen::OuterStride<>(L * H)) = h;
  }
  AddMacs(static_cast<std::uint64_t>(B * L * 3 * H * (I + H)));
  if (!keep) return Var<T>(std::move(out));
  return MakeResult<T>(std::move(out), {x, w_ih, w_hh, b_ih, b_hh},
                       [B, L, I, H, reverse, cache](Node<T>& self) {
    ConstMatMap<T> Whh(self.inputs[2]->value.data(), 3 * H, H);
    RowMat<T> dgx(B * L, 3 * H);
    RowMat<T> dgh(B, 3 * H);
    RowMat<T> dh_carry = RowMat<T>::Zero(B, H);
    RowMat<T> dWhh = RowMat<T>::Zero(3 * H, H);
    Eigen::Matrix<T, 1, Eigen::Dynamic> dbh = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(3 * H);
    for (std::int64_t s = L - 1; s >= 0; --s) {
      const std::int64_t t = reverse ? L - 1 - s : s;
      const T* c = cache->data() + s * 5 * B * H;
      for (std::int64_t b = 0; b < B; ++b) {
        const T* dy = self.grad.data() + (b * L + t) * H;
        T* dx = dgx.data() + (b * L + t) * 3 * H;
        for (std::int64_t j = 0; j < H; ++j) {
          const size_t o = static_cast<size_t>(b * H + j);
          const T r = c[o], z = c[B * H + o], n = c[2 * B * H + o], hn = c[3 * B * H + o],
                  prev = c[4 * B * H + o];
          const T dh = dy[j] + dh_carry(b, j);
          const T dn = dh * (T(1) - z);
          const T dz = dh * (prev - n);
          const T dpre_n = dn * (T(1) - n * n);
          const T dr = dpre_n * hn;
          const T dpre_r = dr * r * (T(1) - r);
          const T dpre_z = dz * z * (T(1) - z);
          dx[j] = dpre_r;
          dx[H + j] = dpre_z;
          dx[2 * H + j] = dpre_n;
          dgh(b, j) = dpre_r;
          dgh(b, H + j) = dpre_z;
          dgh(b, 2 * H + j) = dpre_n * r;
          dh_carry(b, j) = dh * z;
        }
      }
      dh_carry.noalias() += dgh * Whh;
      ConstMatMap<T> prev(c + 4 * B * H, B, H);
      dWhh.noalias() += dgh.transpose() * prev;
      dbh += dgh.colwise().sum();
    }
    if (Wants(self, 0)) {
      MatMap<T> dX(self.inputs[0]->Grad().data(), B * L, I);
      ConstMatMap<T> Wih(self.inputs[1]->value.data(), 3 * H, I);
      dX.noalias() += dgx * Wih;
    }
    if (Wants(self, 1)) {
      MatMap<T> dW(self.inputs[1]->Grad().data(), 3 * H, I);
      ConstMatMap<T> X(self.inputs[0]->value.data(), B * L, I);
      dW.noalias() += dgx.transpose() * X;
    }
    if (Wants(self, 2)) MatMap<T>(self.inputs[2]->Grad().data(), 3 * H, H) += dWhh;
    if (Wants(self, 3)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(self.inputs[3]->Grad().data(), 3 * H);
      db += dgx.colwise().sum();
    }
    if (Wants(self, 4)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(self.inputs[4]->Grad().data(), 3 * H);
      db += dbh;
    }
  });
}

namespace {

// Copies the (da, db)-shifted input into `dst` ([B*H*W, C]), zero outside.
template <typename T>
void ShiftCopy(const T* x, T* dst, std::int64_t B, std::int64_t Hh, std::int64_t Ww, std::int64_t C,
               std::int64_t da, std::int64_t db) {
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < Hh; ++i) {
      const std::int64_t si = i + da;
      T* row = dst + ((b * Hh + i) * Ww) * C;
      if (si < 0 || si >= Hh) {
        std::fill(row, row + Ww * C, T(0));
        continue;
      }
      for (std::int64_t j = 0; j < Ww; ++j) {
        const std::int64_t sj = j + db;
        T* d = row + j * C;
        if (sj < 0 || sj >= Ww)
          std::fill(d, d + C, T(0));
        else
          std::copy(x + ((b * Hh + si) * Ww + sj) * C, x + ((b * Hh + si) * Ww + sj + 1) * C, d);
      }
    }
}

}  // namespace

template <typename T>
Var<T> Conv2dSame(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (x.value().rank() != 4 || weight.value().rank() != 4)
    throw Error("Conv2dSame: expected rank-4 input and weight");
  const std::int64_t B = x.dim(0), Hh = x.dim(1), Ww = x.dim(2), Cin = x.dim(3);
  const std::int64_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Cin) throw Error("Conv2dSame: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw Error("Conv2dSame: kernel sizes must be odd");
  if (bias.defined() && bias.numel() != Cout) throw Error("Conv2dSame: bias size mismatch");
  const std::int64_t P = B * Hh * Ww;
  // Per-tap weight matrices [kh*kw][Cout, Cin].
  auto taps = std::make_shared<std::vector<RowMat<T>>>(kh * kw, RowMat<T>(Cout, Cin));
  for (std::int64_t o = 0; o < Cout; ++o)
    for (std::int64_t i = 0; i < Cin; ++i)
      for (std::int64_t a = 0; a < kh; ++a)
        for (std::int64_t c = 0; c < kw; ++c)
          (*taps)[a * kw + c](o, i) = weight.value()[((o * Cin + i) * kh + a) * kw + c];
  Tensor<T> out(Shape{B, Hh, Ww, Cout});
  MatMap<T> Y(out.data(), P, Cout);
  RowMat<T> shifted(P, Cin);
  for (std::int64_t a = 0; a < kh; ++a)
    for (std::int64_t c = 0; c < kw; ++c) {
      ShiftCopy(x.value().data(), shifted.data(), B, Hh, Ww, Cin, a - kh / 2, c - kw / 2);
      Y.noalias() += shifted * (*taps)[a * kw + c].transpose();
    }
  if (bias.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data(), Cout);
  AddMacs(static_cast<std::uint64_t>(P * Cin * Cout * kh * kw));
  return MakeResult<T>(std::move(out), {x, weight, bias}, [=](Node<T>& self) {
    ConstMatMap<T> dY(self.grad.data(), P, Cout);
    RowMat<T> shifted(P, Cin);
    RowMat<T> dshift(P, Cin);
    for (std::int64_t a = 0; a < kh; ++a)
      for (std::int64_t c = 0; c < kw; ++c) {
        const std::int64_t da = a - kh / 2, db = c - kw / 2;
        if (Wants(self, 1)) {
          ShiftCopy(self.inputs[0]->value.data(), shifted.data(), B, Hh, Ww, Cin, da, db);
          RowMat<T> dW = dY.transpose() * shifted;
          auto& gw = self.inputs[1]->Grad();
          for (std::int64_t o = 0; o < Cout; ++o)
            for (std::int64_t i = 0; i < Cin; ++i) gw[((o * Cin + i) * kh + a) * kw + c] += dW(o, i);
        }
        if (Wants(self, 0)) {
          dshift.noalias() = dY * (*taps)[a * kw + c];
          // Scatter back: shifted[b,i,j] came from x[b, i+da, j+db].
          auto& gx = self.inputs[0]->Grad();
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < Hh; ++i) {
              const std::int64_t si = i + da;
              if (si < 0 || si >= Hh) continue;
              for (std::int64_t j = 0; j < Ww; ++j) {
                const std::int64_t sj = j + db;
                if (sj < 0 || sj >= Ww) continue;
                const T* src = dshift.data() + ((b * Hh + i) * Ww + j) * Cin;
                T* dst = gx.data() + ((b * Hh + si) * Ww + sj) * Cin;
                for (std::int64_t k = 0; k < Cin; ++k) dst[k] += src[k];
              }
            }
        }
      }
    if (Wants(self, 2)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(self.inputs[2]->Grad().data(), Cout);
      db += dY.colwise().sum();
    }
  });
}

#define USES2_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> Reshape(const Var<T>&, Shape);                                                  \
  template Var<T> Permute(const Var<T>&, const std::vector<int>&);                                \
  template Var<T> Add(const Var<T>&, const Var<T>&);                                              \
  template Var<T> Sub(const Var<T>&, const Var<T>&);                                              \
  template Var<T> Mul(const Var<T>&, const Var<T>&);                                              \
  template Var<T> Scale(const Var<T>&, T);                                                        \
  template Var<T> ScaleBy(const Var<T>&, const Var<T>&);                                          \
  template Var<T> Divide(const Var<T>&, const Var<T>&);                                           \
  template Var<T> Dot(const Var<T>&, const Var<T>&);                                              \
  template Var<T> Sum(const Var<T>&);                                                             \
  template Var<T> Mean(const Var<T>&);                                                            \
  template Var<T> Abs(const Var<T>&);                                                             \
  template Var<T> Relu(const Var<T>&);                                                            \
  template Var<T> Gelu(const Var<T>&);                                                            \
  template Var<T> Prelu(const Var<T>&, const Var<T>&);                                            \
  template Var<T> Linear(const Var<T>&, const Var<T>&, const Var<T>&);                            \
  template Var<T> LayerNorm(const Var<T>&, const Var<T>&, const Var<T>&, T);                      \
  template Var<T> Concat(const std::vector<Var<T>>&, int);                                        \
  template Var<T> Slice(const Var<T>&, int, std::int64_t, std::int64_t);                          \
  template Var<T> Gather(const Var<T>&, std::shared_ptr<const std::vector<std::int64_t>>, Shape); \
  template Var<T> GatherRows(const Var<T>&, std::shared_ptr<const std::vector<std::int64_t>>);    \
  template Var<T> MeanLeading(const Var<T>&);                                                     \
  template Var<T> RepeatLeading(const Var<T>&, std::int64_t);                                     \
  template Var<T> Attention(const Var<T>&, const Var<T>&, const Var<T>&, int, T, const Var<T>&,   \
                            std::shared_ptr<const std::vector<std::uint8_t>>, Tensor<T>*);        \
  template Var<T> Gru(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,  \
                      bool);                                                                      \
  template Var<T> Conv2dSame(const Var<T>&, const Var<T>&, const Var<T>&);

USES2_INSTANTIATE_OPS(float)
USES2_INSTANTIATE_OPS(double)

}  // namespace ops

template void Backward(const Var<float>&);
template void Backward(const Var<double>&);

}  // namespace uses2
