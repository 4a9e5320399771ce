// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Named parameter storage and the primitive layers built on it.
//
// Layers are plain structs of parameter indices plus dimensions. They are
// created against a ParameterSet (which owns the values) and evaluated against
// a Binding (which exposes the values as graph leaves for one forward pass).

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "uses2/autograd.h"

namespace uses2 {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool channel_module = false;
};

template <typename T>
class ParameterSet {
 public:
  std::size_t Add(std::string name, Tensor<T> value, bool channel_module) {
    if (index_.count(name)) throw Error("duplicate parameter name: " + name);
    index_.emplace(name, items_.size());
    items_.push_back({std::move(name), std::move(value), channel_module});
    return items_.size() - 1;
  }

  std::size_t size() const { return items_.size(); }
  Parameter<T>& operator[](std::size_t i) { return items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return items_[i]; }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  bool Contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t IndexOf(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }

  std::int64_t NumElements() const {
    std::int64_t n = 0;
    for (const auto& p : items_) n += p.value.numel();
    return n;
  }

  template <typename U>
  ParameterSet<U> Cast() const {
    ParameterSet<U> out;
    for (const auto& p : items_) out.Add(p.name, p.value.template Cast<U>(), p.channel_module);
    return out;
  }

 private:
  std::vector<Parameter<T>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Graph leaves for every parameter of a set, for one forward/backward pass.
template <typename T>
class Binding {
 public:
  using Predicate = std::function<bool(const Parameter<T>&)>;

  // `trainable` selects which leaves carry gradients; null means none do.
  explicit Binding(const ParameterSet<T>& params, const Predicate& trainable = nullptr) {
    leaves_.reserve(params.size());
    for (const auto& p : params) leaves_.emplace_back(p.value, trainable ? trainable(p) : false);
  }

  // Uses the given leaves directly, in parameter order.
  explicit Binding(std::vector<Var<T>> leaves) : leaves_(std::move(leaves)) {}

  const Var<T>& operator[](std::size_t i) const { return leaves_.at(i); }
  std::size_t size() const { return leaves_.size(); }

 private:
  std::vector<Var<T>> leaves_;
};

// Deterministic initializer. Distributions are derived from raw 64-bit draws so
// results do not depend on the standard library's distribution algorithms.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  double Uniform(double lo, double hi) {
    const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }
  double Normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0;
    while (u1 <= 0) u1 = Uniform(0, 1);
    const double u2 = Uniform(0, 1);
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  Tensor<T> UniformTensor(Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(Uniform(-bound, bound));
    return t;
  }
  // Normal with standard deviation `stddev`, resampled beyond two deviations.
  template <typename T>
  Tensor<T> TruncatedNormalTensor(Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      double v = Normal();
      while (std::abs(v) > 2.0) v = Normal();
      t[i] = static_cast<T>(v * stddev);
    }
    return t;
  }

 private:
  std::mt19937_64 rng_;
  double spare_ = 0;
  bool has_spare_ = false;
};

// Context passed to layer constructors.
template <typename T>
struct Builder {
  ParameterSet<T>& params;
  Initializer& init;
  bool channel_module = false;

  std::size_t Add(const std::string& name, Tensor<T> value) {
    return params.Add(name, std::move(value), channel_module);
  }
};

struct LinearRef {
  std::size_t weight = 0;
  std::size_t bias = 0;
  bool has_bias = true;
  std::int64_t in = 0;
  std::int64_t out = 0;

  template <typename T>
  static LinearRef Create(Builder<T>& b, const std::string& name, std::int64_t in, std::int64_t out,
                          bool bias = true);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x) const {
    return ops::Linear(x, p[weight], has_bias ? p[bias] : Var<T>());
  }
  std::int64_t NumParams() const { return in * out + (has_bias ? out : 0); }
};

struct LayerNormRef {
  std::size_t gamma = 0;
  std::size_t beta = 0;
  std::int64_t dim = 0;

  template <typename T>
  static LayerNormRef Create(Builder<T>& b, const std::string& name, std::int64_t dim);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x) const {
    return ops::LayerNorm(x, p[gamma], p[beta]);
  }
};

struct PreluRef {
  std::size_t slope = 0;

  template <typename T>
  static PreluRef Create(Builder<T>& b, const std::string& name);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x) const {
    return ops::Prelu(x, p[slope]);
  }
};

struct GruRef {
  std::size_t w_ih = 0, w_hh = 0, b_ih = 0, b_hh = 0;
  std::int64_t in = 0;
  std::int64_t hidden = 0;

  template <typename T>
  static GruRef Create(Builder<T>& b, const std::string& name, std::int64_t in, std::int64_t hidden);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x, bool reverse) const {
    return ops::Gru(x, p[w_ih], p[w_hh], p[b_ih], p[b_hh], reverse);
  }
};

// --- inline definitions ---------------------------------------------------

template <typename T>
LinearRef LinearRef::Create(Builder<T>& b, const std::string& name, std::int64_t in, std::int64_t out,
                            bool bias) {
  LinearRef r;
  r.in = in;
  r.out = out;
  r.has_bias = bias;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  r.weight = b.Add(name + ".weight", b.init.template UniformTensor<T>({out, in}, bound));
  if (bias) r.bias = b.Add(name + ".bias", b.init.template UniformTensor<T>({out}, bound));
  return r;
}

template <typename T>
LayerNormRef LayerNormRef::Create(Builder<T>& b, const std::string& name, std::int64_t dim) {
  LayerNormRef r;
  r.dim = dim;
  r.gamma = b.Add(name + ".weight", Tensor<T>({dim}, T(1)));
  r.beta = b.Add(name + ".bias", Tensor<T>({dim}, T(0)));
  return r;
}

template <typename T>
PreluRef PreluRef::Create(Builder<T>& b, const std::string& name) {
  PreluRef r;
  r.slope = b.Add(name + ".weight", Tensor<T>({1}, T(0.25)));
  return r;
}

template <typename T>
GruRef GruRef::Create(Builder<T>& b, const std::string& name, std::int64_t in, std::int64_t hidden) {
  GruRef r;
  r.in = in;
  r.hidden = hidden;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  r.w_ih = b.Add(name + ".weight_ih", b.init.template UniformTensor<T>({3 * hidden, in}, bound));
  r.w_hh = b.Add(name + ".weight_hh", b.init.template UniformTensor<T>({3 * hidden, hidden}, bound));
  r.b_ih = b.Add(name + ".bias_ih", b.init.template UniformTensor<T>({3 * hidden}, bound));
  r.b_hh = b.Add(name + ".bias_hh", b.init.template UniformTensor<T>({3 * hidden}, bound));
  return r;
}

}  // namespace uses2
