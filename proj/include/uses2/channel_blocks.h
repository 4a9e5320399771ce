// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Channel modeling blocks. Features are [C, F, T, N]; every block maps this
// shape to itself and is equivariant to permutations of the channel axis.
//
//   TacBlock          transform, average over channels, concatenate.
//   ChannelAttention  softmax(Q K^T * scale) V between whole channels, where
//                     Q and K flatten each channel's F x T x H projection.
//   TattcBlock        TacBlock with the average replaced by ChannelAttention.
//   AttentionBlock    ChannelAttention alone, wrapped with projections.

#pragma once

#include <cstdint>
#include <string>

#include "uses2/nn.h"

namespace uses2 {

struct TacBlock {
  LinearRef transform, average, output;
  PreluRef act_transform, act_average, act_output;
  LayerNormRef norm;
  std::int64_t dim = 0, hidden = 0;
  bool residual = true;

  template <typename T>
  static TacBlock Create(Builder<T>& b, const std::string& name, std::int64_t dim, std::int64_t hidden,
                         bool residual = true);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x) const;
  std::int64_t NumParams() const;
  std::uint64_t Macs(const Shape& feature_shape) const;
};

struct ChannelAttention {
  enum class Scale { kHT2, kHFT };  // 1/sqrt(H*T^2) or 1/sqrt(H*F*T)

  LinearRef q, k, v, output;
  LayerNormRef norm_q, norm_k, norm_v, norm_output;
  std::int64_t dim = 0;  // H
  Scale scale = Scale::kHT2;

  template <typename T>
  static ChannelAttention Create(Builder<T>& b, const std::string& name, std::int64_t dim, Scale scale);
  // [C, F, T, H] -> [C, F, T, H]. `map`, if non-null, receives the [C, C]
  // attention weights.
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& y, Tensor<T>* map = nullptr) const;
  std::int64_t NumParams() const;
  std::uint64_t Macs(const Shape& feature_shape) const;
};

struct TattcBlock {
  LinearRef project, attended, output;
  PreluRef act_project, act_attended, act_output;
  ChannelAttention attention;
  LayerNormRef norm;
  std::int64_t dim = 0, hidden = 0;
  bool residual = true;

  template <typename T>
  static TattcBlock Create(Builder<T>& b, const std::string& name, std::int64_t dim, std::int64_t hidden,
                           ChannelAttention::Scale scale, bool residual = true);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x, Tensor<T>* map = nullptr) const;
  std::int64_t NumParams() const;
  std::uint64_t Macs(const Shape& feature_shape) const;
};

struct AttentionBlock {
  LinearRef project, output;
  PreluRef act_project, act_output;
  ChannelAttention attention;
  LayerNormRef norm;
  std::int64_t dim = 0, hidden = 0;

  template <typename T>
  static AttentionBlock Create(Builder<T>& b, const std::string& name, std::int64_t dim, std::int64_t hidden,
                               ChannelAttention::Scale scale);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x) const;
  std::int64_t NumParams() const;
  std::uint64_t Macs(const Shape& feature_shape) const;
};

}  // namespace uses2
