// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Time-frequency modeling layers. All layers act on channels-last features
// [C, F, T, N] and hold no parameter whose shape depends on C, F or T.
//
//  * WindowAttentionLayer: self-attention inside non-overlapping W_F x W_T
//    tiles (optionally shifted by half a tile) with a learned 2-D relative
//    position bias, followed by a GELU feed-forward block.
//  * PathTransformerLayer: self-attention along one axis (frequency within a
//    frame, or time within a bin) followed by a bidirectional GRU
//    feed-forward block.
//  * MemoryTokens: learned frames prepended along time so that consecutive
//    segments of a long input can share state.

#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "uses2/nn.h"

namespace uses2 {

struct WindowSpec {
  std::int64_t win_f = 8;
  std::int64_t win_t = 8;
  bool shifted = false;

  std::int64_t shift_f() const { return shifted ? win_f / 2 : 0; }
  std::int64_t shift_t() const { return shifted ? win_t / 2 : 0; }
  std::int64_t tokens() const { return win_f * win_t; }
};

// Everything needed to undo a partition ("padding record").
struct WindowPlan {
  WindowSpec spec;
  std::int64_t channels = 0, freq = 0, time = 0, dim = 0;
  std::int64_t padded_f = 0, padded_t = 0;
  std::int64_t windows_f = 0, windows_t = 0;
  // Window token -> row of the [C*F*T, N] feature (-1 for zero padding).
  std::shared_ptr<const std::vector<std::int64_t>> token_source;
  // Feature row -> window token row.
  std::shared_ptr<const std::vector<std::int64_t>> token_target;
  // [windows_f * windows_t, L, L]; nonzero where two tokens of a shifted
  // window come from regions that were not adjacent before the cyclic shift.
  std::shared_ptr<const std::vector<std::uint8_t>> mask;

  std::int64_t windows_per_channel() const { return windows_f * windows_t; }
  std::int64_t num_windows() const { return channels * windows_per_channel(); }
};

WindowPlan PlanWindows(const Shape& feature_shape, const WindowSpec& spec);

// [C, F, T, N] -> [B_w, W_F * W_T, N]; windows ordered (channel, f, t).
template <typename T>
Var<T> PartitionWindows(const Var<T>& feature, const WindowPlan& plan);
// Exact inverse: drops padding and reverts the shift.
template <typename T>
Var<T> MergeWindows(const Var<T>& windows, const WindowPlan& plan);

// Token-pair offsets to entries of a [heads, 2W_F-1, 2W_T-1] bias table,
// as flat indices of a [heads, L, L] gather.
std::shared_ptr<const std::vector<std::int64_t>> RelativeBiasIndex(const WindowSpec& spec, int heads);

struct WindowAttentionLayer {
  WindowSpec spec;
  int heads = 4;
  std::int64_t dim = 0;
  std::int64_t ffn_dim = 0;
  LayerNormRef norm1;
  LinearRef q, k, v, proj;
  std::size_t rel_bias = 0;  // [heads, 2W_F-1, 2W_T-1]
  LayerNormRef norm2;
  LinearRef fc1, fc2;

  template <typename T>
  static WindowAttentionLayer Create(Builder<T>& b, const std::string& name, std::int64_t dim, int heads,
                                     const WindowSpec& spec, std::int64_t ffn_dim);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x) const;

  std::int64_t NumParams() const;
  std::uint64_t Macs(const Shape& feature_shape) const;
};

struct PathTransformerLayer {
  enum class Axis { kFrequency, kTime };

  Axis axis = Axis::kTime;
  int heads = 4;
  std::int64_t dim = 0;
  std::int64_t hidden = 0;  // per GRU direction
  LayerNormRef norm1;
  LinearRef q, k, v, proj;
  LayerNormRef norm2;
  GruRef gru_fwd, gru_bwd;
  LinearRef out;

  template <typename T>
  static PathTransformerLayer Create(Builder<T>& b, const std::string& name, Axis axis, std::int64_t dim,
                                     int heads, std::int64_t hidden);
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& x) const;

  std::int64_t NumParams() const;
  std::uint64_t Macs(const Shape& feature_shape) const;
};

struct MemoryTokens {
  std::size_t tokens = 0;  // [1, N, 1, G]
  std::int64_t dim = 0;
  std::int64_t group = 0;

  template <typename T>
  static MemoryTokens Create(Builder<T>& b, const std::string& name, std::int64_t dim, std::int64_t group);
  std::int64_t NumParams() const { return dim * group; }
};

// Prepends G frames: the learned tokens when `carry` is undefined, else the
// carried state [1, N, 1, G]. Broadcast over channels and frequency.
template <typename T>
Var<T> AttachMemory(const Binding<T>& p, const MemoryTokens& mem, const Var<T>& feature, const Var<T>& carry);
// Splits off the G leading frames. The new state is their mean over channels
// and frequency, shaped [1, N, 1, G].
template <typename T>
std::pair<Var<T>, Var<T>> DetachMemory(const Var<T>& feature, std::int64_t group);

}  // namespace uses2
