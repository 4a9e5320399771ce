// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Scale-invariant multi-resolution spectral L1 loss with a time-domain term.
//
// The estimate is first rescaled by beta = <e, r> / <e, e>, then
//   L = sum_w mean| |STFT_w(beta e)| - |STFT_w(r)| | + time_weight * mean|beta e - r|
// with Hann windows of w samples and hop w / 4.

#pragma once

#include <cstdint>
#include <vector>

#include "uses2/spectral_codec.h"

namespace uses2 {

struct LossConfig {
  std::vector<std::int64_t> fft_sizes{256, 512, 768, 1024};
  double time_weight = 0.5;

  void Validate() const;
};

// beta = <estimate, reference> / <estimate, estimate>; throws on a zero-energy estimate.
double OptimalScale(const Tensor<float>& estimate, const Tensor<float>& reference);

namespace ops {
// sqrt(re^2 + im^2 + eps) of [C, 2, F, T] planes -> [C, F, T].
template <typename T>
Var<T> Magnitude(const Var<T>& spec, T eps = T(1e-8));
}  // namespace ops

// Differentiable in `estimate`. Both are [C, L] (or any equal shapes with L last).
template <typename T>
Var<T> Loss(const Var<T>& estimate, const Var<T>& reference, const LossConfig& cfg);

float Loss(const Waveform& estimate, const Waveform& reference, const LossConfig& cfg);

}  // namespace uses2
