// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/objective.h"

#include <cmath>

namespace uses2 {

void LossConfig::Validate() const {
  if (fft_sizes.empty()) throw Error("loss: fft_sizes must not be empty");
  for (auto w : fft_sizes)
    if (w < 16) throw Error("loss: fft sizes must be at least 16, got " + std::to_string(w));
  if (!(time_weight >= 0)) throw Error("loss: time_weight must be non-negative");
}

double OptimalScale(const Tensor<float>& estimate, const Tensor<float>& reference) {
  if (estimate.shape() != reference.shape())
    throw Error("optimal scale: shape mismatch " + ShapeString(estimate.shape()) + " vs " +
                ShapeString(reference.shape()));
  double er = 0, ee = 0;
  for (std::int64_t i = 0; i < estimate.numel(); ++i) {
    er += static_cast<double>(estimate[i]) * reference[i];
    ee += static_cast<double>(estimate[i]) * estimate[i];
  }
  if (ee == 0) throw Error("optimal scale: zero-energy estimate");
  return er / ee;
}

namespace ops {

template <typename T>
Var<T> Magnitude(const Var<T>& spec, T eps) {
  if (spec.shape().size() != 4 || spec.dim(1) != 2)
    throw Error("Magnitude: expected [C, 2, F, T], got " + ShapeString(spec.shape()));
  const std::int64_t C = spec.dim(0), plane = spec.dim(2) * spec.dim(3);
  Tensor<T> out(Shape{C, spec.dim(2), spec.dim(3)});
  const T* s = spec.value().data();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < plane; ++i) {
      const T re = s[(2 * c) * plane + i], im = s[(2 * c + 1) * plane + i];
      out[c * plane + i] = std::sqrt(re * re + im * im + eps);
    }
  return MakeResult<T>(out, {spec}, [C, plane, out](Node<T>& self) {
    auto& g = self.inputs[0]->Grad();
    const T* s = self.inputs[0]->value.data();
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < plane; ++i) {
        const std::int64_t re = (2 * c) * plane + i, im = (2 * c + 1) * plane + i;
        const T d = self.grad[c * plane + i] / out[c * plane + i];
        g[re] += d * s[re];
        g[im] += d * s[im];
      }
  });
}

}  // namespace ops

template <typename T>
Var<T> Loss(const Var<T>& estimate, const Var<T>& reference, const LossConfig& cfg) {
  cfg.Validate();
  if (estimate.shape() != reference.shape())
    throw Error("loss: length mismatch " + ShapeString(estimate.shape()) + " vs " +
                ShapeString(reference.shape()));
  const std::int64_t L = estimate.dim(-1);
  Var<T> e = ops::Reshape(estimate, {estimate.numel() / L, L});
  Var<T> r = ops::Reshape(reference, {reference.numel() / L, L});
  Var<T> ee = ops::Dot(e, e);
  if (ee.value()[0] == T(0)) throw Error("loss: zero-energy estimate");
  Var<T> beta = ops::Divide(ops::Dot(e, r), ee);
  Var<T> scaled = ops::ScaleBy(e, beta);

  Var<T> total = ops::Scale(ops::Mean(ops::Abs(ops::Sub(scaled, r))), static_cast<T>(cfg.time_weight));
  for (auto w : cfg.fft_sizes) {
    const StftConfig sc{w, w / 4};
    Var<T> diff = ops::Sub(ops::Magnitude(ops::Stft(scaled, sc)), ops::Magnitude(ops::Stft(r, sc)));
    total = ops::Add(total, ops::Mean(ops::Abs(diff)));
  }
  return total;
}

float Loss(const Waveform& estimate, const Waveform& reference, const LossConfig& cfg) {
  if (estimate.rate_hz != reference.rate_hz) throw Error("loss: sampling rate mismatch");
  return Loss(Var<float>(estimate.samples), Var<float>(reference.samples), cfg).value()[0];
}

template Var<float> ops::Magnitude(const Var<float>&, float);
template Var<double> ops::Magnitude(const Var<double>&, double);
template Var<float> Loss(const Var<float>&, const Var<float>&, const LossConfig&);
template Var<double> Loss(const Var<double>&, const Var<double>&, const LossConfig&);

}  // namespace uses2
