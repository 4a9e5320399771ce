// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Sampling-rate independent STFT front end and the convolutional
// encoder/decoder between spectra and T-F embeddings.
//
// Analysis and synthesis use a 32 ms periodic Hann window with a 16 ms hop at
// every rate, so the number of frames for a given duration, and the spacing
// of frequency bins in Hz, do not depend on the sampling rate.

#pragma once

#include <cstdint>

#include "uses2/nn.h"

namespace uses2 {

struct Waveform {
  Tensor<float> samples;  // [channels, length]
  int rate_hz = 0;

  std::int64_t channels() const { return samples.dim(0); }
  std::int64_t length() const { return samples.dim(1); }
  // Throws unless shape is [C >= 1, L >= 1], rate is positive and samples finite.
  void Validate() const;
};

struct StftConfig {
  std::int64_t fft_size = 0;
  std::int64_t hop = 0;

  static constexpr int kWindowMs = 32;
  static constexpr int kHopMs = 16;

  // 32 ms / 16 ms framing; throws if the window is not a whole number of samples.
  static StftConfig ForRate(int rate_hz);
  std::int64_t bins() const { return fft_size / 2 + 1; }
  std::int64_t Frames(std::int64_t length) const { return length / hop + 1; }
};

// Complex spectrum as real planes: [channels, 2, F, T], plane 0 real, 1 imaginary.
struct Spectrum {
  Tensor<float> planes;
  int rate_hz = 0;

  std::int64_t channels() const { return planes.dim(0); }
  std::int64_t bins() const { return planes.dim(2); }
  std::int64_t frames() const { return planes.dim(3); }
};

Spectrum Stft(const Waveform& w);
Waveform Istft(const Spectrum& s, std::int64_t out_length);

// Centered STFT of [C, L] signals with reflection padding of fft_size/2.
template <typename T>
Tensor<T> StftForward(const Tensor<T>& wave, const StftConfig& cfg);
// Overlap-add inverse normalized by the squared-window envelope.
template <typename T>
Tensor<T> IstftForward(const Tensor<T>& spec, const StftConfig& cfg, std::int64_t length);
// Adjoints (transposes) of the two linear maps above.
template <typename T>
Tensor<T> StftAdjoint(const Tensor<T>& grad_spec, const StftConfig& cfg, std::int64_t length);
template <typename T>
Tensor<T> IstftAdjoint(const Tensor<T>& grad_wave, const StftConfig& cfg, std::int64_t frames);

namespace ops {
template <typename T>
Var<T> Stft(const Var<T>& wave, const StftConfig& cfg);
template <typename T>
Var<T> Istft(const Var<T>& spec, const StftConfig& cfg, std::int64_t length);
}  // namespace ops

// Conv (3x3, 2 -> N) -> LayerNorm over N -> conv (1x1, N -> N). Channels are
// treated as a batch axis.
struct SpectralEncoder {
  std::size_t conv_in_weight = 0, conv_in_bias = 0;
  LayerNormRef norm;
  std::size_t conv_out_weight = 0, conv_out_bias = 0;
  std::int64_t embed_dim = 0;

  template <typename T>
  static SpectralEncoder Create(Builder<T>& b, const std::string& name, std::int64_t embed_dim);
  // [C, 2, F, T] -> [C, F, T, N]
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& spec) const;
  std::int64_t NumParams() const;
};

// PReLU -> pointwise conv (N -> N) -> 3x3 transposed conv (N -> 2).
struct SpectralDecoder {
  PreluRef act;
  std::size_t pointwise_weight = 0, pointwise_bias = 0;
  std::size_t trconv_weight = 0, trconv_bias = 0;  // [N, 2, 3, 3], [2]
  std::int64_t embed_dim = 0;

  template <typename T>
  static SpectralDecoder Create(Builder<T>& b, const std::string& name, std::int64_t embed_dim);
  // [1, F, T, N] -> [1, 2, F, T]; multi-channel input is rejected.
  template <typename T>
  Var<T> operator()(const Binding<T>& p, const Var<T>& feature) const;
  std::int64_t NumParams() const;
};

}  // namespace uses2
