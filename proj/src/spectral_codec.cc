// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/spectral_codec.h"

#include <unsupported/Eigen/FFT>
#include <cmath>
#include <complex>

namespace uses2 {

namespace {

template <typename T>
Eigen::FFT<T>& Fft() {
  thread_local Eigen::FFT<T> fft = [] {
    Eigen::FFT<T> f;
    f.SetFlag(Eigen::FFT<T>::HalfSpectrum);
    return f;
  }();
  return fft;
}

template <typename T>
std::vector<T> HannPeriodic(std::int64_t n) {
  std::vector<T> w(n);
  for (std::int64_t i = 0; i < n; ++i)
    w[i] = static_cast<T>(0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n)));
  return w;
}

// Maps an index of the padded signal to the source sample, mirroring
// repeatedly (without repeating the edge sample) for very short inputs.
std::int64_t ReflectIndex(std::int64_t j, std::int64_t length) {
  if (length == 1) return 0;
  const std::int64_t period = 2 * (length - 1);
  j %= period;
  if (j < 0) j += period;
  return j < length ? j : period - j;
}

void CheckConfig(const StftConfig& cfg) {
  if (cfg.fft_size < 4 || cfg.fft_size % 2 != 0 || cfg.hop < 1 || cfg.hop > cfg.fft_size)
    throw Error("invalid STFT configuration (fft " + std::to_string(cfg.fft_size) + ", hop " +
                std::to_string(cfg.hop) + ")");
}

template <typename T>
std::vector<T> Envelope(const std::vector<T>& w, const StftConfig& cfg, std::int64_t frames) {
  std::vector<T> env((frames - 1) * cfg.hop + cfg.fft_size, T(0));
  for (std::int64_t t = 0; t < frames; ++t)
    for (std::int64_t n = 0; n < cfg.fft_size; ++n) env[t * cfg.hop + n] += w[n] * w[n];
  return env;
}

void CheckOutLength(const StftConfig& cfg, std::int64_t frames, std::int64_t length) {
  // The synthesized region is [0, (frames-1)*hop + fft/2]; anything shorter
  // than one hop below the nominal range is also rejected.
  const std::int64_t max_len = (frames - 1) * cfg.hop + cfg.fft_size / 2;
  const std::int64_t min_len = std::max<std::int64_t>(1, (frames - 2) * cfg.hop + 1);
  if (length < min_len || length > max_len)
    throw Error("iSTFT output length " + std::to_string(length) + " inconsistent with " +
                std::to_string(frames) + " frames (expected " + std::to_string(min_len) + ".." +
                std::to_string(max_len) + ")");
}

}  // namespace

void Waveform::Validate() const {
  if (rate_hz <= 0) throw Error("sampling rate must be positive");
  if (samples.rank() != 2) throw Error("waveform must be [channels, length]");
  if (samples.dim(0) < 1) throw Error("waveform has no channels");
  if (samples.dim(1) < 1) throw Error("empty signal");
  for (float v : samples.span())
    if (!std::isfinite(v)) throw Error("waveform contains non-finite samples");
}

StftConfig StftConfig::ForRate(int rate_hz) {
  if (rate_hz <= 0 || (static_cast<std::int64_t>(rate_hz) * kWindowMs) % 1000 != 0)
    throw Error("unsupported sampling rate " + std::to_string(rate_hz) +
                " Hz: 32 ms is not a whole number of samples");
  StftConfig cfg;
  cfg.fft_size = static_cast<std::int64_t>(rate_hz) * kWindowMs / 1000;
  cfg.hop = static_cast<std::int64_t>(rate_hz) * kHopMs / 1000;
  CheckConfig(cfg);
  return cfg;
}

template <typename T>
Tensor<T> StftForward(const Tensor<T>& wave, const StftConfig& cfg) {
  CheckConfig(cfg);
  if (wave.rank() != 2 || wave.dim(1) < 1) throw Error("STFT: expected non-empty [C, L] input");
  const std::int64_t C = wave.dim(0), L = wave.dim(1), N = cfg.fft_size, F = cfg.bins();
  const std::int64_t frames = cfg.Frames(L);
  const auto w = HannPeriodic<T>(N);
  Tensor<T> out(Shape{C, 2, F, frames});
  std::vector<T> frame(N);
  std::vector<std::complex<T>> bins(F);
  auto& fft = Fft<T>();
  for (std::int64_t c = 0; c < C; ++c) {
    const T* x = wave.data() + c * L;
    T* re = out.data() + (c * 2) * F * frames;
    T* im = re + F * frames;
    for (std::int64_t t = 0; t < frames; ++t) {
      for (std::int64_t n = 0; n < N; ++n) frame[n] = w[n] * x[ReflectIndex(t * cfg.hop + n - N / 2, L)];
      fft.fwd(bins.data(), frame.data(), N);
      for (std::int64_t k = 0; k < F; ++k) {
        re[k * frames + t] = bins[k].real();
        im[k * frames + t] = bins[k].imag();
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> StftAdjoint(const Tensor<T>& grad_spec, const StftConfig& cfg, std::int64_t length) {
  CheckConfig(cfg);
  const std::int64_t C = grad_spec.dim(0), N = cfg.fft_size, F = cfg.bins(), frames = grad_spec.dim(3);
  if (grad_spec.dim(1) != 2 || grad_spec.dim(2) != F || frames != cfg.Frames(length))
    throw Error("STFT adjoint: gradient shape mismatch");
  const auto w = HannPeriodic<T>(N);
  Tensor<T> out(Shape{C, length});
  std::vector<std::complex<T>> half(F);
  std::vector<T> frame(N);
  auto& fft = Fft<T>();
  for (std::int64_t c = 0; c < C; ++c) {
    const T* re = grad_spec.data() + (c * 2) * F * frames;
    const T* im = re + F * frames;
    T* g = out.data() + c * length;
    for (std::int64_t t = 0; t < frames; ++t) {
      // d/dframe[n] = Re sum_k G_k e^{+i 2 pi k n / N}; the half-spectrum
      // inverse doubles interior bins, so they are halved here.
      for (std::int64_t k = 0; k < F; ++k) {
        const T s = (k == 0 || k == F - 1) ? T(1) : T(0.5);
        half[k] = std::complex<T>(re[k * frames + t] * s, im[k * frames + t] * s);
      }
      fft.inv(frame.data(), half.data(), N);
      for (std::int64_t n = 0; n < N; ++n)
        g[ReflectIndex(t * cfg.hop + n - N / 2, length)] += static_cast<T>(N) * w[n] * frame[n];
    }
  }
  return out;
}

template <typename T>
Tensor<T> IstftForward(const Tensor<T>& spec, const StftConfig& cfg, std::int64_t length) {
  CheckConfig(cfg);
  if (spec.rank() != 4 || spec.dim(1) != 2 || spec.dim(2) != cfg.bins())
    throw Error("iSTFT: spectrum shape " + ShapeString(spec.shape()) + " does not match fft size " +
                std::to_string(cfg.fft_size));
  const std::int64_t C = spec.dim(0), N = cfg.fft_size, F = cfg.bins(), frames = spec.dim(3);
  CheckOutLength(cfg, frames, length);
  const auto w = HannPeriodic<T>(N);
  const auto env = Envelope(w, cfg, frames);
  for (std::int64_t i = 0; i < length; ++i)
    if (env[i + N / 2] < T(1e-10)) throw Error("iSTFT: window envelope vanishes inside the output");
  Tensor<T> out(Shape{C, length});
  std::vector<T> acc(env.size());
  std::vector<std::complex<T>> half(F);
  std::vector<T> frame(N);
  auto& fft = Fft<T>();
  for (std::int64_t c = 0; c < C; ++c) {
    std::fill(acc.begin(), acc.end(), T(0));
    const T* re = spec.data() + (c * 2) * F * frames;
    const T* im = re + F * frames;
    for (std::int64_t t = 0; t < frames; ++t) {
      for (std::int64_t k = 0; k < F; ++k) half[k] = std::complex<T>(re[k * frames + t], im[k * frames + t]);
      fft.inv(frame.data(), half.data(), N);
      for (std::int64_t n = 0; n < N; ++n) acc[t * cfg.hop + n] += w[n] * frame[n];
    }
    T* y = out.data() + c * length;
    for (std::int64_t i = 0; i < length; ++i) y[i] = acc[i + N / 2] / env[i + N / 2];
  }
  return out;
}

template <typename T>
Tensor<T> IstftAdjoint(const Tensor<T>& grad_wave, const StftConfig& cfg, std::int64_t frames) {
  CheckConfig(cfg);
  const std::int64_t C = grad_wave.dim(0), length = grad_wave.dim(1), N = cfg.fft_size, F = cfg.bins();
  CheckOutLength(cfg, frames, length);
  const auto w = HannPeriodic<T>(N);
  const auto env = Envelope(w, cfg, frames);
  Tensor<T> out(Shape{C, 2, F, frames});
  std::vector<T> padded(env.size());
  std::vector<T> frame(N);
  std::vector<std::complex<T>> bins(F);
  auto& fft = Fft<T>();
  for (std::int64_t c = 0; c < C; ++c) {
    std::fill(padded.begin(), padded.end(), T(0));
    const T* g = grad_wave.data() + c * length;
    for (std::int64_t i = 0; i < length; ++i) padded[i + N / 2] = g[i] / env[i + N / 2];
    T* re = out.data() + (c * 2) * F * frames;
    T* im = re + F * frames;
    for (std::int64_t t = 0; t < frames; ++t) {
      for (std::int64_t n = 0; n < N; ++n) frame[n] = w[n] * padded[t * cfg.hop + n];
      fft.fwd(bins.data(), frame.data(), N);
      for (std::int64_t k = 0; k < F; ++k) {
        const T s = (k == 0 || k == F - 1) ? T(1) / static_cast<T>(N) : T(2) / static_cast<T>(N);
        re[k * frames + t] = s * bins[k].real();
        im[k * frames + t] = (k == 0 || k == F - 1) ? T(0) : s * bins[k].imag();
      }
    }
  }
  return out;
}

Spectrum Stft(const Waveform& w) {
  w.Validate();
  return {StftForward(w.samples, StftConfig::ForRate(w.rate_hz)), w.rate_hz};
}

Waveform Istft(const Spectrum& s, std::int64_t out_length) {
  return {IstftForward(s.planes, StftConfig::ForRate(s.rate_hz), out_length), s.rate_hz};
}

namespace ops {

template <typename T>
Var<T> Stft(const Var<T>& wave, const StftConfig& cfg) {
  const std::int64_t length = wave.dim(1);
  return MakeResult<T>(StftForward(wave.value(), cfg), {wave}, [cfg, length](Node<T>& self) {
    const Tensor<T> g = StftAdjoint(self.grad, cfg, length);
    auto& gx = self.inputs[0]->Grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> Istft(const Var<T>& spec, const StftConfig& cfg, std::int64_t length) {
  const std::int64_t frames = spec.dim(3);
  return MakeResult<T>(IstftForward(spec.value(), cfg, length), {spec}, [cfg, frames](Node<T>& self) {
    const Tensor<T> g = IstftAdjoint(self.grad, cfg, frames);
    auto& gs = self.inputs[0]->Grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) gs[i] += g[i];
  });
}

}  // namespace ops

// --- encoder / decoder -----------------------------------------------------

template <typename T>
SpectralEncoder SpectralEncoder::Create(Builder<T>& b, const std::string& name, std::int64_t n) {
  SpectralEncoder e;
  e.embed_dim = n;
  const double in_bound = 1.0 / std::sqrt(2.0 * 9.0);
  // Small input weights against the bias keep the per-bin LayerNorm close to
  // linear at init, so magnitudes survive and the first outputs follow the
  // input spectrum. Full-size weights make the norm discard magnitude and
  // training settles on an output uncorrelated with the target.
  constexpr double kInputWeightGain = 0.01;
  e.conv_in_weight = b.Add(name + ".conv_in.weight",
                           b.init.template UniformTensor<T>({n, 2, 3, 3}, in_bound * kInputWeightGain));
  e.conv_in_bias = b.Add(name + ".conv_in.bias", b.init.template UniformTensor<T>({n}, in_bound));
  e.norm = LayerNormRef::Create(b, name + ".norm", n);
  const double out_bound = 1.0 / std::sqrt(static_cast<double>(n));
  e.conv_out_weight = b.Add(name + ".conv_out.weight", b.init.template UniformTensor<T>({n, n, 1, 1}, out_bound));
  e.conv_out_bias = b.Add(name + ".conv_out.bias", b.init.template UniformTensor<T>({n}, out_bound));
  return e;
}

template <typename T>
Var<T> SpectralEncoder::operator()(const Binding<T>& p, const Var<T>& spec) const {
  if (spec.value().rank() != 4 || spec.dim(1) != 2)
    throw Error("encoder: expected [C, 2, F, T] spectrum, got " + ShapeString(spec.shape()));
  if (p[conv_in_weight].dim(0) != embed_dim) throw Error("encoder: parameters do not match config");
  Var<T> x = ops::Permute(spec, {0, 2, 3, 1});
  x = ops::Conv2dSame(x, p[conv_in_weight], p[conv_in_bias]);
  x = norm(p, x);
  return ops::Linear(x, ops::Reshape(p[conv_out_weight], {embed_dim, embed_dim}), p[conv_out_bias]);
}

std::int64_t SpectralEncoder::NumParams() const {
  return embed_dim * 2 * 9 + embed_dim + 2 * embed_dim + embed_dim * embed_dim + embed_dim;
}

template <typename T>
SpectralDecoder SpectralDecoder::Create(Builder<T>& b, const std::string& name, std::int64_t n) {
  SpectralDecoder d;
  d.embed_dim = n;
  d.act = PreluRef::Create(b, name + ".act");
  const double bound = 1.0 / std::sqrt(static_cast<double>(n));
  d.pointwise_weight = b.Add(name + ".pointwise.weight", b.init.template UniformTensor<T>({n, n, 1, 1}, bound));
  d.pointwise_bias = b.Add(name + ".pointwise.bias", b.init.template UniformTensor<T>({n}, bound));
  // Transposed-conv fan-in is out_channels * kernel area.
  const double tr_bound = 1.0 / std::sqrt(2.0 * 9.0);
  d.trconv_weight = b.Add(name + ".trconv.weight", b.init.template UniformTensor<T>({n, 2, 3, 3}, tr_bound));
  d.trconv_bias = b.Add(name + ".trconv.bias", b.init.template UniformTensor<T>({2}, tr_bound));
  return d;
}

template <typename T>
Var<T> SpectralDecoder::operator()(const Binding<T>& p, const Var<T>& feature) const {
  if (feature.value().rank() != 4 || feature.dim(3) != embed_dim)
    throw Error("decoder: expected [1, F, T, N] feature, got " + ShapeString(feature.shape()));
  if (feature.dim(0) != 1) throw Error("decoder: input must be the single reference channel");
  Var<T> x = act(p, feature);
  x = ops::Linear(x, ops::Reshape(p[pointwise_weight], {embed_dim, embed_dim}), p[pointwise_bias]);
  // Stride-1 transposed conv == conv with in/out swapped and the kernel flipped.
  auto index = std::make_shared<std::vector<std::int64_t>>(2 * embed_dim * 9);
  for (std::int64_t o = 0; o < 2; ++o)
    for (std::int64_t i = 0; i < embed_dim; ++i)
      for (std::int64_t a = 0; a < 3; ++a)
        for (std::int64_t c = 0; c < 3; ++c)
          (*index)[((o * embed_dim + i) * 3 + a) * 3 + c] = ((i * 2 + o) * 3 + (2 - a)) * 3 + (2 - c);
  Var<T> kernel = ops::Gather(p[trconv_weight], index, Shape{2, embed_dim, 3, 3});
  x = ops::Conv2dSame(x, kernel, p[trconv_bias]);
  return ops::Permute(x, {0, 3, 1, 2});
}

std::int64_t SpectralDecoder::NumParams() const {
  return 1 + embed_dim * embed_dim + embed_dim + embed_dim * 2 * 9 + 2;
}

#define USES2_INSTANTIATE_CODEC(T)                                                                  \
  template Tensor<T> StftForward(const Tensor<T>&, const StftConfig&);                              \
  template Tensor<T> IstftForward(const Tensor<T>&, const StftConfig&, std::int64_t);               \
  template Tensor<T> StftAdjoint(const Tensor<T>&, const StftConfig&, std::int64_t);                \
  template Tensor<T> IstftAdjoint(const Tensor<T>&, const StftConfig&, std::int64_t);               \
  template Var<T> ops::Stft(const Var<T>&, const StftConfig&);                                      \
  template Var<T> ops::Istft(const Var<T>&, const StftConfig&, std::int64_t);                       \
  template SpectralEncoder SpectralEncoder::Create(Builder<T>&, const std::string&, std::int64_t);  \
  template Var<T> SpectralEncoder::operator()(const Binding<T>&, const Var<T>&) const;              \
  template SpectralDecoder SpectralDecoder::Create(Builder<T>&, const std::string&, std::int64_t);  \
  template Var<T> SpectralDecoder::operator()(const Binding<T>&, const Var<T>&) const;

USES2_INSTANTIATE_CODEC(float)
USES2_INSTANTIATE_CODEC(double)

}  // namespace uses2
