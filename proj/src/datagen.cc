// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/datagen.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace uses2 {

namespace fs = std::filesystem;
using nlohmann::json;

// --- random helpers ----------------------------------------------------------

std::mt19937_64 DeriveRng(std::uint64_t seed, const std::string& key) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

double UniformUnit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::int64_t UniformIndex(std::mt19937_64& rng, std::int64_t n) {
  if (n <= 0) throw Error("UniformIndex: empty range");
  return std::min<std::int64_t>(n - 1, static_cast<std::int64_t>(UniformUnit(rng) * static_cast<double>(n)));
}

double Gaussian(std::mt19937_64& rng) {
  double u1 = 0;
  while (u1 <= 0) u1 = UniformUnit(rng);
  const double u2 = UniformUnit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double PowerDb(const float* x, std::int64_t n) {
  double e = 0;
  for (std::int64_t i = 0; i < n; ++i) e += static_cast<double>(x[i]) * x[i];
  return 10.0 * std::log10(e / static_cast<double>(n));
}

namespace {

double Uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * UniformUnit(rng); }

// --- little-endian helpers ---

void Put16(std::ostream& os, std::uint16_t v) {
  os.put(static_cast<char>(v & 0xff));
  os.put(static_cast<char>(v >> 8));
}
void Put32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint32_t Le(const unsigned char* p, int bytes) {
  std::uint32_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

// --- WAV ---------------------------------------------------------------------

Waveform ReadWav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& why) -> Error { return Error("bad WAV file " + path + ": " + why); };
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw fail("missing RIFF/WAVE header");

  int format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::uint32_t size = Le(buf.data() + pos + 4, 4);
    const unsigned char* body = buf.data() + pos + 8;
    const std::size_t avail = buf.size() - pos - 8;
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
      if (size < 16 || avail < 16) throw fail("short fmt chunk");
      format = static_cast<int>(Le(body, 2));
      channels = static_cast<int>(Le(body + 2, 2));
      rate = Le(body + 4, 4);
      bits = static_cast<int>(Le(body + 14, 2));
      if (format == 0xFFFE) {
        if (size < 26 || avail < 26) throw fail("short extensible fmt chunk");
        format = static_cast<int>(Le(body + 24, 2));
      }
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      data = body;
      // Streaming writers leave the size as 0 or all ones; any other
      // overrun means the file was cut short.
      if (size > avail && size != 0 && size != 0xFFFFFFFFu) throw fail("truncated data chunk");
      data_size = size == 0 ? avail : std::min<std::size_t>(size, avail);
    }
    pos += 8 + static_cast<std::size_t>(size) + (size & 1);
  }
  if (format == 0) throw fail("no fmt chunk");
  if (!data) throw fail("no data chunk");
  if (channels < 1) throw fail("zero channels");
  if (rate == 0 || rate > 1000000) throw fail("invalid sampling rate");
  const bool is_float = format == 3;
  if (format != 1 && !is_float) throw fail("unsupported sample format " + std::to_string(format));
  if ((is_float && bits != 32 && bits != 64) || (!is_float && bits != 8 && bits != 16 && bits != 24 && bits != 32))
    throw fail("unsupported bit depth " + std::to_string(bits));
  const int bytes = bits / 8;
  const std::int64_t frames = static_cast<std::int64_t>(data_size / (static_cast<std::size_t>(bytes) * channels));
  if (frames < 1) throw fail("no samples");

  Waveform w{Tensor<float>({channels, frames}), static_cast<int>(rate)};
  for (std::int64_t n = 0; n < frames; ++n)
    for (int c = 0; c < channels; ++c) {
      const unsigned char* p = data + (n * channels + c) * bytes;
      double v = 0;
      if (is_float && bits == 32) {
        v = std::bit_cast<float>(Le(p, 4));
      } else if (is_float) {
        std::uint64_t u = Le(p, 4) | (static_cast<std::uint64_t>(Le(p + 4, 4)) << 32);
        v = std::bit_cast<double>(u);
      } else if (bits == 8) {
        v = (static_cast<int>(p[0]) - 128) / 128.0;
      } else {
        const std::uint32_t u = Le(p, bytes) << (32 - bits);
        v = static_cast<double>(static_cast<std::int32_t>(u)) / 2147483648.0;
      }
      w.samples[c * frames + n] = static_cast<float>(v);
    }
  return w;
}

void WriteWav(const std::string& path, const Waveform& w, WavFormat format) {
  w.Validate();
  const int channels = static_cast<int>(w.channels());
  const std::int64_t frames = w.length();
  const int bytes = format == WavFormat::kFloat32 ? 4 : 2;
  const std::uint64_t data_size = static_cast<std::uint64_t>(frames) * channels * bytes;
  if (data_size > 0xFFFFFF00ull) throw Error("WAV too large: " + path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  os.write("RIFF", 4);
  Put32(os, static_cast<std::uint32_t>(36 + data_size));
  os.write("WAVEfmt ", 8);
  Put32(os, 16);
  Put16(os, format == WavFormat::kFloat32 ? 3 : 1);
  Put16(os, static_cast<std::uint16_t>(channels));
  Put32(os, static_cast<std::uint32_t>(w.rate_hz));
  Put32(os, static_cast<std::uint32_t>(w.rate_hz * channels * bytes));
  Put16(os, static_cast<std::uint16_t>(channels * bytes));
  Put16(os, static_cast<std::uint16_t>(8 * bytes));
  os.write("data", 4);
  Put32(os, static_cast<std::uint32_t>(data_size));
  for (std::int64_t n = 0; n < frames; ++n)
    for (int c = 0; c < channels; ++c) {
      const float v = w.samples[c * frames + n];
      if (format == WavFormat::kFloat32) {
        Put32(os, std::bit_cast<std::uint32_t>(v));
      } else {
        const long s = std::clamp(std::lround(static_cast<double>(v) * 32768.0), -32768L, 32767L);
        Put16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
      }
    }
  if (!os) throw Error("write failed: " + path);
}

// --- manifests ---------------------------------------------------------------

std::vector<UtteranceRecord> ReadManifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<UtteranceRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    try {
      const json j = json::parse(line);
      UtteranceRecord r;
      r.id = j.at("id").get<std::string>();
      auto resolve = [&](const std::string& p) {
        const fs::path fp(p);
        return (fp.is_absolute() ? fp : base / fp).lexically_normal().string();
      };
      r.mixture = resolve(j.at("mixture").get<std::string>());
      r.reference = resolve(j.at("reference").get<std::string>());
      r.rate_hz = j.at("rate").get<int>();
      r.channels = j.at("channels").get<int>();
      if (j.contains("snr_db"))
        for (const auto& v : j["snr_db"])
          r.snr_db.push_back(v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>());
      if (r.rate_hz <= 0 || r.channels < 1) throw Error("invalid rate or channel count");
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw Error("bad manifest record at " + where + ": " + e.what());
    } catch (const Error& e) {
      throw Error("bad manifest record at " + where + ": " + e.what());
    }
  }
  return out;
}

void WriteManifest(const std::string& path, const std::vector<UtteranceRecord>& records) {
  const fs::path base = fs::absolute(fs::path(path)).parent_path();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write manifest " + path);
  auto rel = [&](const std::string& p) {
    const fs::path r = fs::absolute(p).lexically_relative(base);
    return (r.empty() || *r.begin() == "..") ? fs::absolute(p).string() : r.string();
  };
  for (const auto& r : records) {
    json snr = json::array();
    for (double s : r.snr_db) snr.push_back(std::isfinite(s) ? json(s) : json(nullptr));
    os << json{{"id", r.id}, {"mixture", rel(r.mixture)}, {"reference", rel(r.reference)},
               {"rate", r.rate_hz}, {"channels", r.channels}, {"snr_db", snr}}
              .dump()
       << "\n";
  }
  if (!os) throw Error("write failed: " + path);
}

// --- synthesis ---------------------------------------------------------------

Waveform SynthesizeSpeechLike(double duration_s, int rate_hz, std::mt19937_64& rng) {
  if (!(duration_s > 0)) throw Error("synthesis: duration must be positive");
  if (rate_hz <= 0) throw Error("synthesis: rate must be positive");
  const auto L = std::max<std::int64_t>(1, std::llround(duration_s * rate_hz));
  const double fs = rate_hz;
  const double top = std::min(0.45 * fs, 3800.0);

  const double f0_base = Uniform(rng, 100, 220);
  const double drift_rate = Uniform(rng, 0.2, 0.6), drift_phase = Uniform(rng, 0, 2 * M_PI);
  const double syl_rate = Uniform(rng, 3, 6), syl_phase = Uniform(rng, 0, 2 * M_PI);
  const double formants[3] = {Uniform(rng, 450, 800), Uniform(rng, 1000, 2000), Uniform(rng, 2300, 3200)};
  const int harmonics = std::max(1, static_cast<int>(top / (f0_base * 1.2)));
  std::vector<double> phase(harmonics, 0.0);
  for (auto& p : phase) p = Uniform(rng, 0, 2 * M_PI);

  std::vector<double> x(L, 0.0);
  double walk = 0;
  for (std::int64_t n = 0; n < L; ++n) {
    const double t = n / fs;
    walk = 0.9995 * walk + 0.0005 * Gaussian(rng);
    const double f0 = f0_base * (1.0 + 0.12 * std::sin(2 * M_PI * drift_rate * t + drift_phase) + 0.5 * walk);
    const double s = std::sin(2 * M_PI * syl_rate * t + syl_phase);
    const double env = s > 0 ? s * s : 0.0;
    double v = 0;
    for (int k = 0; k < harmonics; ++k) {
      const double f = (k + 1) * f0;
      phase[k] += 2 * M_PI * f / fs;
      if (f >= top) continue;
      double a = 0;
      for (double fm : formants) a += std::exp(-0.5 * std::pow((f - fm) / 200.0, 2));
      v += (a + 0.1) / (k + 1) * std::sin(phase[k]);
    }
    x[n] = env * v;
  }

  // Fricative-like bursts: band-passed noise between syllables.
  const int bursts = 1 + static_cast<int>(duration_s * Uniform(rng, 0.5, 1.5));
  double rms = 0;
  for (double v : x) rms += v * v;
  rms = std::sqrt(rms / L);
  for (int b = 0; b < bursts; ++b) {
    const auto len = static_cast<std::int64_t>(Uniform(rng, 0.03, 0.12) * fs);
    const std::int64_t start = UniformIndex(rng, std::max<std::int64_t>(1, L - len));
    const double fc = std::min(Uniform(rng, 1500, 3500), 0.4 * fs);
    const double w0 = 2 * M_PI * fc / fs, alpha = std::sin(w0) / (2 * 1.5);
    const double b0 = alpha, b2 = -alpha, a0 = 1 + alpha, a1 = -2 * std::cos(w0), a2 = 1 - alpha;
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    const double gain = Uniform(rng, 0.5, 1.5) * (rms > 0 ? rms : 0.1);
    for (std::int64_t n = start; n < std::min(L, start + len); ++n) {
      const double in = Gaussian(rng);
      const double y = (b0 * in + b2 * x2 - a1 * y1 - a2 * y2) / a0;
      x2 = x1;
      x1 = in;
      y2 = y1;
      y1 = y;
      const double ramp = std::sin(M_PI * (n - start) / static_cast<double>(len));
      x[n] += gain * ramp * y;
    }
  }

  double peak = 0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak == 0) {
    x[0] = 1.0;
    peak = 1.0;
  }
  Waveform w{Tensor<float>({1, L}), rate_hz};
  for (std::int64_t n = 0; n < L; ++n) w.samples[n] = static_cast<float>(0.5 * x[n] / peak);
  return w;
}

void SceneSpec::Validate() const {
  if (!(duration_s > 0)) throw Error("scene: duration must be positive");
  if (rate_hz <= 0) throw Error("scene: rate must be positive");
  if (channels < 1) throw Error("scene: at least one channel required");
  auto check = [&](std::size_t n, const char* what) {
    if (n != 0 && n != static_cast<std::size_t>(channels))
      throw Error(std::string("scene: ") + what + " must have one entry per channel");
  };
  check(gain_db.size(), "gain_db");
  check(delay.size(), "delay");
  check(snr_db.size(), "snr_db");
  check(failed.size(), "failed");
  for (auto d : delay)
    if (d < 0) throw Error("scene: delays must be non-negative");
}

Scene SpatializeAndMix(const Waveform& clean, const SceneSpec& spec, std::mt19937_64& rng) {
  spec.Validate();
  clean.Validate();
  if (clean.channels() != 1) throw Error("scene: clean signal must be single-channel");
  const std::int64_t L = clean.length();
  const int C = spec.channels;
  Scene s;
  s.mixture = {Tensor<float>({C, L}), clean.rate_hz};
  s.images = {Tensor<float>({C, L}), clean.rate_hz};
  for (int c = 0; c < C; ++c) {
    const double gain = std::pow(10.0, (spec.gain_db.empty() ? 0.0 : spec.gain_db[c]) / 20.0);
    const std::int64_t d = spec.delay.empty() ? 0 : spec.delay[c];
    std::vector<double> image(L, 0.0);
    for (std::int64_t n = d; n < L; ++n) image[n] = gain * clean.samples[n - d];
    double p_speech = 0;
    for (double v : image) p_speech += v * v;
    p_speech /= static_cast<double>(L);

    const double snr = spec.snr_db.empty() ? std::numeric_limits<double>::infinity() : spec.snr_db[c];
    std::vector<double> noise(L, 0.0);
    if (std::isfinite(snr) && p_speech > 0) {
      double state = 0, p_noise = 0;
      for (std::int64_t n = 0; n < L; ++n) {
        state = 0.6 * state + Gaussian(rng);
        noise[n] = state;
        p_noise += state * state;
      }
      p_noise /= static_cast<double>(L);
      const double scale = std::sqrt(p_speech / (p_noise * std::pow(10.0, snr / 10.0)));
      for (auto& v : noise) v *= scale;
    }
    const bool failed = !spec.failed.empty() && spec.failed[c];
    for (std::int64_t n = 0; n < L; ++n) {
      const double speech = failed ? 0.0 : image[n];
      s.images.samples[c * L + n] = static_cast<float>(speech);
      s.mixture.samples[c * L + n] = static_cast<float>(speech + noise[n]);
    }
  }
  s.reference = {Tensor<float>({1, L}), clean.rate_hz};
  std::copy(s.images.samples.data(), s.images.samples.data() + L, s.reference.samples.data());
  return s;
}

SceneSpec RandomScene(double duration_s, int rate_hz, int channels, std::mt19937_64& rng) {
  SceneSpec s;
  s.duration_s = duration_s;
  s.rate_hz = rate_hz;
  s.channels = channels;
  for (int c = 0; c < channels; ++c) {
    s.gain_db.push_back(c == 0 ? 0.0 : Uniform(rng, -6, 0));
    s.delay.push_back(c == 0 ? 0 : UniformIndex(rng, rate_hz / 1000 + 1));
    s.snr_db.push_back(Uniform(rng, -5, 20));
    s.failed.push_back(c > 0 && UniformUnit(rng) < 0.15);
  }
  return s;
}

CorpusManifests BuildCorpus(const std::string& out_dir, const CorpusSpec& spec) {
  if (spec.train < 0 || spec.dev < 0 || spec.test < 0) throw Error("corpus: counts must be non-negative");
  if (spec.rates.empty()) throw Error("corpus: no sampling rates");
  if (!(spec.min_seconds > 0) || spec.max_seconds < spec.min_seconds) throw Error("corpus: bad duration range");
  if (spec.min_channels < 2 || spec.max_channels < spec.min_channels) throw Error("corpus: bad channel range");
  CorpusManifests out;
  const std::pair<const char*, int> splits[] = {{"train", spec.train}, {"dev", spec.dev}, {"test", spec.test}};
  for (const char* subset : {"single", "multi"}) {
    for (const auto& [split, count] : splits) {
      const fs::path dir = fs::path(out_dir) / subset / split;
      fs::create_directories(dir);
      std::vector<UtteranceRecord> records;
      for (int i = 0; i < count; ++i) {
        char id[64];
        std::snprintf(id, sizeof(id), "%s-%s-%04d", subset, split, i);
        auto rng = DeriveRng(spec.seed, id);
        const int rate = spec.rates[UniformIndex(rng, static_cast<std::int64_t>(spec.rates.size()))];
        const double dur = Uniform(rng, spec.min_seconds, spec.max_seconds);
        const int C = std::string(subset) == "single"
                          ? 1
                          : spec.min_channels + static_cast<int>(UniformIndex(rng, spec.max_channels - spec.min_channels + 1));
        const Waveform clean = SynthesizeSpeechLike(dur, rate, rng);
        const SceneSpec scene = RandomScene(dur, rate, C, rng);
        const Scene mixed = SpatializeAndMix(clean, scene, rng);
        UtteranceRecord r;
        r.id = id;
        r.mixture = (dir / (std::string(id) + "_mix.wav")).string();
        r.reference = (dir / (std::string(id) + "_ref.wav")).string();
        r.rate_hz = rate;
        r.channels = C;
        r.snr_db = scene.snr_db;
        WriteWav(r.mixture, mixed.mixture);
        WriteWav(r.reference, mixed.images);
        records.push_back(std::move(r));
      }
      const std::string manifest = (fs::path(out_dir) / subset / (std::string(split) + ".jsonl")).string();
      WriteManifest(manifest, records);
      out.paths.emplace_back(std::string(subset) + "/" + split, manifest);
    }
  }
  return out;
}

}  // namespace uses2
