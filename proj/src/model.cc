// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/model.h"

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_map>

namespace uses2 {

using nlohmann::json;

// --- config ------------------------------------------------------------------

std::string VariantName(Variant v) {
  switch (v) {
    case Variant::kComp: return "comp";
    case Variant::kSwin: return "swin";
    case Variant::kBaseline: return "uses_baseline";
  }
  return "?";
}

Variant ParseVariant(const std::string& s) {
  if (s == "comp") return Variant::kComp;
  if (s == "swin") return Variant::kSwin;
  if (s == "uses_baseline") return Variant::kBaseline;
  throw Error("unknown model variant: " + s);
}

std::string ChannelModuleName(ChannelModuleKind k) {
  switch (k) {
    case ChannelModuleKind::kTac: return "tac";
    case ChannelModuleKind::kTattc: return "tattc";
    case ChannelModuleKind::kAttTacCascade: return "att_tac_cascade";
  }
  return "?";
}

ChannelModuleKind ParseChannelModule(const std::string& s) {
  if (s == "tac") return ChannelModuleKind::kTac;
  if (s == "tattc") return ChannelModuleKind::kTattc;
  if (s == "att_tac_cascade") return ChannelModuleKind::kAttTacCascade;
  throw Error("unknown channel module: " + s);
}

ModelConfig ModelConfig::Defaults(Variant v) {
  ModelConfig c;
  c.variant = v;
  switch (v) {
    case Variant::kComp:
      c.K = 4;
      c.K_s = 2;
      break;
    case Variant::kSwin:
      c.K = 3;
      c.K_s = 2;
      break;
    case Variant::kBaseline:
      c.K = 6;
      c.K_s = 3;
      c.channel_module = ChannelModuleKind::kTac;
      break;
  }
  return c;
}

void ModelConfig::Validate() const {
  auto fail = [](const std::string& m) { throw Error("model config: " + m); };
  if (K < 1) fail("K must be at least 1");
  if (K_s < 1 || K_s > K) fail("K_s must satisfy 1 <= K_s <= K");
  if (N < 1 || H < 1 || tac_hidden < 1 || window_ffn < 1 || path_hidden < 1) fail("dimensions must be positive");
  if (heads < 1 || N % heads != 0) fail("heads must divide N");
  if (W_F < 1 || W_T < 1) fail("window sizes must be positive");
  if (G < 1) fail("G must be at least 1");
  if (reference_channel < 0) fail("reference_channel must be non-negative");
  if (!(segment_seconds > 0)) fail("segment_seconds must be positive");
}

int ModelConfig::TransformerLayers() const {
  switch (variant) {
    case Variant::kComp: return 3 * K;
    case Variant::kSwin: return 4 * K;
    case Variant::kBaseline: return 2 * K;
  }
  return 0;
}

std::int64_t ModelConfig::SegmentFrames() const {
  return static_cast<std::int64_t>(std::llround(segment_seconds * 1000.0 / StftConfig::kHopMs)) + 1;
}

json ModelConfig::ToJson() const {
  return json{{"variant", VariantName(variant)},
              {"K", K},
              {"K_s", K_s},
              {"N", N},
              {"H", H},
              {"tac_hidden", tac_hidden},
              {"W_F", W_F},
              {"W_T", W_T},
              {"G", G},
              {"heads", heads},
              {"window_ffn", window_ffn},
              {"path_hidden", path_hidden},
              {"channel_module", ChannelModuleName(channel_module)},
              {"attention_scale", attention_scale == ChannelAttention::Scale::kHT2 ? "ht2" : "hft"},
              {"channel_residual", channel_residual},
              {"reference_channel", reference_channel},
              {"segment_seconds", segment_seconds}};
}

ModelConfig ModelConfig::FromJson(const json& j) {
  if (!j.is_object()) throw Error("model config: expected a JSON object");
  ModelConfig c = Defaults(ParseVariant(j.value("variant", std::string("comp"))));
  static const char* kKnown[] = {"variant", "K", "K_s", "N", "H", "tac_hidden", "W_F", "W_T", "G", "heads",
                                 "window_ffn", "path_hidden", "channel_module", "attention_scale",
                                 "channel_residual", "reference_channel", "segment_seconds"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : kKnown) ok = ok || key == k;
    if (!ok) throw Error("model config: unknown key \"" + key + "\"");
  }
  try {
    c.K = j.value("K", c.K);
    c.K_s = j.value("K_s", c.K_s);
    c.N = j.value("N", c.N);
    // Widths tied to N follow it unless given explicitly.
    c.H = j.value("H", c.N);
    c.tac_hidden = j.value("tac_hidden", 3 * c.N);
    c.path_hidden = j.value("path_hidden", c.N);
    c.window_ffn = j.value("window_ffn", c.N * 960 / 128);
    c.W_F = j.value("W_F", c.W_F);
    c.W_T = j.value("W_T", c.W_T);
    c.G = j.value("G", c.G);
    c.heads = j.value("heads", c.heads);
    if (j.contains("channel_module")) c.channel_module = ParseChannelModule(j["channel_module"].get<std::string>());
    if (j.contains("attention_scale")) {
      const auto s = j["attention_scale"].get<std::string>();
      if (s == "ht2")
        c.attention_scale = ChannelAttention::Scale::kHT2;
      else if (s == "hft")
        c.attention_scale = ChannelAttention::Scale::kHFT;
      else
        throw Error("model config: attention_scale must be \"ht2\" or \"hft\"");
    }
    c.channel_residual = j.value("channel_residual", c.channel_residual);
    c.reference_channel = j.value("reference_channel", c.reference_channel);
    c.segment_seconds = j.value("segment_seconds", c.segment_seconds);
  } catch (const json::exception& e) {
    throw Error(std::string("model config: ") + e.what());
  }
  c.Validate();
  return c;
}

// --- layout ------------------------------------------------------------------

template <typename T>
ModelLayout ModelLayout::Create(const ModelConfig& cfg, ParameterSet<T>& params, Initializer& init) {
  cfg.Validate();
  Builder<T> b{params, init, false};
  ModelLayout m;
  m.encoder = SpectralEncoder::Create(b, "encoder", cfg.N);
  using Axis = PathTransformerLayer::Axis;
  for (int k = 0; k < cfg.K; ++k) {
    const std::string name = "blocks." + std::to_string(k);
    MultiPathBlock blk;
    b.channel_module = false;
    switch (cfg.variant) {
      case Variant::kSwin:
        for (int i = 0; i < 4; ++i)
          blk.windows.push_back(WindowAttentionLayer::Create(b, name + ".window." + std::to_string(i), cfg.N,
                                                             cfg.heads, WindowSpec{cfg.W_F, cfg.W_T, i % 2 == 1},
                                                             cfg.window_ffn));
        break;
      case Variant::kComp:
        blk.windows.push_back(WindowAttentionLayer::Create(b, name + ".window", cfg.N, cfg.heads,
                                                           WindowSpec{cfg.W_F, cfg.W_T, false}, cfg.window_ffn));
        [[fallthrough]];
      case Variant::kBaseline:
        blk.has_memory = true;
        blk.memory = MemoryTokens::Create(b, name + ".memory", cfg.N, cfg.G);
        blk.paths.push_back(PathTransformerLayer::Create(b, name + ".freq_path", Axis::kFrequency, cfg.N,
                                                         cfg.heads, cfg.path_hidden));
        blk.paths.push_back(PathTransformerLayer::Create(b, name + ".time_path", Axis::kTime, cfg.N, cfg.heads,
                                                         cfg.path_hidden));
        break;
    }
    if (k < cfg.K_s) {
      b.channel_module = true;
      const std::string cname = name + ".channel";
      const bool attention_first = cfg.channel_module == ChannelModuleKind::kAttTacCascade && k == 0;
      if (cfg.channel_module == ChannelModuleKind::kTattc) {
        blk.channel = MultiPathBlock::Channel::kTattc;
        blk.tattc = TattcBlock::Create(b, cname, cfg.N, cfg.H, cfg.attention_scale, cfg.channel_residual);
      } else if (attention_first) {
        blk.channel = MultiPathBlock::Channel::kAttention;
        blk.attention = AttentionBlock::Create(b, cname, cfg.N, cfg.H, cfg.attention_scale);
      } else {
        blk.channel = MultiPathBlock::Channel::kTac;
        blk.tac = TacBlock::Create(b, cname, cfg.N, cfg.tac_hidden, cfg.channel_residual);
      }
      b.channel_module = false;
    }
    m.blocks.push_back(std::move(blk));
  }
  m.decoder = SpectralDecoder::Create(b, "decoder", cfg.N);
  return m;
}

std::int64_t ModelLayout::NumParams() const {
  std::int64_t n = encoder.NumParams() + decoder.NumParams();
  for (const auto& blk : blocks) {
    for (const auto& w : blk.windows) n += w.NumParams();
    for (const auto& p : blk.paths) n += p.NumParams();
    if (blk.has_memory) n += blk.memory.NumParams();
    switch (blk.channel) {
      case MultiPathBlock::Channel::kNone: break;
      case MultiPathBlock::Channel::kTac: n += blk.tac.NumParams(); break;
      case MultiPathBlock::Channel::kTattc: n += blk.tattc.NumParams(); break;
      case MultiPathBlock::Channel::kAttention: n += blk.attention.NumParams(); break;
    }
  }
  return n;
}

// --- model -------------------------------------------------------------------

Model Model::Build(const ModelConfig& cfg, std::uint64_t seed) {
  Model m;
  m.config_ = cfg;
  Initializer init(seed);
  m.layout_ = ModelLayout::Create(cfg, m.params_, init);
  return m;
}

Model Model::FromParameters(const ModelConfig& cfg, ParameterSet<float> params) {
  Model m = Build(cfg, 0);
  if (params.size() != m.params_.size())
    throw Error("parameters do not match config: expected " + std::to_string(m.params_.size()) +
                " tensors, got " + std::to_string(params.size()));
  for (auto& p : m.params_) {
    if (!params.Contains(p.name)) throw Error("parameters do not match config: missing " + p.name);
    const auto& src = params[params.IndexOf(p.name)];
    if (src.value.shape() != p.value.shape())
      throw Error("parameters do not match config: " + p.name + " has shape " + ShapeString(src.value.shape()) +
                  ", expected " + ShapeString(p.value.shape()));
    p.value = src.value;
  }
  return m;
}

template <typename T>
Var<T> Model::Forward(const Binding<T>& p, const Tensor<T>& mixture, int rate_hz) const {
  if (mixture.rank() != 2 || mixture.dim(0) < 1 || mixture.dim(1) < 1)
    throw Error("forward: expected a non-empty [C, L] mixture, got " + ShapeString(mixture.shape()));
  if (p.size() != params_.size()) throw Error("forward: binding does not match the model parameters");
  const StftConfig sc = StftConfig::ForRate(rate_hz);
  const std::int64_t C = mixture.dim(0), L = mixture.dim(1);
  if (config_.reference_channel >= C)
    throw Error("forward: reference channel " + std::to_string(config_.reference_channel) + " but input has " +
                std::to_string(C) + " channel(s)");

  double energy = 0;
  for (std::int64_t i = 0; i < mixture.numel(); ++i) {
    if (!std::isfinite(static_cast<double>(mixture[i]))) throw Error("forward: non-finite input sample");
    energy += static_cast<double>(mixture[i]) * mixture[i];
  }
  const double rms = std::sqrt(energy / static_cast<double>(mixture.numel()));
  const double gain = rms > 0 ? rms : 1.0;
  Tensor<T> normalized = mixture;
  for (std::int64_t i = 0; i < normalized.numel(); ++i) normalized[i] = static_cast<T>(normalized[i] / gain);

  Var<T> x = layout_.encoder(p, ops::Stft(Var<T>(normalized), sc));
  const bool coupled = config_.variant == Variant::kBaseline;

  auto channel = [&](const MultiPathBlock& blk, const Var<T>& h) -> Var<T> {
    if (blk.channel == MultiPathBlock::Channel::kNone || (C == 1 && !coupled)) return h;
    switch (blk.channel) {
      case MultiPathBlock::Channel::kTac: return blk.tac(p, h);
      case MultiPathBlock::Channel::kTattc: return blk.tattc(p, h);
      case MultiPathBlock::Channel::kAttention: return blk.attention(p, h);
      default: return h;
    }
  };

  if (config_.variant == Variant::kSwin) {
    for (const auto& blk : layout_.blocks) {
      for (const auto& w : blk.windows) x = w(p, x);
      x = channel(blk, x);
    }
  } else {
    const std::int64_t frames = x.dim(2), seg = config_.SegmentFrames();
    std::vector<Var<T>> carry(layout_.blocks.size());
    std::vector<Var<T>> outputs;
    for (std::int64_t start = 0; start < frames; start += seg) {
      Var<T> h = frames <= seg ? x : ops::Slice(x, 2, start, std::min(seg, frames - start));
      for (std::size_t k = 0; k < layout_.blocks.size(); ++k) {
        const auto& blk = layout_.blocks[k];
        for (const auto& w : blk.windows) h = w(p, h);
        h = blk.paths[0](p, h);
        h = AttachMemory(p, blk.memory, h, carry[k]);
        h = blk.paths[1](p, h);
        std::tie(h, carry[k]) = DetachMemory(h, blk.memory.group);
        h = channel(blk, h);
      }
      outputs.push_back(h);
    }
    x = outputs.size() == 1 ? outputs[0] : ops::Concat(outputs, 2);
  }

  Var<T> ref = C == 1 ? x : ops::Slice(x, 0, config_.reference_channel, 1);
  Var<T> wave = ops::Istft(layout_.decoder(p, ref), sc, L);
  return ops::Scale(wave, static_cast<T>(gain));
}

Waveform Model::Forward(const Waveform& mixture) const {
  mixture.Validate();
  Binding<float> binding(params_);
  return {Forward(binding, mixture.samples, mixture.rate_hz).value(), mixture.rate_hz};
}

template Var<float> Model::Forward(const Binding<float>&, const Tensor<float>&, int) const;
template Var<double> Model::Forward(const Binding<double>&, const Tensor<double>&, int) const;

// --- accounting --------------------------------------------------------------

std::int64_t CountParams(const ParameterSet<float>& params) { return params.NumElements(); }

std::uint64_t CountMacs(const ModelConfig& cfg, int rate_hz, int channels, double seconds) {
  cfg.Validate();
  if (channels < 1) throw Error("count_macs: channels must be positive");
  const StftConfig sc = StftConfig::ForRate(rate_hz);
  const auto length = static_cast<std::int64_t>(std::llround(seconds * rate_hz));
  if (length < 1) throw Error("count_macs: duration too short");
  const std::int64_t C = channels, F = sc.bins(), Tn = sc.Frames(length), N = cfg.N;

  ParameterSet<float> scratch;
  Initializer init(0);
  const ModelLayout m = ModelLayout::Create(cfg, scratch, init);
  const bool coupled = cfg.variant == Variant::kBaseline;

  std::uint64_t macs = static_cast<std::uint64_t>(C * F * Tn) * (2 * 9 * N + N * N);  // encoder
  macs += static_cast<std::uint64_t>(F * Tn) * (N * N + 2 * 9 * N);                    // decoder

  auto block_macs = [&](const MultiPathBlock& blk, std::int64_t frames) {
    const Shape s{C, F, frames, N};
    std::uint64_t n = 0;
    for (const auto& w : blk.windows) n += w.Macs(s);
    if (!blk.paths.empty()) {
      n += blk.paths[0].Macs(s);
      n += blk.paths[1].Macs({C, F, frames + blk.memory.group, N});
    }
    if (C > 1 || coupled) {
      switch (blk.channel) {
        case MultiPathBlock::Channel::kNone: break;
        case MultiPathBlock::Channel::kTac: n += blk.tac.Macs(s); break;
        case MultiPathBlock::Channel::kTattc: n += blk.tattc.Macs(s); break;
        case MultiPathBlock::Channel::kAttention: n += blk.attention.Macs(s); break;
      }
    }
    return n;
  };

  if (cfg.variant == Variant::kSwin) {
    for (const auto& blk : m.blocks) macs += block_macs(blk, Tn);
  } else {
    const std::int64_t seg = cfg.SegmentFrames();
    for (std::int64_t start = 0; start < Tn; start += seg)
      for (const auto& blk : m.blocks) macs += block_macs(blk, std::min(seg, Tn - start));
  }
  return macs;
}

// --- checkpoints -------------------------------------------------------------

namespace {

template <typename U>
void PutLe(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename U>
U GetLe(std::istream& is, const std::string& path) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw Error("corrupt weights file (truncated): " + path);
    v |= static_cast<std::uint64_t>(c & 0xff) << (8 * i);
  }
  return static_cast<U>(v);
}

}  // namespace

void WriteWeights(const std::string& path, const ParameterSet<float>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  for (const auto& p : params) {
    PutLe<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    PutLe<std::uint8_t>(os, 0);
    PutLe<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) PutLe<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    for (float v : p.value.span()) PutLe<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw Error("write failed: " + path);
}

std::vector<NamedTensor> ReadWeights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  std::vector<NamedTensor> out;
  while (is.peek() != EOF) {
    const auto name_len = GetLe<std::uint32_t>(is, path);
    if (name_len == 0 || name_len > 4096) throw Error("corrupt weights file (bad name length): " + path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw Error("corrupt weights file (truncated): " + path);
    if (GetLe<std::uint8_t>(is, path) != 0) throw Error("corrupt weights file (unsupported dtype): " + path);
    const auto rank = GetLe<std::uint32_t>(is, path);
    if (rank > 8) throw Error("corrupt weights file (bad rank): " + path);
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = static_cast<std::int64_t>(GetLe<std::uint64_t>(is, path));
      if (d < 0 || d > (1 << 28)) throw Error("corrupt weights file (bad dimension): " + path);
      count *= static_cast<std::uint64_t>(d);
    }
    if (count > (1ull << 30)) throw Error("corrupt weights file (tensor too large): " + path);
    Tensor<float> t(shape);
    for (auto& v : t.span()) v = std::bit_cast<float>(GetLe<std::uint32_t>(is, path));
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

void SaveCheckpoint(const std::string& dir, const Model& model, const json& metadata) {
  std::filesystem::create_directories(dir);
  json j = metadata.is_object() ? metadata : json::object();
  j["model"] = model.config().ToJson();
  {
    std::ofstream os(dir + "/config.json", std::ios::trunc);
    if (!os) throw Error("cannot write " + dir + "/config.json");
    os << j.dump(2) << "\n";
  }
  WriteWeights(dir + "/weights.bin", model.params());
}

std::pair<Model, json> LoadCheckpoint(const std::string& dir) {
  std::ifstream is(dir + "/config.json");
  if (!is) throw Error("checkpoint has no config.json: " + dir);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw Error("corrupt checkpoint config " + dir + "/config.json: " + e.what());
  }
  if (!j.contains("model")) throw Error("checkpoint config has no \"model\" entry: " + dir);
  const ModelConfig cfg = ModelConfig::FromJson(j["model"]);
  ParameterSet<float> params;
  for (auto& t : ReadWeights(dir + "/weights.bin")) params.Add(t.name, std::move(t.value), false);
  return {Model::FromParameters(cfg, std::move(params)), j};
}

template ModelLayout ModelLayout::Create(const ModelConfig&, ParameterSet<float>&, Initializer&);
template ModelLayout ModelLayout::Create(const ModelConfig&, ParameterSet<double>&, Initializer&);

}  // namespace uses2
