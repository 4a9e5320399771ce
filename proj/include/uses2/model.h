// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Model assembly: USES2-Comp, USES2-Swin and a USES-style baseline built from
// the block library, plus parameter/MAC accounting and checkpoint files.
//
// Checkpoint directory layout:
//   config.json   {"model": ModelConfig, ...caller metadata}
//   weights.bin   records back to back, no header. Each record is
//                   u32 name_length, name bytes (UTF-8),
//                   u8 dtype (0 = float32), u32 rank, rank x u64 dims,
//                   prod(dims) float32 values.
//                 All integers and floats little-endian.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uses2/channel_blocks.h"
#include "uses2/spectral_codec.h"
#include "uses2/tf_blocks.h"

namespace uses2 {

enum class Variant { kComp, kSwin, kBaseline };
enum class ChannelModuleKind { kTac, kTattc, kAttTacCascade };

struct ModelConfig {
  Variant variant = Variant::kComp;
  int K = 4;
  int K_s = 2;
  std::int64_t N = 128;
  std::int64_t H = 128;           // TA_ttC / channel attention width
  std::int64_t tac_hidden = 384;  // TAC transform width
  std::int64_t W_F = 8;
  std::int64_t W_T = 8;
  std::int64_t G = 2;  // memory tokens
  int heads = 4;
  std::int64_t window_ffn = 960;  // window layer feed-forward width
  std::int64_t path_hidden = 128;  // GRU width per direction in path layers
  ChannelModuleKind channel_module = ChannelModuleKind::kTattc;
  ChannelAttention::Scale attention_scale = ChannelAttention::Scale::kHT2;
  bool channel_residual = true;
  int reference_channel = 0;
  double segment_seconds = 4.0;

  // Paper-sized defaults for each variant.
  static ModelConfig Defaults(Variant v);
  void Validate() const;
  int TransformerLayers() const;
  // Frames per segment for segmented variants, memory excluded.
  std::int64_t SegmentFrames() const;

  nlohmann::json ToJson() const;
  // Missing keys keep the defaults of the variant named in "variant".
  static ModelConfig FromJson(const nlohmann::json& j);
};

std::string VariantName(Variant v);
Variant ParseVariant(const std::string& s);
std::string ChannelModuleName(ChannelModuleKind k);
ChannelModuleKind ParseChannelModule(const std::string& s);

// Parameter indices of one multi-path block.
struct MultiPathBlock {
  std::vector<WindowAttentionLayer> windows;
  std::vector<PathTransformerLayer> paths;
  bool has_memory = false;
  MemoryTokens memory;
  enum class Channel { kNone, kTac, kTattc, kAttention } channel = Channel::kNone;
  TacBlock tac;
  TattcBlock tattc;
  AttentionBlock attention;
};

struct ModelLayout {
  SpectralEncoder encoder;
  std::vector<MultiPathBlock> blocks;
  SpectralDecoder decoder;

  template <typename T>
  static ModelLayout Create(const ModelConfig& cfg, ParameterSet<T>& params, Initializer& init);
  std::int64_t NumParams() const;
};

class Model {
 public:
  // Deterministic given (config, seed).
  static Model Build(const ModelConfig& cfg, std::uint64_t seed);
  // Adopts `params`, which must match the layout of `cfg` name for name.
  static Model FromParameters(const ModelConfig& cfg, ParameterSet<float> params);

  const ModelConfig& config() const { return config_; }
  const ModelLayout& layout() const { return layout_; }
  ParameterSet<float>& params() { return params_; }
  const ParameterSet<float>& params() const { return params_; }

  // Enhances a [C, L] mixture into [1, L]. Gradients flow into the leaves of
  // `binding` that require them.
  template <typename T>
  Var<T> Forward(const Binding<T>& binding, const Tensor<T>& mixture, int rate_hz) const;
  Waveform Forward(const Waveform& mixture) const;

 private:
  ModelConfig config_;
  ModelLayout layout_;
  ParameterSet<float> params_;
};

std::int64_t CountParams(const ParameterSet<float>& params);
// Analytic multiply-accumulates of one forward pass over `seconds` of audio.
std::uint64_t CountMacs(const ModelConfig& cfg, int rate_hz, int channels, double seconds);

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};
void WriteWeights(const std::string& path, const ParameterSet<float>& params);
std::vector<NamedTensor> ReadWeights(const std::string& path);

// `metadata` is merged into config.json next to the "model" key.
void SaveCheckpoint(const std::string& dir, const Model& model, const nlohmann::json& metadata = {});
std::pair<Model, nlohmann::json> LoadCheckpoint(const std::string& dir);

}  // namespace uses2
