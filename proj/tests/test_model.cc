// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "test_util.h"
#include "uses2/model.h"

using namespace uses2;
using nlohmann::json;
using uses2::testing::MaxAbsDiff;
using uses2::testing::RandomTensor;

namespace {

ModelConfig Tiny(const std::string& variant) {
  return ModelConfig::FromJson({{"variant", variant}, {"N", 8}, {"heads", 2}, {"W_F", 4}, {"W_T", 4}});
}

Waveform Noise(std::int64_t channels, int rate, double seconds, std::uint64_t seed) {
  return {RandomTensor<float>({channels, static_cast<std::int64_t>(seconds * rate)}, seed, 0.3), rate};
}

std::filesystem::path TempDir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("uses2_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("default configs") {
  for (auto v : {Variant::kComp, Variant::kSwin, Variant::kBaseline}) {
    const auto cfg = ModelConfig::Defaults(v);
    CHECK(cfg.TransformerLayers() == 12);
    CHECK(cfg.N == 128);
    CHECK(ModelConfig::FromJson(cfg.ToJson()).ToJson() == cfg.ToJson());
  }
  CHECK(ModelConfig::Defaults(Variant::kComp).SegmentFrames() == 251);
  CHECK_THROWS_AS(ModelConfig::FromJson({{"variant", "comp"}, {"bogus", 1}}), Error);
  CHECK_THROWS_AS(ModelConfig::FromJson({{"variant", "nope"}}), Error);
  CHECK_THROWS_AS(ModelConfig::FromJson({{"K", 2}, {"K_s", 3}}), Error);
  CHECK_THROWS_AS(ModelConfig::FromJson({{"N", 10}, {"heads", 4}}), Error);
  CHECK_THROWS_AS(ModelConfig::FromJson({{"N", "big"}}), Error);
}

TEST_CASE("parameter counts are consistent") {
  // A 4 -> 3 fully connected layer has 15 parameters.
  ParameterSet<float> ps;
  Initializer init(0);
  Builder<float> b{ps, init, false};
  CHECK(LinearRef::Create(b, "fc", 4, 3).NumParams() == 15);
  CHECK(ps.NumElements() == 15);

  for (auto v : {"comp", "swin", "uses_baseline"}) {
    const Model m = Model::Build(Tiny(v), 1);
    CHECK(m.layout().NumParams() == CountParams(m.params()));
  }
}

TEST_CASE("build is deterministic and channel modules are tagged") {
  const auto cfg = Tiny("comp");
  const Model a = Model::Build(cfg, 3), b = Model::Build(cfg, 3), c = Model::Build(cfg, 4);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].value == b.params()[i].value);
    differs = differs || !(a.params()[i].value == c.params()[i].value);
  }
  CHECK(differs);
  int tagged = 0;
  for (const auto& p : a.params()) {
    CHECK(p.channel_module == (p.name.find(".channel.") != std::string::npos));
    tagged += p.channel_module;
  }
  CHECK(tagged > 0);
  // Only the first K_s blocks own a channel module.
  for (const auto& p : a.params())
    if (p.channel_module) CHECK(std::stoi(p.name.substr(7)) < cfg.K_s);
}

TEST_CASE("single-channel output ignores channel module weights") {
  for (auto v : {"comp", "swin"}) {
    Model m = Model::Build(Tiny(v), 5);
    const Waveform x = Noise(1, 8000, 0.3, 6);
    const Tensor<float> before = m.Forward(x).samples;
    Initializer init(77);
    for (auto& p : m.params())
      if (p.channel_module) p.value = init.UniformTensor<float>(p.value.shape(), 1.0);
    CHECK(m.Forward(x).samples == before);
  }
}

TEST_CASE("output length follows input at any supported rate") {
  const Model m = Model::Build(Tiny("comp"), 7);
  for (int rate : {8000, 16000, 48000}) {
    const auto sc = StftConfig::ForRate(rate);
    CHECK(sc.Frames(rate / 2) == 32);
    for (double sec : {0.25, 0.3123}) {
      const Waveform x = Noise(1, rate, sec, rate);
      const Waveform y = m.Forward(x);
      CHECK(y.samples.shape() == Shape{1, x.length()});
      CHECK(y.rate_hz == rate);
    }
  }
  CHECK_THROWS_AS(m.Forward(Noise(1, 44100, 0.1, 1)), Error);
}

TEST_CASE("multi-channel forward follows the reference channel") {
  auto cfg = Tiny("comp");
  const Model m0 = Model::Build(cfg, 8);
  cfg.reference_channel = 1;
  const Model m1 = Model::FromParameters(cfg, m0.params());
  const Waveform x = Noise(2, 8000, 0.3, 9);
  Waveform swapped = x;
  const std::int64_t L = x.length();
  std::copy(x.samples.data(), x.samples.data() + L, swapped.samples.data() + L);
  std::copy(x.samples.data() + L, x.samples.data() + 2 * L, swapped.samples.data());
  const auto y0 = m0.Forward(x).samples;
  CHECK(y0.shape() == Shape{1, L});
  CHECK(MaxAbsDiff(y0, m1.Forward(swapped).samples) < 1e-5);
  CHECK_THROWS_AS(m1.Forward(Noise(1, 8000, 0.3, 9)), Error);
}

TEST_CASE("long inputs run in segments") {
  auto cfg = Tiny("comp");
  cfg.segment_seconds = 0.1;
  const Model m = Model::Build(cfg, 10);
  CHECK(cfg.SegmentFrames() == 7);
  const Waveform x = Noise(1, 8000, 0.5, 11);
  CHECK(m.Forward(x).samples.shape() == x.samples.shape());
}

TEST_CASE("analytic MACs match the instrumented count") {
  for (auto v : {"comp", "swin", "uses_baseline"}) {
    for (int channels : {1, 2}) {
      auto cfg = Tiny(v);
      cfg.segment_seconds = 0.2;
      const Model m = Model::Build(cfg, 12);
      ResetMacCounter();
      m.Forward(Noise(channels, 8000, 0.5, 13));
      CHECK(MacCounter() == CountMacs(cfg, 8000, channels, 0.5));
    }
  }
}

TEST_CASE("checkpoints round trip and reject corruption") {
  const auto dir = TempDir("ckpt");
  const Model m = Model::Build(Tiny("swin"), 14);
  SaveCheckpoint(dir.string(), m, {{"stage", 1}, {"step", 5}});
  auto [loaded, meta] = LoadCheckpoint(dir.string());
  CHECK(meta["stage"] == 1);
  CHECK(meta["step"] == 5);
  CHECK(loaded.config().ToJson() == m.config().ToJson());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(loaded.params()[i].name == m.params()[i].name);
    CHECK(loaded.params()[i].value == m.params()[i].value);
    CHECK(loaded.params()[i].channel_module == m.params()[i].channel_module);
  }

  const auto weights = dir / "weights.bin";
  const auto size = std::filesystem::file_size(weights);
  std::filesystem::resize_file(weights, size - 7);
  CHECK_THROWS_AS(LoadCheckpoint(dir.string()), Error);
  {
    std::ofstream os(weights, std::ios::binary | std::ios::trunc);
    os << "garbage";
  }
  CHECK_THROWS_AS(LoadCheckpoint(dir.string()), Error);
  {
    std::ofstream os(dir / "config.json", std::ios::trunc);
    os << "{not json";
  }
  CHECK_THROWS_AS(LoadCheckpoint(dir.string()), Error);
  CHECK_THROWS_AS(LoadCheckpoint((dir / "missing").string()), Error);

  // Weights from a different config are refused.
  const auto other = TempDir("ckpt_other");
  SaveCheckpoint(other.string(), Model::Build(Tiny("comp"), 1));
  std::filesystem::copy_file(dir / "../uses2_test_ckpt_other/weights.bin", dir / "weights.bin",
                             std::filesystem::copy_options::overwrite_existing);
  SaveCheckpoint((dir / "b").string(), m);
  std::filesystem::copy_file(other / "weights.bin", dir / "b" / "weights.bin",
                             std::filesystem::copy_options::overwrite_existing);
  CHECK_THROWS_AS(LoadCheckpoint((dir / "b").string()), Error);
}
