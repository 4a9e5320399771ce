// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "test_util.h"
#include "uses2/training.h"

using namespace uses2;
using nlohmann::json;
using uses2::testing::RandomTensor;

namespace {

Example MakeExample(const std::string& id, std::int64_t channels, std::int64_t length, std::uint64_t seed) {
  Example e{id, RandomTensor<float>({channels, length}, seed, 0.3), RandomTensor<float>({channels, length}, seed + 1, 0.3),
            8000};
  return e;
}

ModelConfig TinyConfig() {
  return ModelConfig::FromJson(
      {{"variant", "comp"}, {"N", 8}, {"heads", 2}, {"W_F", 4}, {"W_T", 4}, {"K", 2}, {"K_s", 1}});
}

TrainConfig TinyTrain() {
  TrainConfig t;
  t.peak_lr = 1e-3;
  t.warmup_steps = 2;
  t.batch = 2;
  t.chunk_seconds = 0.1;
  return t;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  const TrainConfig cfg;
  CHECK(LrAt(0, 0, cfg) == 0.0);
  CHECK(LrAt(2000, 0, cfg) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(LrAt(4000, 0, cfg) == doctest::Approx(4e-4).epsilon(1e-12));
  CHECK(LrAt(10000, 0, cfg) == doctest::Approx(4e-4).epsilon(1e-12));
  CHECK(LrAt(4000, 1, cfg) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(LrAt(1000, 2, cfg) == doctest::Approx(2.5e-5).epsilon(1e-12));
}

TEST_CASE("plateau halving needs two consecutive bad epochs") {
  const TrainConfig cfg;
  LrSchedule s;
  CHECK(!s.Observe(1.0, cfg));
  CHECK(!s.Observe(1.1, cfg));
  CHECK(!s.Observe(0.9, cfg));  // improvement resets the count
  CHECK(!s.Observe(0.95, cfg));
  CHECK(s.halvings == 0);
  CHECK(s.Observe(0.9, cfg));  // equal is not an improvement
  CHECK(s.halvings == 1);
  CHECK(!s.Observe(1.0, cfg));
  CHECK(s.Observe(1.0, cfg));
  CHECK(s.halvings == 2);
  CHECK(LrAt(5000, {1.0, 1.1, 0.9, 0.95, 0.9}, cfg) == doctest::Approx(2e-4));
  CHECK(LrAt(5000, {1.0, 1.1, 1.2}, cfg) == doctest::Approx(2e-4));
  CHECK(LrAt(5000, {1.0, 1.1}, cfg) == doctest::Approx(4e-4));
}

TEST_CASE("train config json") {
  TrainConfig t;
  t.batch = 3;
  t.loss.fft_sizes = {128, 256};
  const TrainConfig back = TrainConfig::FromJson(t.ToJson());
  CHECK(back.ToJson() == t.ToJson());
  CHECK_THROWS_AS(TrainConfig::FromJson({{"batchsize", 3}}), Error);
  CHECK_THROWS_AS(TrainConfig::FromJson({{"batch", 0}}), Error);
  CHECK_THROWS_AS(TrainConfig::FromJson({{"peak_lr", -1}}), Error);
}

TEST_CASE("chunk sampling") {
  std::mt19937_64 rng(1);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto o = ChunkOffset(10, 4, rng);
    CHECK(o >= 0);
    CHECK(o <= 6);
    seen.insert(o);
  }
  CHECK(seen.size() == 7);
  CHECK(ChunkOffset(3, 4, rng) == 0);
  CHECK_THROWS_AS(ChunkOffset(0, 4, rng), Error);

  // Short utterances are zero padded to the chunk length, aligned pairs stay aligned.
  Example e = MakeExample("a", 2, 500, 3);
  TrainConfig cfg;
  cfg.chunk_seconds = 0.1;
  const Example c = SampleChunk(e, cfg, rng);
  CHECK(c.mixture.shape() == Shape{2, 800});
  CHECK(c.reference.shape() == Shape{2, 800});
  CHECK(c.mixture[499] == e.mixture[499]);
  CHECK(c.mixture[500] == 0.0f);
  cfg.chunk_seconds = 0.05;
  const Example d = SampleChunk(e, cfg, rng);
  CHECK(d.mixture.shape() == Shape{2, 400});
  std::int64_t off = -1;
  for (std::int64_t o = 0; o <= 100 && off < 0; ++o)
    if (e.mixture[o] == d.mixture[0] && e.mixture[o + 1] == d.mixture[1]) off = o;
  REQUIRE(off >= 0);
  CHECK(d.reference[0] == e.reference[off]);
  CHECK(d.mixture[400 + 5] == e.mixture[500 + off + 5]);
}

TEST_CASE("channel sampling") {
  std::mt19937_64 rng(2);
  std::set<std::size_t> sizes;
  std::set<int> firsts;
  for (int i = 0; i < 500; ++i) {
    const auto ch = SampleChannels(5, 2, 4, rng);
    sizes.insert(ch.size());
    firsts.insert(ch.front());
    CHECK(std::set<int>(ch.begin(), ch.end()).size() == ch.size());
    for (int c : ch) CHECK((c >= 0 && c < 5));
  }
  CHECK(sizes == std::set<std::size_t>{2, 3, 4});
  CHECK(firsts.size() == 5);
  CHECK(SampleChannels(3, 1, 4, rng).size() == 1);
  CHECK_THROWS_AS(SampleChannels(1, 2, 4, rng), Error);

  // The reference follows the first selected channel.
  const Example e = MakeExample("b", 3, 10, 4);
  const Example s = SelectChannels(e, {2, 0});
  CHECK(s.mixture.shape() == Shape{2, 10});
  CHECK(s.mixture[0] == e.mixture[20]);
  CHECK(s.mixture[10] == e.mixture[0]);
  CHECK(s.reference.shape() == Shape{1, 10});
  CHECK(s.reference[3] == e.reference[23]);
  CHECK_THROWS_AS(SelectChannels(e, {3}), Error);
}

TEST_CASE("stages select data and parameters") {
  const StageSpec s1{1}, s2{2};
  Parameter<float> shared{"x", {}, false}, chan{"y", {}, true};
  CHECK(s1.Trainable(shared));
  CHECK(!s1.Trainable(chan));
  CHECK(!s2.Trainable(shared));
  CHECK(s2.Trainable(chan));
  CHECK(s1.Accepts(MakeExample("a", 1, 10, 1)));
  CHECK(!s1.Accepts(MakeExample("a", 2, 10, 1)));
  CHECK(s2.Accepts(MakeExample("a", 3, 10, 1)));

  Model m = Model::Build(TinyConfig(), 1);
  TrainConfig t = TinyTrain();
  t.max_steps = 1;
  CHECK_THROWS_AS(RunStage(m, s2, {MakeExample("a", 1, 800, 1)}, {}, t), Error);
}

TEST_CASE("stage two only moves channel modules") {
  const auto dir = std::filesystem::temp_directory_path() / "uses2_test_freeze";
  std::filesystem::remove_all(dir);
  std::vector<Example> mono, multi;
  for (int i = 0; i < 2; ++i) mono.push_back(MakeExample("m" + std::to_string(i), 1, 800, 10 + i));
  for (int i = 0; i < 2; ++i) multi.push_back(MakeExample("c" + std::to_string(i), 3, 800, 20 + i));

  Model m = Model::Build(TinyConfig(), 1);
  TrainConfig t = TinyTrain();
  t.max_steps = 2;
  std::ostringstream log;
  RunStage(m, StageSpec{1}, mono, {}, t, TrainOptions{(dir / "s1").string(), "", &log});
  const Model s1 = LoadCheckpoint((dir / "s1" / "last").string()).first;
  const json first = json::parse(log.str().substr(0, log.str().find('\n')));
  CHECK(first["stage"] == 1);
  CHECK(first["step"] == 1);

  t.max_steps = 10;
  const TrainResult r = RunStage(m, StageSpec{2}, multi, {}, t, TrainOptions{(dir / "s2").string()});
  CHECK(r.steps == 10);
  int changed = 0;
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& p = m.params()[i];
    if (p.channel_module)
      changed += !(p.value == s1.params()[i].value);
    else
      CHECK(p.value == s1.params()[i].value);
  }
  CHECK(changed >= 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training is reproducible and resumable") {
  const auto dir = std::filesystem::temp_directory_path() / "uses2_test_resume";
  std::filesystem::remove_all(dir);
  std::vector<Example> mono, dev;
  for (int i = 0; i < 3; ++i) mono.push_back(MakeExample("m" + std::to_string(i), 1, 900, 30 + i));
  dev.push_back(MakeExample("d", 1, 800, 40));
  TrainConfig t = TinyTrain();
  t.max_steps = 4;

  Model a = Model::Build(TinyConfig(), 2), b = Model::Build(TinyConfig(), 2);
  const TrainResult ra = RunStage(a, StageSpec{1}, mono, dev, t);
  const TrainResult rb = RunStage(b, StageSpec{1}, mono, dev, t);
  REQUIRE(ra.log.size() == 4);
  for (std::size_t i = 0; i < ra.log.size(); ++i) CHECK(ra.log[i].train_loss == rb.log[i].train_loss);
  // Two steps per epoch: validation runs at steps 2 and 4.
  CHECK(!ra.log[0].val_loss);
  CHECK(ra.log[1].val_loss);
  CHECK(ra.log[3].val_loss);

  Model c = Model::Build(TinyConfig(), 2);
  t.max_steps = 2;
  RunStage(c, StageSpec{1}, mono, dev, t, TrainOptions{(dir / "part").string()});
  t.max_steps = 4;
  const TrainResult rc =
      RunStage(c, StageSpec{1}, mono, dev, t, TrainOptions{(dir / "rest").string(), (dir / "part" / "last").string()});
  REQUIRE(rc.log.size() == 2);
  CHECK(rc.log[0].step == 3);
  CHECK(rc.log[1].train_loss == ra.log[3].train_loss);
  for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(c.params()[i].value == a.params()[i].value);

  std::ifstream is(dir / "part" / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    const json j = json::parse(line);
    CHECK(j.contains("lr"));
    CHECK(j.contains("val_loss"));
    ++lines;
  }
  CHECK(lines == 2);
  CHECK(std::filesystem::exists(dir / "part" / "best" / "weights.bin"));
  CHECK_THROWS_AS(RunStage(c, StageSpec{2}, mono, dev, t, TrainOptions{"", (dir / "part" / "last").string()}), Error);
  std::filesystem::remove_all(dir);
}
