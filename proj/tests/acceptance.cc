// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Acceptance checks. Prints one PASS or FAIL line per criterion and exits
// nonzero if any fail. Arguments select a subset by number.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "test_util.h"
#include "uses2/channel_blocks.h"
#include "uses2/datagen.h"
#include "uses2/evalcli.h"
#include "uses2/objective.h"
#include "uses2/tf_blocks.h"
#include "uses2/training.h"

using namespace uses2;
using uses2::testing::GradCheck;
using uses2::testing::LayerGradCheck;
using uses2::testing::MaxAbsDiff;
using uses2::testing::RandomTensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double Seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

// 1 ---------------------------------------------------------------------------
Outcome StftRoundTrip() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  for (int rate : {8000, 16000, 48000})
    for (std::int64_t c = 1; c <= 5; ++c) {
      const auto cfg = StftConfig::ForRate(rate);
      const auto x = RandomTensor<float>({c, 4 * rate}, static_cast<std::uint64_t>(rate + c));
      worst = std::max(worst, MaxAbsDiff(IstftForward(StftForward(x, cfg), cfg, x.dim(1)), x));
    }
  const double secs = Seconds(t0);
  return {worst < 1e-4 && secs < 10, "max error " + Fmt("%.2e", worst) + ", " + Fmt("%.1f", secs) + " s"};
}

ModelConfig SmokeModel() {
  return ModelConfig::FromJson({{"variant", "comp"}, {"N", 32}, {"K", 2}, {"K_s", 1}});
}

// 2 ---------------------------------------------------------------------------
Outcome SamplingRateIndependence() {
  const auto t0 = std::chrono::steady_clock::now();
  const Model model = Model::Build(SmokeModel(), 3);
  bool ok = true;
  std::set<std::int64_t> frames;
  std::ostringstream d;
  for (int rate : {8000, 16000, 48000}) {
    const Waveform x{RandomTensor<float>({1, rate / 2}, static_cast<std::uint64_t>(rate), 0.3), rate};
    const Waveform y = model.Forward(x);
    bool finite = true;
    for (float v : y.samples.span()) finite = finite && std::isfinite(v);
    ok = ok && finite && y.samples.shape() == Shape{1, x.length()} && y.rate_hz == rate;
    frames.insert(StftConfig::ForRate(rate).Frames(x.length()));
    d << rate << " Hz: " << x.length() << " -> " << y.length() << " samples; ";
  }
  const double secs = Seconds(t0);
  ok = ok && frames.size() == 1 && secs < 60;
  d << "frames " << *frames.begin() << (frames.size() == 1 ? " at every rate" : " differ") << ", "
    << Fmt("%.1f", secs) << " s";
  return {ok, d.str()};
}

// 3 ---------------------------------------------------------------------------
Tensor<float> PermuteChannels(const Tensor<float>& x, const std::array<int, 3>& perm) {
  Tensor<float> y(x.shape());
  const std::int64_t per = x.numel() / x.dim(0);
  for (int c = 0; c < 3; ++c) std::copy(x.data() + perm[c] * per, x.data() + (perm[c] + 1) * per, y.data() + c * per);
  return y;
}

Outcome PermutationEquivariance() {
  ParameterSet<float> params;
  Initializer init(5);
  Builder<float> b{params, init, true};
  const auto tac = TacBlock::Create(b, "tac", 32, 96);
  const auto tattc = TattcBlock::Create(b, "tattc", 32, 32, ChannelAttention::Scale::kHT2);
  const Binding<float> p(params);
  const auto x = RandomTensor<float>({3, 9, 13, 32}, 6);
  auto worst = [&](const std::function<Tensor<float>(const Tensor<float>&)>& f) {
    const Tensor<float> base = f(x);
    std::array<int, 3> perm{0, 1, 2};
    double w = 0;
    do w = std::max(w, MaxAbsDiff(f(PermuteChannels(x, perm)), PermuteChannels(base, perm)));
    while (std::next_permutation(perm.begin(), perm.end()));
    return w;
  };
  const double a = worst([&](const Tensor<float>& v) { return tac(p, Var<float>(v)).value(); });
  const double c = worst([&](const Tensor<float>& v) { return tattc(p, Var<float>(v)).value(); });
  return {a < 1e-5 && c < 1e-5, "6 permutations, TAC " + Fmt("%.2e", a) + ", TA_ttC " + Fmt("%.2e", c)};
}

// 4 ---------------------------------------------------------------------------
Outcome DecoupledSkip() {
  bool ok = true;
  std::ostringstream d;
  for (const char* v : {"comp", "swin"}) {
    Model m = Model::Build(ModelConfig::FromJson({{"variant", v}, {"N", 32}, {"K", 2}, {"K_s", 2}}), 7);
    const Waveform x{RandomTensor<float>({1, 8000}, 8, 0.3), 8000};
    const Tensor<float> before = m.Forward(x).samples;
    Initializer init(99);
    int rerandomized = 0;
    for (auto& prm : m.params())
      if (prm.channel_module) {
        prm.value = init.UniformTensor<float>(prm.value.shape(), 1.0);
        ++rerandomized;
      }
    const bool same = m.Forward(x).samples == before;
    ok = ok && same && rerandomized > 0;
    if (d.tellp() > 0) d << "; ";
    d << v << ": " << rerandomized << " tensors re-randomized, output " << (same ? "bit-identical" : "changed");
  }
  return {ok, d.str()};
}

// Synthetic utterances for the training criteria.
std::vector<Example> Utterances(int count, int channels, double seconds, std::uint64_t seed, bool uneven) {
  std::vector<Example> out;
  for (int i = 0; i < count; ++i) {
    const std::string id = (channels == 1 ? "mono" : "multi") + std::to_string(i);
    auto rng = DeriveRng(seed, id);
    const Waveform clean = SynthesizeSpeechLike(seconds, 8000, rng);
    SceneSpec s;
    s.duration_s = seconds;
    s.rate_hz = 8000;
    s.channels = channels;
    for (int c = 0; c < channels; ++c) {
      // Uneven: the reference microphone is the noisiest one.
      const double snr = uneven ? (c == 0 ? -5.0 : 5.0 + 5.0 * c) + 2.0 * UniformUnit(rng) : 5.0 * UniformUnit(rng);
      s.snr_db.push_back(snr);
      s.delay.push_back(c == 0 ? 0 : UniformIndex(rng, 8));
    }
    const Scene sc = SpatializeAndMix(clean, s, rng);
    out.push_back({id, sc.mixture.samples, sc.images.samples, 8000});
  }
  return out;
}

// Mean SI-SDR improvement of the model over the noisy reference channel.
double MeanImprovement(const Model& model, const std::vector<Example>& data) {
  double sum = 0;
  for (const auto& e : data) {
    const std::int64_t L = e.mixture.dim(1);
    const Waveform est = model.Forward(Waveform{e.mixture, e.rate_hz});
    sum += SiSdr(est.samples.data(), e.reference.data(), L) - SiSdr(e.mixture.data(), e.reference.data(), L);
  }
  return sum / static_cast<double>(data.size());
}

std::filesystem::path WorkDir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("uses2_acceptance_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

// 5 ---------------------------------------------------------------------------
Outcome TwoStageFreeze() {
  const auto dir = WorkDir("freeze");
  const ModelConfig cfg =
      ModelConfig::FromJson({{"variant", "comp"}, {"N", 8}, {"heads", 2}, {"W_F", 4}, {"W_T", 4}, {"K", 2}, {"K_s", 1}});
  Model model = Model::Build(cfg, 11);
  TrainConfig t;
  t.peak_lr = 1e-3;
  t.warmup_steps = 2;
  t.batch = 2;
  t.chunk_seconds = 0.25;
  t.max_steps = 2;
  RunStage(model, StageSpec{1}, Utterances(2, 1, 0.5, 12, false), {}, t, TrainOptions{(dir / "s1").string()});
  const Model stage1 = LoadCheckpoint((dir / "s1" / "last").string()).first;
  t.max_steps = 10;
  const TrainResult r = RunStage(model, StageSpec{2}, Utterances(2, 3, 0.5, 13, true), {}, t);
  int frozen_same = 0, frozen_total = 0, moved = 0;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const bool same = model.params()[i].value == stage1.params()[i].value;
    if (model.params()[i].channel_module) {
      moved += !same;
    } else {
      ++frozen_total;
      frozen_same += same;
    }
  }
  std::filesystem::remove_all(dir);
  return {r.steps == 10 && frozen_same == frozen_total && moved >= 1,
          std::to_string(r.steps) + " stage-2 steps, " + std::to_string(frozen_same) + "/" +
              std::to_string(frozen_total) + " frozen tensors bit-identical, " + std::to_string(moved) +
              " channel tensors changed"};
}

// 6 ---------------------------------------------------------------------------
Outcome GradientChecks() {
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream d;
  double worst = 0;
  auto note = [&](const char* name, double err) {
    worst = std::max(worst, err);
    d << name << " " << Fmt("%.1e", err) << "; ";
  };
  {
    ParameterSet<double> ps;
    Initializer init(21);
    Builder<double> b{ps, init, false};
    const auto win = WindowAttentionLayer::Create(b, "w", 4, 2, WindowSpec{2, 2, true}, 8);
    note("window", LayerGradCheck(ps, RandomTensor<double>({3, 5, 6, 4}, 22),
                                  [&](const Binding<double>& p, const Var<double>& v) { return win(p, v); }));
  }
  using Axis = PathTransformerLayer::Axis;
  for (Axis axis : {Axis::kFrequency, Axis::kTime}) {
    ParameterSet<double> ps;
    Initializer init(23);
    Builder<double> b{ps, init, false};
    const auto path = PathTransformerLayer::Create(b, "p", axis, 4, 2, 4);
    note(axis == Axis::kFrequency ? "freq path" : "time path",
         LayerGradCheck(ps, RandomTensor<double>({3, 5, 6, 4}, 24),
                        [&](const Binding<double>& p, const Var<double>& v) { return path(p, v); }));
  }
  // ReLU and PReLU kinks make finite differences unreliable; this instance has
  // no pre-activation within eps of zero.
  const auto x = RandomTensor<double>({3, 2, 5, 4}, 31);
  {
    ParameterSet<double> ps;
    Initializer init(131);
    Builder<double> b{ps, init, true};
    const auto tac = TacBlock::Create(b, "tac", 4, 6);
    note("tac", LayerGradCheck(ps, x, [&](const Binding<double>& p, const Var<double>& v) { return tac(p, v); }));
  }
  {
    ParameterSet<double> ps;
    Initializer init(131);
    Builder<double> b{ps, init, true};
    const auto tattc = TattcBlock::Create(b, "tattc", 4, 3, ChannelAttention::Scale::kHT2);
    note("tattc", LayerGradCheck(ps, x, [&](const Binding<double>& p, const Var<double>& v) { return tattc(p, v); }));
  }
  {
    const LossConfig cfg;
    const Var<double> ref(RandomTensor<double>({1, 512}, 33));
    note("objective", GradCheck({RandomTensor<double>({1, 512}, 34)},
                                [&](const std::vector<Var<double>>& v) { return Loss(v[0], ref, cfg); }));
  }
  const double secs = Seconds(t0);
  d << Fmt("%.1f", secs) << " s";
  return {worst < 1e-4 && secs < 120, d.str()};
}

// 7 ---------------------------------------------------------------------------
Outcome LossScaleInvariance() {
  const LossConfig cfg;
  double worst = 0;
  for (int rate : {8000, 16000}) {
    const Waveform s{RandomTensor<float>({1, rate}, static_cast<std::uint64_t>(rate), 0.5), rate};
    for (float a : {0.5f, 1.0f, 2.0f}) {
      Waveform e = s;
      for (auto& v : e.samples.span()) v *= a;
      worst = std::max(worst, static_cast<double>(Loss(e, s, cfg)));
    }
  }
  return {worst < 1e-6, "max loss " + Fmt("%.2e", worst) + " over alpha in {0.5, 1, 2}"};
}

// 8 ---------------------------------------------------------------------------
Outcome WindowMachinery() {
  bool exact = true;
  const auto x = RandomTensor<float>({2, 13, 21, 6}, 41);
  for (bool shifted : {false, true}) {
    const WindowPlan plan = PlanWindows(x.shape(), WindowSpec{8, 8, shifted});
    exact = exact && MergeWindows(PartitionWindows(Var<float>(x), plan), plan).value() == x;
  }
  // Coordinate tags: the first token of the first shifted window sits at the shift.
  bool shifts = true;
  const std::int64_t F = 20, T = 24;
  Tensor<float> tags({1, F, T, 2});
  for (std::int64_t f = 0; f < F; ++f)
    for (std::int64_t t = 0; t < T; ++t) {
      tags[(f * T + t) * 2] = static_cast<float>(f);
      tags[(f * T + t) * 2 + 1] = static_cast<float>(t);
    }
  for (auto [wf, wt] : {std::pair{8, 8}, {5, 7}, {4, 6}}) {
    const WindowSpec spec{wf, wt, true};
    const auto w = PartitionWindows(Var<float>(tags), PlanWindows(tags.shape(), spec)).value();
    shifts = shifts && spec.shift_f() == wf / 2 && spec.shift_t() == wt / 2 && w[0] == static_cast<float>(wf / 2) &&
             w[1] == static_cast<float>(wt / 2);
  }
  ParameterSet<float> ps;
  Initializer init(42);
  Builder<float> b{ps, init, false};
  const auto layer = WindowAttentionLayer::Create(b, "w", 16, 4, WindowSpec{8, 8, false}, 32);
  const Shape table = ps[layer.rel_bias].value.shape();
  const bool shape_ok = table == Shape{4, 15, 15};
  return {exact && shifts && shape_ok, std::string("merge(partition) ") + (exact ? "bit-exact" : "differs") +
                                           ", shifts " + (shifts ? "floor(W/2)" : "wrong") + ", bias table " +
                                           ShapeString(table)};
}

// 9 ---------------------------------------------------------------------------
Outcome TableOrderings() {
  std::int64_t params[3];
  std::uint64_t macs[3];
  const Variant vs[3] = {Variant::kComp, Variant::kSwin, Variant::kBaseline};
  for (int i = 0; i < 3; ++i) {
    const ModelConfig cfg = ModelConfig::Defaults(vs[i]);
    params[i] = CountParams(Model::Build(cfg, 0).params());
    macs[i] = CountMacs(cfg, 16000, 1, 1.0);
  }
  const bool ok = params[0] < params[1] && params[1] < params[2] && macs[1] < macs[0] && macs[0] < macs[2];
  std::ostringstream d;
  d << "params comp/swin/baseline " << Fmt("%.2f", params[0] / 1e6) << " < " << Fmt("%.2f", params[1] / 1e6) << " < "
    << Fmt("%.2f", params[2] / 1e6) << " M; 1-ch MACs swin/comp/baseline " << Fmt("%.1f", macs[1] / 1e9) << " < "
    << Fmt("%.1f", macs[0] / 1e9) << " < " << Fmt("%.1f", macs[2] / 1e9) << " G/s";
  return {ok, d.str()};
}

// 10 --------------------------------------------------------------------------
Outcome OverfitSmoke() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = WorkDir("smoke");
  const auto mono = Utterances(8, 1, 1.0, 51, false);
  const auto multi = Utterances(8, 3, 1.0, 52, true);

  TrainConfig t;
  t.peak_lr = 1e-3;
  t.warmup_steps = 25;
  t.batch = 2;
  t.chunk_seconds = 1.0;
  t.max_steps = 300;
  Model model = Model::Build(SmokeModel(), 1);
  RunStage(model, StageSpec{1}, mono, {}, t, TrainOptions{(dir / "stage1").string()});
  const double stage1_mono = MeanImprovement(model, mono);
  const double stage1_multi = MeanImprovement(model, multi);

  t.max_steps = 100;
  t.warmup_steps = 10;
  RunStage(model, StageSpec{2}, multi, {}, t, TrainOptions{(dir / "stage2").string()});
  const double stage2_multi = MeanImprovement(model, multi);
  const double secs = Seconds(t0);
  std::filesystem::remove_all(dir);

  const bool ok = stage1_mono >= 5.0 && stage2_multi >= stage1_multi && secs < 20 * 60;
  return {ok, "stage 1 mono improvement " + Fmt("%.2f", stage1_mono) + " dB; 3-ch improvement " +
                  Fmt("%.2f", stage1_multi) + " dB after stage 1, " + Fmt("%.2f", stage2_multi) +
                  " dB after stage 2; " + Fmt("%.0f", secs) + " s"};
}

// 11 --------------------------------------------------------------------------
Outcome SchedulerClosedForm() {
  const TrainConfig cfg;
  const double a = LrAt(2000, 0, cfg), b = LrAt(4000, 0, cfg), c = LrAt(4000, 1, cfg);
  const bool values = std::abs(a - 2e-4) < 1e-12 && std::abs(b - 4e-4) < 1e-12 && std::abs(c - 2e-4) < 1e-12;
  // Halving fires on the second consecutive non-improving epoch, not the first.
  LrSchedule s;
  const bool first = s.Observe(1.0, cfg);
  const bool worse1 = s.Observe(1.2, cfg);
  const bool worse2 = s.Observe(1.1, cfg);
  const bool improved = s.Observe(0.5, cfg);
  const bool worse3 = s.Observe(0.6, cfg);
  const bool plateau = !first && !worse1 && worse2 && !improved && !worse3 && s.halvings == 1;
  return {values && plateau, "lr(2000)=" + Fmt("%g", a) + ", lr(4000)=" + Fmt("%g", b) + ", halved " +
                                 Fmt("%g", c) + "; plateau halving " + (plateau ? "after 2 bad epochs" : "wrong")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"STFT round trip", StftRoundTrip},
      {"sampling-rate independence", SamplingRateIndependence},
      {"channel permutation equivariance", PermutationEquivariance},
      {"decoupled single-channel skip", DecoupledSkip},
      {"two-stage freeze", TwoStageFreeze},
      {"gradient checks", GradientChecks},
      {"loss scale invariance", LossScaleInvariance},
      {"window machinery", WindowMachinery},
      {"model size and cost orderings", TableOrderings},
      {"overfit smoke test", OverfitSmoke},
      {"scheduler closed form", SchedulerClosedForm},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << n << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
