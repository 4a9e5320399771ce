// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/training.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>

namespace uses2 {

using nlohmann::json;
namespace fs = std::filesystem;

// --- config ------------------------------------------------------------------

void TrainConfig::Validate() const {
  auto fail = [](const std::string& m) { throw Error("train config: " + m); };
  if (!(peak_lr > 0)) fail("peak_lr must be positive");
  if (warmup_steps < 1) fail("warmup_steps must be positive");
  if (plateau_patience < 1) fail("plateau_patience must be positive");
  if (!(halving_factor > 0 && halving_factor < 1)) fail("halving_factor must lie in (0, 1)");
  if (batch < 1) fail("batch must be positive");
  if (!(chunk_seconds > 0)) fail("chunk_seconds must be positive");
  if (max_channels < 2) fail("max_channels must be at least 2");
  if (epochs < 1) fail("epochs must be positive");
  if (max_steps < 0) fail("max_steps must be non-negative");
  if (!(clip_norm > 0)) fail("clip_norm must be positive");
  loss.Validate();
}

json TrainConfig::ToJson() const {
  return json{{"peak_lr", peak_lr},
              {"warmup_steps", warmup_steps},
              {"plateau_patience", plateau_patience},
              {"halving_factor", halving_factor},
              {"batch", batch},
              {"chunk_seconds", chunk_seconds},
              {"max_channels", max_channels},
              {"seed", seed},
              {"epochs", epochs},
              {"max_steps", max_steps},
              {"clip_norm", clip_norm},
              {"adam_beta1", adam_beta1},
              {"adam_beta2", adam_beta2},
              {"adam_eps", adam_eps},
              {"loss", {{"fft_sizes", loss.fft_sizes}, {"time_weight", loss.time_weight}}}};
}

TrainConfig TrainConfig::FromJson(const json& j) {
  if (!j.is_object()) throw Error("train config: expected a JSON object");
  TrainConfig c;
  const json known = c.ToJson();
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw Error("train config: unknown key \"" + key + "\"");
  try {
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.halving_factor = j.value("halving_factor", c.halving_factor);
    c.batch = j.value("batch", c.batch);
    c.chunk_seconds = j.value("chunk_seconds", c.chunk_seconds);
    c.max_channels = j.value("max_channels", c.max_channels);
    c.seed = j.value("seed", c.seed);
    c.epochs = j.value("epochs", c.epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    if (j.contains("loss")) {
      const json& l = j["loss"];
      c.loss.fft_sizes = l.value("fft_sizes", c.loss.fft_sizes);
      c.loss.time_weight = l.value("time_weight", c.loss.time_weight);
    }
  } catch (const json::exception& e) {
    throw Error(std::string("train config: ") + e.what());
  }
  c.Validate();
  return c;
}

// --- schedule ----------------------------------------------------------------

double LrAt(std::int64_t step, int halvings, const TrainConfig& cfg) {
  const double ramp = std::min(1.0, static_cast<double>(std::max<std::int64_t>(step, 0)) /
                                        static_cast<double>(cfg.warmup_steps));
  return cfg.peak_lr * ramp * std::pow(cfg.halving_factor, halvings);
}

double LrAt(std::int64_t step, const std::vector<double>& val_history, const TrainConfig& cfg) {
  LrSchedule s;
  for (double v : val_history) s.Observe(v, cfg);
  return s.At(step, cfg);
}

bool LrSchedule::Observe(double val_loss, const TrainConfig& cfg) {
  if (val_loss < best) {
    best = val_loss;
    bad_epochs = 0;
    return false;
  }
  if (++bad_epochs < cfg.plateau_patience) return false;
  ++halvings;
  bad_epochs = 0;
  return true;
}

double LrSchedule::At(std::int64_t step, const TrainConfig& cfg) const { return LrAt(step, halvings, cfg); }

// --- sampling ----------------------------------------------------------------

std::int64_t ChunkOffset(std::int64_t length, std::int64_t chunk, std::mt19937_64& rng) {
  if (length < 1) throw Error("sample_chunk: empty utterance");
  if (length <= chunk) return 0;
  return UniformIndex(rng, length - chunk + 1);
}

namespace {

Tensor<float> Crop(const Tensor<float>& x, std::int64_t offset, std::int64_t len) {
  const std::int64_t C = x.dim(0), L = x.dim(1);
  Tensor<float> out({C, len});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t n = 0; n < len && offset + n < L; ++n) out[c * len + n] = x[c * L + offset + n];
  return out;
}

}  // namespace

Example SampleChunk(const Example& utt, const TrainConfig& cfg, std::mt19937_64& rng) {
  const std::int64_t L = utt.mixture.dim(1);
  const auto chunk = static_cast<std::int64_t>(std::llround(cfg.chunk_seconds * utt.rate_hz));
  const std::int64_t offset = ChunkOffset(L, chunk, rng);
  return {utt.id, Crop(utt.mixture, offset, chunk), Crop(utt.reference, offset, chunk), utt.rate_hz};
}

std::vector<int> SampleChannels(int channels, int stage, int max_channels, std::mt19937_64& rng) {
  if (channels < 1) throw Error("sample_channels: no channels");
  if (stage == 1) return {static_cast<int>(UniformIndex(rng, channels))};
  if (stage != 2) throw Error("sample_channels: stage must be 1 or 2");
  if (channels < 2) throw Error("sample_channels: stage 2 needs at least two channels");
  std::vector<int> order(channels);
  std::iota(order.begin(), order.end(), 0);
  for (int i = channels - 1; i > 0; --i) std::swap(order[i], order[UniformIndex(rng, i + 1)]);
  const int hi = std::min(channels, max_channels);
  order.resize(2 + UniformIndex(rng, hi - 1));
  return order;
}

Example SelectChannels(const Example& utt, const std::vector<int>& channels) {
  const std::int64_t L = utt.mixture.dim(1);
  Example out{utt.id, Tensor<float>({static_cast<std::int64_t>(channels.size()), L}), Tensor<float>({1, L}),
              utt.rate_hz};
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const int c = channels[i];
    if (c < 0 || c >= utt.mixture.dim(0)) throw Error("select channels: index out of range");
    std::copy_n(utt.mixture.data() + c * L, L, out.mixture.data() + i * L);
  }
  const int target = utt.reference.dim(0) == 1 ? 0 : channels.front();
  if (target >= utt.reference.dim(0)) throw Error("select channels: reference has too few channels");
  std::copy_n(utt.reference.data() + target * L, L, out.reference.data());
  return out;
}

std::vector<Example> LoadExamples(const std::vector<UtteranceRecord>& records) {
  std::vector<Example> out;
  for (const auto& r : records) {
    const Waveform mix = ReadWav(r.mixture);
    const Waveform ref = ReadWav(r.reference);
    if (mix.channels() != r.channels)
      throw Error(r.id + ": manifest says " + std::to_string(r.channels) + " channels, WAV has " +
                  std::to_string(mix.channels()));
    if (mix.rate_hz != r.rate_hz || ref.rate_hz != r.rate_hz) throw Error(r.id + ": sampling rate mismatch");
    if (ref.length() != mix.length()) throw Error(r.id + ": mixture and reference lengths differ");
    if (ref.channels() != 1 && ref.channels() != mix.channels())
      throw Error(r.id + ": reference must have 1 or " + std::to_string(mix.channels()) + " channels");
    out.push_back({r.id, mix.samples, ref.samples, r.rate_hz});
  }
  return out;
}

// --- loop --------------------------------------------------------------------

json LogRecord::ToJson() const {
  json j{{"step", step}, {"stage", stage}, {"lr", lr}, {"train_loss", train_loss}};
  j["val_loss"] = val_loss ? json(*val_loss) : json(nullptr);
  if (clipped) j["clipped"] = true;
  return j;
}

namespace {

std::vector<Example> Filter(const std::vector<Example>& data, const StageSpec& stage) {
  std::vector<Example> out;
  for (const auto& e : data)
    if (stage.Accepts(e)) out.push_back(e);
  return out;
}

std::vector<int> LeadingChannels(const Example& e, const StageSpec& stage, int max_channels) {
  const int n = stage.stage == 1 ? 1 : std::min<int>(static_cast<int>(e.mixture.dim(0)), max_channels);
  std::vector<int> c(n);
  std::iota(c.begin(), c.end(), 0);
  return c;
}

void SaveAdam(const std::string& path, const AdamState& adam) {
  ParameterSet<float> set;
  for (std::size_t i = 0; i < adam.names.size(); ++i) {
    set.Add("m." + adam.names[i], adam.m[i], false);
    set.Add("v." + adam.names[i], adam.v[i], false);
  }
  WriteWeights(path, set);
}

}  // namespace

double ValidationLoss(const Model& model, const std::vector<Example>& data, const StageSpec& stage,
                      const TrainConfig& cfg) {
  const auto examples = Filter(data, stage);
  if (examples.empty()) throw Error("validation: no usable examples");
  Binding<float> binding(model.params());
  double total = 0;
  for (const auto& e : examples) {
    const Example sel = SelectChannels(e, LeadingChannels(e, stage, cfg.max_channels));
    Var<float> est = model.Forward(binding, sel.mixture, sel.rate_hz);
    total += Loss(est, Var<float>(sel.reference), cfg.loss).value()[0];
  }
  return total / static_cast<double>(examples.size());
}

void SaveTrainingCheckpoint(const std::string& dir, const Model& model, const TrainConfig& cfg, int stage,
                            const AdamState& adam, const LrSchedule& schedule, int epoch) {
  json meta{{"train", cfg.ToJson()},
            {"stage", stage},
            {"step", adam.step},
            {"epoch", epoch},
            {"schedule",
             {{"halvings", schedule.halvings},
              {"bad_epochs", schedule.bad_epochs},
              {"best", std::isfinite(schedule.best) ? json(schedule.best) : json(nullptr)}}}};
  SaveCheckpoint(dir, model, meta);
  SaveAdam(dir + "/optimizer.bin", adam);
}

TrainResult RunStage(Model& model, const StageSpec& stage, const std::vector<Example>& train_all,
                     const std::vector<Example>& dev_all, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.Validate();
  if (stage.stage != 1 && stage.stage != 2) throw Error("train: stage must be 1 or 2");
  const auto train = Filter(train_all, stage);
  const auto dev = Filter(dev_all, stage);
  if (train.empty())
    throw Error(std::string("train: no ") + (stage.stage == 1 ? "single" : "multi") +
                "-channel examples in the training data");

  auto& params = model.params();
  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (stage.Trainable(params[i])) trainable.push_back(i);
  if (trainable.empty()) throw Error("train: stage has no trainable parameters");

  AdamState adam;
  for (auto i : trainable) {
    adam.names.push_back(params[i].name);
    adam.m.emplace_back(params[i].value.shape());
    adam.v.emplace_back(params[i].value.shape());
  }
  LrSchedule schedule;
  int epoch = 0;

  if (!opts.resume_dir.empty()) {
    auto [loaded, meta] = LoadCheckpoint(opts.resume_dir);
    if (meta.value("stage", 0) != stage.stage)
      throw Error("train: resume checkpoint is not a stage-" + std::to_string(stage.stage) + " checkpoint");
    model = std::move(loaded);
    adam.step = meta.value("step", std::int64_t{0});
    epoch = meta.value("epoch", 0);
    const json& s = meta.at("schedule");
    schedule.halvings = s.value("halvings", 0);
    schedule.bad_epochs = s.value("bad_epochs", 0);
    if (!s["best"].is_null()) schedule.best = s["best"].get<double>();
    const std::string opt = opts.resume_dir + "/optimizer.bin";
    if (fs::exists(opt)) {
      ParameterSet<float> st;
      for (auto& t : ReadWeights(opt)) st.Add(t.name, std::move(t.value), false);
      for (std::size_t k = 0; k < adam.names.size(); ++k) {
        adam.m[k] = st[st.IndexOf("m." + adam.names[k])].value;
        adam.v[k] = st[st.IndexOf("v." + adam.names[k])].value;
      }
    }
  }
  auto& live = model.params();

  const std::int64_t n = static_cast<std::int64_t>(train.size());
  const std::int64_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::int64_t total = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * per_epoch;

  std::ofstream log_file;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    log_file.open(opts.out_dir + "/train_log.jsonl", std::ios::app);
    if (!log_file) throw Error("cannot write " + opts.out_dir + "/train_log.jsonl");
  }
  auto emit = [&](const LogRecord& r) {
    const std::string line = r.ToJson().dump();
    if (log_file) log_file << line << "\n" << std::flush;
    if (opts.log) *opts.log << line << "\n" << std::flush;
  };

  const auto pred = [&stage](const Parameter<float>& p) { return stage.Trainable(p); };
  TrainResult result;
  std::vector<Tensor<float>> grads(trainable.size());
  std::vector<std::int64_t> order(n);

  for (std::int64_t step = adam.step; step < total; ++step) {
    const std::int64_t ep = step / per_epoch, pos = step % per_epoch;
    std::iota(order.begin(), order.end(), 0);
    auto erng = DeriveRng(cfg.seed, "stage" + std::to_string(stage.stage) + "-epoch-" + std::to_string(ep));
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[UniformIndex(erng, i + 1)]);

    for (std::size_t k = 0; k < trainable.size(); ++k) grads[k] = Tensor<float>(live[trainable[k]].value.shape());
    const std::int64_t first = pos * cfg.batch, last = std::min(n, first + cfg.batch);
    const float inv = 1.0f / static_cast<float>(last - first);
    double batch_loss = 0;
    for (std::int64_t b = first; b < last; ++b) {
      auto rng = DeriveRng(cfg.seed, "stage" + std::to_string(stage.stage) + "-step-" + std::to_string(step) +
                                         "-item-" + std::to_string(b - first));
      const Example& utt = train[order[b]];
      const Example ex = SampleChunk(
          SelectChannels(utt, SampleChannels(static_cast<int>(utt.mixture.dim(0)), stage.stage, cfg.max_channels, rng)),
          cfg, rng);
      Binding<float> binding(live, pred);
      Var<float> est = model.Forward(binding, ex.mixture, ex.rate_hz);
      Var<float> loss = Loss(est, Var<float>(ex.reference), cfg.loss);
      batch_loss += loss.value()[0];
      Backward(ops::Scale(loss, inv));
      for (std::size_t k = 0; k < trainable.size(); ++k) {
        const Tensor<float>& g = binding[trainable[k]].grad();
        if (g.numel() == 0) continue;
        for (std::int64_t i = 0; i < g.numel(); ++i) grads[k][i] += g[i];
      }
    }

    double norm2 = 0;
    for (const auto& g : grads)
      for (float v : g.span()) norm2 += static_cast<double>(v) * v;
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw Error("train: non-finite gradient at step " + std::to_string(step + 1));
    const bool clipped = norm > cfg.clip_norm;
    const double clip = clipped ? cfg.clip_norm / norm : 1.0;

    adam.step = step + 1;
    const double lr = schedule.At(adam.step, cfg);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(adam.step));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(adam.step));
    for (std::size_t k = 0; k < trainable.size(); ++k) {
      Tensor<float>& w = live[trainable[k]].value;
      for (std::int64_t i = 0; i < w.numel(); ++i) {
        const double g = grads[k][i] * clip;
        const double m = cfg.adam_beta1 * adam.m[k][i] + (1 - cfg.adam_beta1) * g;
        const double v = cfg.adam_beta2 * adam.v[k][i] + (1 - cfg.adam_beta2) * g * g;
        adam.m[k][i] = static_cast<float>(m);
        adam.v[k][i] = static_cast<float>(v);
        w[i] = static_cast<float>(w[i] - lr * (m / c1) / (std::sqrt(v / c2) + cfg.adam_eps));
      }
    }

    LogRecord rec{adam.step, stage.stage, lr, batch_loss / static_cast<double>(last - first), std::nullopt, clipped};
    const bool epoch_end = pos == per_epoch - 1;
    bool improved = false;
    if (epoch_end) {
      epoch = static_cast<int>(ep) + 1;
      if (!dev.empty()) {
        const double val = ValidationLoss(model, dev, stage, cfg);
        rec.val_loss = val;
        improved = val < schedule.best;
        schedule.Observe(val, cfg);
      }
    }
    emit(rec);
    result.log.push_back(rec);
    result.final_train_loss = rec.train_loss;
    if ((epoch_end || adam.step == total) && !opts.out_dir.empty()) {
      SaveTrainingCheckpoint(opts.out_dir + "/last", model, cfg, stage.stage, adam, schedule, epoch);
      if (improved) SaveTrainingCheckpoint(opts.out_dir + "/best", model, cfg, stage.stage, adam, schedule, epoch);
    }
  }
  result.steps = adam.step;
  return result;
}

}  // namespace uses2
