// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Two-stage training: stage 1 fits every parameter outside the channel modules
// on single-channel data; stage 2 fits only the channel modules on
// multi-channel data with everything else frozen.

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "uses2/datagen.h"
#include "uses2/model.h"
#include "uses2/objective.h"

namespace uses2 {

struct TrainConfig {
  double peak_lr = 4e-4;
  std::int64_t warmup_steps = 4000;
  int plateau_patience = 2;
  double halving_factor = 0.5;
  int batch = 4;
  double chunk_seconds = 4.0;
  int max_channels = 4;
  std::uint64_t seed = 0;

  int epochs = 100;
  std::int64_t max_steps = 0;  // stop early when positive
  double clip_norm = 5.0;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  LossConfig loss;

  void Validate() const;
  nlohmann::json ToJson() const;
  static TrainConfig FromJson(const nlohmann::json& j);
};

// Plateau bookkeeping for the learning-rate schedule.
struct LrSchedule {
  int halvings = 0;
  int bad_epochs = 0;
  double best = std::numeric_limits<double>::infinity();

  // Records one validation loss; returns true when it triggers a halving.
  bool Observe(double val_loss, const TrainConfig& cfg);
  double At(std::int64_t step, const TrainConfig& cfg) const;
};

double LrAt(std::int64_t step, int halvings, const TrainConfig& cfg);
// Replays the plateau rule over a validation history.
double LrAt(std::int64_t step, const std::vector<double>& val_history, const TrainConfig& cfg);

struct Example {
  std::string id;
  Tensor<float> mixture;    // [C, L]
  Tensor<float> reference;  // [C_ref, L]; row c is the clean image of mixture channel c
  int rate_hz = 0;
};

// Start offset of a `chunk`-sample crop: uniform over valid starts, 0 when the
// utterance is not longer than the chunk.
std::int64_t ChunkOffset(std::int64_t length, std::int64_t chunk, std::mt19937_64& rng);
// Random crop (or zero padding at the end) of both signals to chunk_seconds.
Example SampleChunk(const Example& utt, const TrainConfig& cfg, std::mt19937_64& rng);
// Stage 1: one channel uniformly. Stage 2: a shuffled subset of size uniform
// over {2, ..., min(C, max_channels)}.
std::vector<int> SampleChannels(int channels, int stage, int max_channels, std::mt19937_64& rng);
// Picks mixture channels; the target becomes the clean image of the first.
Example SelectChannels(const Example& utt, const std::vector<int>& channels);

// Loads every record; channel counts and rates must match the WAV headers.
std::vector<Example> LoadExamples(const std::vector<UtteranceRecord>& records);

struct StageSpec {
  int stage = 1;
  bool Trainable(const Parameter<float>& p) const { return stage == 1 ? !p.channel_module : p.channel_module; }
  bool Accepts(const Example& e) const { return stage == 1 ? e.mixture.dim(0) == 1 : e.mixture.dim(0) >= 2; }
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::string> names;
  std::vector<Tensor<float>> m, v;
};

struct LogRecord {
  std::int64_t step = 0;
  int stage = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  bool clipped = false;
  nlohmann::json ToJson() const;
};

struct TrainOptions {
  std::string out_dir;     // checkpoints and train_log.jsonl; empty writes nothing
  std::string resume_dir;  // a checkpoint of the same stage to continue
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::vector<LogRecord> log;
  double final_train_loss = 0;
  std::int64_t steps = 0;
};

// Mean loss over the filtered examples, each evaluated in full with its
// leading channels (up to max_channels).
double ValidationLoss(const Model& model, const std::vector<Example>& data, const StageSpec& stage,
                      const TrainConfig& cfg);

// Trains `model` in place. Checkpoints go to <out>/last after every epoch and
// <out>/best when validation improves.
TrainResult RunStage(Model& model, const StageSpec& stage, const std::vector<Example>& train,
                     const std::vector<Example>& dev, const TrainConfig& cfg, const TrainOptions& opts = {});

// Checkpoint with training state next to the weights.
void SaveTrainingCheckpoint(const std::string& dir, const Model& model, const TrainConfig& cfg, int stage,
                            const AdamState& adam, const LrSchedule& schedule, int epoch);

}  // namespace uses2
