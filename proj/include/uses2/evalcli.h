// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Metrics and the operations behind the command-line tool.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "uses2/datagen.h"
#include "uses2/model.h"

namespace uses2 {

inline constexpr double kMetricCapDb = 100.0;

// 10 log10(|s|^2 / |est - s|^2), clamped to [-100, 100] dB.
double Sdr(const float* estimate, const float* reference, std::int64_t n);
// SDR after rescaling the estimate by its projection onto the reference.
double SiSdr(const float* estimate, const float* reference, std::int64_t n);
double Sdr(const Tensor<float>& estimate, const Tensor<float>& reference);
double SiSdr(const Tensor<float>& estimate, const Tensor<float>& reference);

Waveform Enhance(const Model& model, const Waveform& mixture);
void EnhanceFile(const std::string& ckpt_dir, const std::string& in_wav, const std::string& out_wav);

struct EvalRow {
  std::string id;
  double sdr_db = 0, si_sdr_db = 0;
  double noisy_sdr_db = 0, noisy_si_sdr_db = 0;
  double sdr_improvement_db() const { return sdr_db - noisy_sdr_db; }
  double si_sdr_improvement_db() const { return si_sdr_db - noisy_si_sdr_db; }
};

struct EvalReport {
  std::vector<EvalRow> rows;
  EvalRow mean;
  std::int64_t params = 0;
  double macs_per_s_1ch = 0, macs_per_s_2ch = 0;
  nlohmann::json ToJson() const;
};

// A null model scores the reference channel of the mixture itself.
EvalReport Evaluate(const Model* model, const std::vector<UtteranceRecord>& records);

struct ModelStats {
  std::int64_t params = 0;
  std::uint64_t macs_1ch = 0, macs_2ch = 0;  // per second of 16 kHz audio
  int transformer_layers = 0;
  nlohmann::json ToJson(const ModelConfig& cfg) const;
};
ModelStats Stats(const Model& model);

}  // namespace uses2
