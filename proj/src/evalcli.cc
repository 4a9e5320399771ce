// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/evalcli.h"

#include <algorithm>
#include <cmath>

#include "uses2/datagen.h"

namespace uses2 {

using nlohmann::json;

namespace {

double RatioDb(double signal, double error) {
  if (signal <= 0) return -kMetricCapDb;
  if (error <= 0) return kMetricCapDb;
  return std::clamp(10.0 * std::log10(signal / error), -kMetricCapDb, kMetricCapDb);
}

double Energy(const float* x, std::int64_t n) {
  double e = 0;
  for (std::int64_t i = 0; i < n; ++i) e += static_cast<double>(x[i]) * x[i];
  return e;
}

void CheckPair(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.numel() != b.numel() || a.numel() == 0)
    throw Error("metric: estimate and reference lengths differ (" + ShapeString(a.shape()) + " vs " +
                ShapeString(b.shape()) + ")");
}

}  // namespace

double Sdr(const float* est, const float* ref, std::int64_t n) {
  const double s = Energy(ref, n);
  if (s == 0) throw Error("sdr: zero-energy reference");
  double e = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(est[i]) - ref[i];
    e += d * d;
  }
  return RatioDb(s, e);
}

double SiSdr(const float* est, const float* ref, std::int64_t n) {
  const double ss = Energy(ref, n);
  if (ss == 0) throw Error("si_sdr: zero-energy reference");
  double es = 0;
  for (std::int64_t i = 0; i < n; ++i) es += static_cast<double>(est[i]) * ref[i];
  const double alpha = es / ss;
  double target = 0, error = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double t = alpha * ref[i];
    const double d = static_cast<double>(est[i]) - t;
    target += t * t;
    error += d * d;
  }
  return RatioDb(target, error);
}

double Sdr(const Tensor<float>& est, const Tensor<float>& ref) {
  CheckPair(est, ref);
  return Sdr(est.data(), ref.data(), est.numel());
}

double SiSdr(const Tensor<float>& est, const Tensor<float>& ref) {
  CheckPair(est, ref);
  return SiSdr(est.data(), ref.data(), est.numel());
}

Waveform Enhance(const Model& model, const Waveform& mixture) { return model.Forward(mixture); }

void EnhanceFile(const std::string& ckpt_dir, const std::string& in_wav, const std::string& out_wav) {
  const Model model = LoadCheckpoint(ckpt_dir).first;
  WriteWav(out_wav, Enhance(model, ReadWav(in_wav)));
}

json EvalReport::ToJson() const {
  auto row = [](const EvalRow& r) {
    return json{{"id", r.id},
                {"sdr_db", r.sdr_db},
                {"si_sdr_db", r.si_sdr_db},
                {"noisy_sdr_db", r.noisy_sdr_db},
                {"noisy_si_sdr_db", r.noisy_si_sdr_db},
                {"sdr_improvement_db", r.sdr_improvement_db()},
                {"si_sdr_improvement_db", r.si_sdr_improvement_db()}};
  };
  json rs = json::array();
  for (const auto& r : rows) rs.push_back(row(r));
  json m = row(mean);
  m.erase("id");
  return json{{"rows", rs},
              {"mean", m},
              {"model", {{"params", params}, {"macs_per_s_1ch", macs_per_s_1ch}, {"macs_per_s_2ch", macs_per_s_2ch}}}};
}

EvalReport Evaluate(const Model* model, const std::vector<UtteranceRecord>& records) {
  EvalReport report;
  for (const auto& r : records) {
    const Waveform mix = ReadWav(r.mixture);
    const Waveform ref = ReadWav(r.reference);
    if (mix.channels() != r.channels) throw Error(r.id + ": channel count differs from manifest");
    if (mix.rate_hz != r.rate_hz || ref.rate_hz != r.rate_hz) throw Error(r.id + ": sampling rate mismatch");
    if (mix.length() != ref.length()) throw Error(r.id + ": mixture and reference lengths differ");
    const int ref_ch = model ? model->config().reference_channel : 0;
    if (ref_ch >= mix.channels()) throw Error(r.id + ": reference channel out of range");
    const std::int64_t L = mix.length();
    const float* target = ref.samples.data() + (ref.channels() == 1 ? 0 : ref_ch * L);
    const float* noisy = mix.samples.data() + ref_ch * L;

    EvalRow row;
    row.id = r.id;
    row.noisy_sdr_db = Sdr(noisy, target, L);
    row.noisy_si_sdr_db = SiSdr(noisy, target, L);
    if (model) {
      const Waveform est = Enhance(*model, mix);
      row.sdr_db = Sdr(est.samples.data(), target, L);
      row.si_sdr_db = SiSdr(est.samples.data(), target, L);
    } else {
      row.sdr_db = row.noisy_sdr_db;
      row.si_sdr_db = row.noisy_si_sdr_db;
    }
    report.rows.push_back(row);
  }
  report.mean.id = "mean";
  if (!report.rows.empty()) {
    const double n = static_cast<double>(report.rows.size());
    for (const auto& r : report.rows) {
      report.mean.sdr_db += r.sdr_db / n;
      report.mean.si_sdr_db += r.si_sdr_db / n;
      report.mean.noisy_sdr_db += r.noisy_sdr_db / n;
      report.mean.noisy_si_sdr_db += r.noisy_si_sdr_db / n;
    }
  }
  if (model) {
    const ModelStats s = Stats(*model);
    report.params = s.params;
    report.macs_per_s_1ch = static_cast<double>(s.macs_1ch);
    report.macs_per_s_2ch = static_cast<double>(s.macs_2ch);
  }
  return report;
}

ModelStats Stats(const Model& model) {
  ModelStats s;
  s.params = CountParams(model.params());
  s.macs_1ch = CountMacs(model.config(), 16000, 1, 1.0);
  s.macs_2ch = CountMacs(model.config(), 16000, 2, 1.0);
  s.transformer_layers = model.config().TransformerLayers();
  return s;
}

json ModelStats::ToJson(const ModelConfig& cfg) const {
  return json{{"variant", VariantName(cfg.variant)},
              {"params", params},
              {"params_millions", static_cast<double>(params) / 1e6},
              {"macs_per_s_1ch", macs_1ch},
              {"macs_per_s_2ch", macs_2ch},
              {"gmacs_per_s_1ch", static_cast<double>(macs_1ch) / 1e9},
              {"gmacs_per_s_2ch", static_cast<double>(macs_2ch) / 1e9},
              {"transformer_layers", transformer_layers},
              {"config", cfg.ToJson()}};
}

}  // namespace uses2
