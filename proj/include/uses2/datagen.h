// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Synthetic corpus generation, WAV I/O and manifest files.
//
// A manifest is JSON Lines, one record per utterance:
//   {"id": "...", "mixture": "x.wav", "reference": "y.wav", "rate": 16000,
//    "channels": 3, "snr_db": [10.0, -5.0, 20.0]}
// Relative paths are resolved against the manifest's directory. The reference
// file holds the clean speech image of every mixture channel; channel 0 is
// the enhancement target.

#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "uses2/spectral_codec.h"

namespace uses2 {

enum class WavFormat { kFloat32, kPcm16 };

// Reads PCM 8/16/24/32-bit and IEEE float 32/64-bit WAV files.
Waveform ReadWav(const std::string& path);
void WriteWav(const std::string& path, const Waveform& w, WavFormat format = WavFormat::kFloat32);

struct UtteranceRecord {
  std::string id;
  std::string mixture;    // resolved path
  std::string reference;  // resolved path
  int rate_hz = 0;
  int channels = 0;
  std::vector<double> snr_db;
};

std::vector<UtteranceRecord> ReadManifest(const std::string& path);
// Paths are written relative to the manifest directory when they lie below it.
void WriteManifest(const std::string& path, const std::vector<UtteranceRecord>& records);

struct SceneSpec {
  double duration_s = 4.0;
  int rate_hz = 16000;
  int channels = 1;
  std::vector<double> gain_db;         // per channel, default 0
  std::vector<std::int64_t> delay;     // per channel, samples, default 0
  std::vector<double> snr_db;          // per channel; +inf means no noise
  std::vector<bool> failed;            // per channel: speech removed, noise kept

  void Validate() const;
};

struct Scene {
  Waveform mixture;    // [C, L]
  Waveform reference;  // [1, L]: clean image at channel 0
  Waveform images;     // [C, L]: clean image at every channel
};

// Amplitude-modulated harmonics with a drifting fundamental plus band-limited
// noise bursts, peak-normalized to 0.5.
Waveform SynthesizeSpeechLike(double duration_s, int rate_hz, std::mt19937_64& rng);

Scene SpatializeAndMix(const Waveform& clean, const SceneSpec& spec, std::mt19937_64& rng);

// Random scene for a corpus entry: uneven gains, delays and SNRs, and
// occasionally a failed microphone on a non-reference channel.
SceneSpec RandomScene(double duration_s, int rate_hz, int channels, std::mt19937_64& rng);

struct CorpusSpec {
  std::uint64_t seed = 0;
  int train = 8, dev = 2, test = 2;
  double min_seconds = 2.0, max_seconds = 5.0;
  std::vector<int> rates{8000, 16000};
  int min_channels = 2, max_channels = 5;
};

struct CorpusManifests {
  // Keyed "<subset>/<split>", subset in {single, multi}, split in {train, dev, test}.
  std::vector<std::pair<std::string, std::string>> paths;
};

// Writes <out>/<subset>/<split>/*.wav and <out>/<subset>/<split>.jsonl.
CorpusManifests BuildCorpus(const std::string& out_dir, const CorpusSpec& spec);

// Independent stream per (seed, key) so generation order does not matter.
std::mt19937_64 DeriveRng(std::uint64_t seed, const std::string& key);
// Uniform integer in [0, n) and uniform real in [0, 1) from raw draws.
std::int64_t UniformIndex(std::mt19937_64& rng, std::int64_t n);
double UniformUnit(std::mt19937_64& rng);
double Gaussian(std::mt19937_64& rng);

double PowerDb(const float* x, std::int64_t n);

}  // namespace uses2
