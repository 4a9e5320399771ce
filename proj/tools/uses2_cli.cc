// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// uses2: corpus generation, two-stage training, enhancement, evaluation and
// model statistics from the command line.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "uses2/datagen.h"
#include "uses2/evalcli.h"
#include "uses2/training.h"

namespace {

using nlohmann::json;
using namespace uses2;

json ReadJsonFile(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw Error("invalid JSON in " + path + ": " + e.what());
  }
}

void WriteJsonFile(const std::string& path, const json& j) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  os << j.dump(2) << "\n";
}

int RunDatagen(const std::string& out, CorpusSpec spec) {
  const auto manifests = BuildCorpus(out, spec);
  for (const auto& [key, path] : manifests.paths) std::cout << key << " " << path << "\n";
  return 0;
}

int RunTrain(int stage_no, const std::string& config_path, const std::string& data, const std::string& dev_path,
             const std::string& resume, std::string out) {
  const json cfg_json = config_path.empty() ? json::object() : ReadJsonFile(config_path);
  for (const auto& [key, _] : cfg_json.items())
    if (key != "model" && key != "train") throw Error("config: unknown top-level key \"" + key + "\"");
  const TrainConfig tcfg = TrainConfig::FromJson(cfg_json.value("train", json::object()));
  const StageSpec stage{stage_no};
  if (out.empty()) out = "runs/stage" + std::to_string(stage_no);

  std::optional<Model> model;
  std::string resume_dir;
  if (!resume.empty()) {
    auto [loaded, meta] = LoadCheckpoint(resume);
    const int ck_stage = meta.value("stage", 0);
    if (ck_stage == stage_no) {
      resume_dir = resume;
    } else if (!(stage_no == 2 && ck_stage == 1)) {
      throw Error("checkpoint " + resume + " is from stage " + std::to_string(ck_stage) +
                  ", cannot be used for stage " + std::to_string(stage_no));
    }
    model.emplace(std::move(loaded));
  } else if (stage_no == 2) {
    throw Error("stage 2 requires a stage-1 checkpoint (--resume CKPT)");
  } else {
    model.emplace(Model::Build(ModelConfig::FromJson(cfg_json.value("model", json{{"variant", "comp"}})),
                               tcfg.seed));
  }

  const auto train = LoadExamples(ReadManifest(data));
  const std::vector<Example> dev = dev_path.empty() ? std::vector<Example>{} : LoadExamples(ReadManifest(dev_path));
  const TrainResult r = RunStage(*model, stage, train, dev, tcfg, TrainOptions{out, resume_dir, &std::cout});
  std::cout << "finished stage " << stage_no << " after " << r.steps << " steps; checkpoint " << out << "/last\n";
  return 0;
}

int RunEvaluate(const std::string& ckpt, bool bypass, const std::string& manifest, const std::string& report) {
  if (ckpt.empty() && !bypass) throw Error("evaluate needs --ckpt DIR or --bypass");
  std::optional<Model> model;
  if (!bypass) model.emplace(LoadCheckpoint(ckpt).first);
  const EvalReport rep = Evaluate(model ? &*model : nullptr, ReadManifest(manifest));
  WriteJsonFile(report, rep.ToJson());
  std::cout << "records " << rep.rows.size() << "  mean SDR " << rep.mean.sdr_db << " dB  mean SI-SDR "
            << rep.mean.si_sdr_db << " dB  SI-SDR improvement " << rep.mean.si_sdr_improvement_db() << " dB\n";
  return 0;
}

int RunInfo(const std::string& ckpt, const std::string& config_path, const std::string& variant) {
  const int given = !ckpt.empty() + !config_path.empty() + !variant.empty();
  if (given != 1) throw Error("info needs exactly one of --ckpt, --config, --variant");
  Model model = !ckpt.empty() ? LoadCheckpoint(ckpt).first
                : !variant.empty()
                    ? Model::Build(ModelConfig::Defaults(ParseVariant(variant)), 0)
                    : Model::Build(ModelConfig::FromJson(ReadJsonFile(config_path).value("model", json::object())), 0);
  std::cout << Stats(model).ToJson(model.config()).dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Input-condition invariant speech enhancement"};
  app.require_subcommand(1);

  auto* datagen = app.add_subcommand("datagen", "Generate a synthetic corpus with manifests");
  std::string dg_out;
  CorpusSpec corpus;
  datagen->add_option("--out", dg_out, "Output directory")->required();
  datagen->add_option("--seed", corpus.seed, "Random seed")->required();
  datagen->add_option("--train", corpus.train, "Training utterances per subset")->required()->check(CLI::NonNegativeNumber);
  datagen->add_option("--dev", corpus.dev, "Development utterances per subset")->required()->check(CLI::NonNegativeNumber);
  datagen->add_option("--test", corpus.test, "Test utterances per subset")->required()->check(CLI::NonNegativeNumber);
  datagen->add_option("--min-seconds", corpus.min_seconds, "Shortest utterance");
  datagen->add_option("--max-seconds", corpus.max_seconds, "Longest utterance");

  auto* train = app.add_subcommand("train", "Run one training stage");
  int stage = 1;
  std::string config, data, dev, resume, out;
  train->add_option("--stage", stage, "Stage")->required()->check(CLI::IsMember({1, 2}));
  train->add_option("--config", config, "JSON with optional \"model\" and \"train\" objects")->check(CLI::ExistingFile);
  train->add_option("--data", data, "Training manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--dev", dev, "Validation manifest")->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "Checkpoint to resume, or the stage-1 checkpoint for stage 2")
      ->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "Run directory (default runs/stage<N>)");

  auto* enhance = app.add_subcommand("enhance", "Enhance one WAV file");
  std::string ckpt, in_wav, out_wav;
  enhance->add_option("--ckpt", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  enhance->add_option("--in", in_wav, "Input WAV")->required()->check(CLI::ExistingFile);
  enhance->add_option("--out", out_wav, "Output WAV")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Score a manifest with SDR and SI-SDR");
  std::string manifest, report;
  bool bypass = false;
  evaluate->add_option("--ckpt", ckpt, "Checkpoint directory")->check(CLI::ExistingDirectory);
  evaluate->add_flag("--bypass", bypass, "Score the unprocessed reference channel");
  evaluate->add_option("--manifest", manifest, "Manifest")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--report", report, "Report JSON path")->required();

  auto* info = app.add_subcommand("info", "Parameter and MAC counts");
  std::string info_config, variant;
  info->add_option("--ckpt", ckpt, "Checkpoint directory")->check(CLI::ExistingDirectory);
  info->add_option("--config", info_config, "Config JSON")->check(CLI::ExistingFile);
  info->add_option("--variant", variant, "Default config of a variant")
      ->check(CLI::IsMember({"comp", "swin", "uses_baseline"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*datagen) return RunDatagen(dg_out, corpus);
    if (*train) return RunTrain(stage, config, data, dev, resume, out);
    if (*enhance) {
      EnhanceFile(ckpt, in_wav, out_wav);
      return 0;
    }
    if (*evaluate) return RunEvaluate(ckpt, bypass, manifest, report);
    if (*info) return RunInfo(ckpt, info_config, variant);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
