// SPDX-License-Identifier: Apache-2.0
//
// Experiment plumbing: configuration, on-disk artifacts per seed, the pipeline
// stages, metrics, sweeps and the cross-seed summary.
//
//   <out>/seed-<N>/corpus.jsonl
//                  teacher.ckpt, student.ckpt
//                  detection.json, heatmap.csv
//                  counterfactuals.jsonl
//                  student_kd.ckpt, student_leaf.ckpt, history_*.json
//                  pilot.json, metrics.json, timing.json
//   <out>/summary.json
//   <out>/sweep_<axis>.csv

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "leaf/corpus.hpp"
#include "leaf/detection.hpp"
#include "leaf/distill.hpp"
#include "leaf/model.hpp"

namespace leaf {

struct PilotConfig {
  double tau = 0.10;
  int min_span_len = 1;
};

struct ExperimentConfig {
  CorpusConfig corpus;
  ModelConfig teacher;
  ModelConfig student;
  TrainConfig teacher_train;
  TrainConfig student_train;
  DetectionConfig detection;
  DistillConfig distill;
  PilotConfig pilot;
  std::vector<double> sweep_tau{0.05, 0.10, 0.15};
  std::vector<double> sweep_lambda{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::string> sweep_strategy{"gradient", "random", "ppl", "none"};
  std::vector<std::string> sweep_splitting{"no-split", "2-segment", "3-segment"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::filesystem::path out_dir = "runs/default";

  void validate() const;
};

/// Built-in defaults (the same values as configs/default.json).
ExperimentConfig default_experiment_config();
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& file, const std::string& producer);
};

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path corpus() const { return dir / "corpus.jsonl"; }
  std::filesystem::path teacher() const { return dir / "teacher.ckpt"; }
  std::filesystem::path student() const { return dir / "student.ckpt"; }
  std::filesystem::path detection() const { return dir / "detection.json"; }
  std::filesystem::path heatmap() const { return dir / "heatmap.csv"; }
  std::filesystem::path counterfactuals() const { return dir / "counterfactuals.jsonl"; }
  std::filesystem::path distilled(const std::string& variant) const { return dir / ("student_" + variant + ".ckpt"); }
  std::filesystem::path history(const std::string& variant) const { return dir / ("history_" + variant + ".json"); }
  std::filesystem::path pilot() const { return dir / "pilot.json"; }
  std::filesystem::path metrics() const { return dir / "metrics.json"; }
  std::filesystem::path timing() const { return dir / "timing.json"; }
};

RunPaths run_paths(const ExperimentConfig& cfg, std::uint64_t seed);

/// Named sub-stream seeds for one run.
std::uint64_t stream_seed(std::uint64_t seed, const char* name);

// Per-seed stages. Each reads its inputs from disk, writes its outputs, and
// throws MissingArtifact when an upstream file is absent.
void stage_generate(const ExperimentConfig& cfg, std::uint64_t seed);
void stage_train_teacher(const ExperimentConfig& cfg, std::uint64_t seed);
void stage_train_student(const ExperimentConfig& cfg, std::uint64_t seed);
void stage_detect(const ExperimentConfig& cfg, std::uint64_t seed);
void stage_build_cf(const ExperimentConfig& cfg, std::uint64_t seed);
void stage_distill(const ExperimentConfig& cfg, std::uint64_t seed);
nlohmann::json stage_pilot(const ExperimentConfig& cfg, std::uint64_t seed);
nlohmann::json stage_evaluate(const ExperimentConfig& cfg, std::uint64_t seed);

/// All stages for one seed; returns the metrics document.
nlohmann::json run_seed(const ExperimentConfig& cfg, std::uint64_t seed);

/// run_seed over cfg.seeds, then the cross-seed summary (written to
/// <out>/summary.json and returned).
nlohmann::json run_all(const ExperimentConfig& cfg);
nlohmann::json summarize(const ExperimentConfig& cfg, const std::vector<nlohmann::json>& per_seed);

// ----------------------------------------------------------------- metrics

double jaccard(const TokenSeq& a, const TokenSeq& b);

struct SignTest {
  int wins = 0;
  int losses = 0;
  int ties = 0;
  double p_value = 1.0;  // one-sided, ties dropped
};
SignTest sign_test(const std::vector<double>& differences);

/// Generated response (prompt stripped) of greedy decoding from `prompt`.
TokenSeq decode_response(const ModelParams& model, const TokenSeq& prompt, TokenId stop);

struct PilotResult {
  // Every input.
  std::size_t n = 0;
  std::size_t pruned_inputs = 0;
  double acc_before = 0.0;
  double acc_after = 0.0;
  double jaccard_before = 0.0;
  double jaccard_after = 0.0;
  // Inputs the teacher solves and the student does not.
  std::size_t subset_n = 0;
  double subset_acc_before = 0.0;
  double subset_acc_after = 0.0;

  double delta() const { return subset_acc_after - subset_acc_before; }
  double delta_all() const { return acc_after - acc_before; }
};

/// Detect spans on each input against the teacher's own greedy response,
/// prune all of them, and re-evaluate the student. The headline delta is
/// measured on the teacher-right / student-wrong subset.
PilotResult pilot_prune_eval(const ModelParams& teacher, const ModelParams& student, const Corpus& samples,
                             const PilotConfig& cfg, SensitivityReduction reduction, const Vocab& vocab);

// ------------------------------------------------------------------ sweeps

enum class SweepAxis { tau, lambda, strategy, splitting };
const char* to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(const std::string& s);

struct SweepRow {
  std::string value;
  std::uint64_t seed = 0;
  double eval_clean_acc = 0.0;
  double eval_confounded_acc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t counterfactuals = 0;
};

/// One detection + distillation cell per (value, seed) on top of the base
/// teacher/student checkpoints. values empty = the config's default grid.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, SweepAxis axis, std::vector<std::string> values = {});
/// Header, one row per cell, then one "mean" row per value. LF endings.
void write_sweep_csv(SweepAxis axis, const std::vector<SweepRow>& rows, const std::filesystem::path& path);
std::filesystem::path sweep_path(const ExperimentConfig& cfg, SweepAxis axis);
/// Parses a sweep CSV (each row becomes an object keyed by the header) and
/// validates every row against `row_schema`. Also checks LF-only endings.
std::vector<std::string> validate_sweep_csv(const std::filesystem::path& csv, const nlohmann::json& row_schema);

// ------------------------------------------------------------------- schema

/// Validates `instance` against a JSON Schema subset: type, properties,
/// required, additionalProperties (boolean), items, minItems, minimum,
/// maximum, enum, and local "$ref": "#/$defs/<name>". Returns error strings.
std::vector<std::string> validate_schema(const nlohmann::json& instance, const nlohmann::json& schema);

/// Deterministic JSON text used for every artifact.
void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace leaf
