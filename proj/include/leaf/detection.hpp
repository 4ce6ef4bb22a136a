// SPDX-License-Identifier: Apache-2.0
//
// Confounding-token detection from teacher/student gradient sensitivities,
// span extraction and pruning, counterfactual dataset construction, and the
// random / perplexity masking baselines.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "leaf/corpus.hpp"
#include "leaf/model.hpp"
#include "leaf/splitting.hpp"

namespace leaf {

enum class DetectionScope { instruct, instruct_response };
enum class MaskingStrategy { gradient, random, ppl, none };
enum class TargetProvenance { gold, teacher };

const char* to_string(DetectionScope s);
DetectionScope detection_scope_from_string(const std::string& s);
const char* to_string(MaskingStrategy s);
MaskingStrategy masking_strategy_from_string(const std::string& s);
const char* to_string(TargetProvenance p);
TargetProvenance provenance_from_string(const std::string& s);

struct DetectionConfig {
  double tau = 0.10;
  int min_span_len = 1;
  DetectionScope scope = DetectionScope::instruct;
  SplitMode split = SplitMode::two_segment;  // used only with instruct_response
  bool include_student_wrong_originals = true;
  MaskingStrategy strategy = MaskingStrategy::gradient;
  SensitivityReduction reduction = SensitivityReduction::l2;
  std::uint64_t seed = 0;  // random-baseline stream

  void validate() const;
};

/// A (context, target) pair that detection runs on: the whole response for
/// instruct-level scope, or one split segment for instruct+response scope.
struct DetectionUnit {
  int sample_id = 0;
  std::size_t segment = 0;
  TokenSeq context;  // instruction followed by a response prefix
  TokenSeq target;
  std::size_t instruction_len = 0;
  std::vector<bool> planted;  // per context position: inside a planted span
};

std::vector<DetectionUnit> detection_units(const TaskSample& sample, const DetectionConfig& cfg,
                                           const Vocab& vocab);

struct AttributionRecord {
  int sample_id = 0;
  std::size_t segment = 0;
  std::vector<double> g_teacher;
  std::vector<double> g_student;
  std::vector<double> gn_teacher;
  std::vector<double> gn_student;
  std::vector<double> delta;
  std::vector<double> norm_delta;
  bool degenerate = false;  // delta was constant; see flag_confounders
};

/// (v - min) / (max - min); a constant vector maps to all zeros.
std::vector<double> minmax_normalize(std::span<const double> v);

/// Sensitivities over the unit's context positions for both models, then
/// normalise, difference, and normalise the difference.
AttributionRecord compute_attribution(const ModelParams& teacher, const ModelParams& student,
                                      const DetectionUnit& unit,
                                      SensitivityReduction reduction = SensitivityReduction::l2);

/// Same arithmetic starting from raw sensitivities.
AttributionRecord attribution_from_sensitivities(std::vector<double> g_teacher, std::vector<double> g_student);

/// flags[i] = norm_delta[i] <= tau. A degenerate record (constant delta)
/// carries no signal and is flagged only at tau >= 1, where every token is.
std::vector<bool> flag_confounders(const AttributionRecord& record, double tau);

struct TokenSpan {
  int start = 0;
  int end = 0;
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

/// Maximal runs of set flags with length >= min_len, ascending.
std::vector<TokenSpan> extract_spans(const std::vector<bool>& flags, int min_len = 1);
std::vector<bool> flatten_spans(std::span<const TokenSpan> spans, std::size_t length);

/// Spans over a unit's context, split at the instruction/response boundary and
/// expressed relative to their scoped sequence.
std::vector<ConfounderSpan> extract_scoped_spans(const std::vector<bool>& flags, std::size_t instruction_len,
                                                 int min_len = 1);
TokenSpan to_context_span(const ConfounderSpan& span, std::size_t instruction_len);

/// Deletes every spanned token, preserving order. Spans must be in range and
/// pairwise disjoint.
TokenSeq prune(std::span<const TokenId> tokens, std::span<const TokenSpan> spans);

/// Units the teacher solves (greedy exact match) and the student does not.
std::vector<DetectionUnit> filter_instances(const ModelParams& teacher, const ModelParams& student,
                                            const Corpus& samples, const DetectionConfig& cfg, const Vocab& vocab);

/// Both models reproduce the unit's target after the span is pruned.
bool verify_removal(const ModelParams& teacher, const ModelParams& student, const DetectionUnit& unit,
                    const ConfounderSpan& span);

std::vector<bool> baseline_random_mask(std::size_t scoped_len, std::size_t k, std::uint64_t seed);
std::vector<bool> baseline_ppl_mask(const ModelParams& student, std::span<const TokenId> context, std::size_t k);
/// Per-position student surprisal -log p(x_i | x_<i); position 0 gets ln(vocab).
std::vector<double> token_surprisal(const ModelParams& student, std::span<const TokenId> context);

struct CounterfactualSample {
  int source_id = 0;
  std::size_t segment = 0;
  ConfounderSpan span;
  TokenSeq pruned_input;
  TokenSeq target;
  TargetProvenance provenance = TargetProvenance::gold;
  std::size_t original_length = 0;
  friend bool operator==(const CounterfactualSample&, const CounterfactualSample&) = default;
};

struct SpanDecision {
  ConfounderSpan span;
  bool accepted = false;
};

struct UnitReport {
  int sample_id = 0;
  std::size_t segment = 0;
  TokenSeq context;
  AttributionRecord record;
  std::vector<bool> flags;
  std::vector<SpanDecision> spans;
  std::vector<bool> planted;
};

struct TokenConfusion {
  std::size_t flagged = 0;
  std::size_t planted = 0;
  std::size_t hits = 0;
  double precision() const { return flagged == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(flagged); }
  double recall() const { return planted == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(planted); }
  TokenConfusion& operator+=(const TokenConfusion& o);
};

TokenConfusion score_flags(const std::vector<bool>& flags, const std::vector<bool>& planted);

struct DetectionReport {
  DetectionConfig config;
  std::size_t samples_scanned = 0;
  std::size_t units_scanned = 0;
  std::size_t candidates = 0;
  std::size_t confounded_candidates = 0;
  double base_confounded_rate = 0.0;
  std::size_t spans_proposed = 0;
  std::size_t spans_accepted = 0;
  TokenConfusion tokens;
  std::vector<UnitReport> units;
};

struct CounterfactualBuild {
  std::vector<CounterfactualSample> samples;
  DetectionReport report;
};

/// filter_instances -> compute_attribution -> flag (gradient or a baseline at
/// the gradient method's per-unit budget) -> extract spans -> verify_removal
/// per span -> one counterfactual per accepted span.
CounterfactualBuild build_counterfactual_dataset(const ModelParams& teacher, const ModelParams& student,
                                                 const Corpus& samples, const DetectionConfig& cfg,
                                                 const Vocab& vocab);

/// Attribution, flags and (unverified) spans for one unit. No instance
/// filtering: used on held-out inputs where the gold response is unknown.
UnitReport analyze_unit(const ModelParams& teacher, const ModelParams& student, const DetectionUnit& unit,
                        const DetectionConfig& cfg);

/// Flags for one unit under the configured strategy. For the baselines the
/// budget is the gradient method's flag count on the same unit.
std::vector<bool> strategy_flags(const ModelParams& student, const DetectionUnit& unit, const AttributionRecord& record,
                                 const DetectionConfig& cfg);

void write_detection_report(const DetectionReport& report, const std::filesystem::path& path);
void write_heatmap_csv(const DetectionReport& report, const std::filesystem::path& path);

void write_counterfactuals(const std::vector<CounterfactualSample>& cfs, const std::filesystem::path& path);
std::vector<CounterfactualSample> read_counterfactuals(const std::filesystem::path& path);

}  // namespace leaf
