// SPDX-License-Identifier: Apache-2.0
//
// Teacher-to-student distillation on original inputs (L_kd) and on
// confounder-pruned counterfactual inputs (L_cd), blended as
//   L = lambda * L_kd + (1 - lambda) * L_cd.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "leaf/corpus.hpp"
#include "leaf/detection.hpp"
#include "leaf/model.hpp"
#include "leaf/splitting.hpp"

namespace leaf {

/// Forward KL, sum_i p_i ln(p_i / q_i) with 0 ln 0 = 0.
double kl_div(std::span<const double> p, std::span<const double> q);

/// One sequence scored by distillation: targets are the response positions.
struct DistillExample {
  TokenSeq tokens;
  std::vector<bool> target_mask;
};

DistillExample original_example(const TaskSample& sample);
DistillExample counterfactual_example(const CounterfactualSample& cf);

/// Mean over target positions of KL(teacher || student) for the next-token
/// distributions predicting each target.
double kd_loss(const ModelParams& teacher, const ModelParams& student, const DistillExample& ex);
double kd_loss(const ModelParams& teacher, const ModelParams& student, const TaskSample& sample);
double cd_loss(const ModelParams& teacher, const ModelParams& student, const CounterfactualSample& cf);

struct LossBreakdown {
  double L_kd = 0.0;
  double L_cd = 0.0;
  double L = 0.0;
  std::size_t kd_tokens = 0;
  std::size_t cd_tokens = 0;
};

/// Each term is the mean of per-example losses over its batch; an empty
/// batch contributes 0 (its weight is kept, not redistributed). At least one
/// batch must be nonempty.
LossBreakdown blended_loss(double lambda, const ModelParams& teacher, const ModelParams& student,
                           std::span<const DistillExample> originals, std::span<const DistillExample> counterfactuals);

/// Teacher next-token distributions for an example's target positions,
/// row t-1 for target t (other rows empty). Frozen teacher => cacheable.
using TeacherTargets = std::vector<std::vector<double>>;
TeacherTargets teacher_targets(const ModelParams& teacher, const DistillExample& ex);

/// blended_loss plus its gradient w.r.t. the student parameters (same
/// layout as ModelParams::tensors).
struct BlendedGrad {
  LossBreakdown loss;
  std::vector<ad::DenseArray> grads;
};
BlendedGrad blended_loss_grad(double lambda, const ModelParams& student, std::span<const DistillExample> originals,
                              std::span<const TeacherTargets> original_targets,
                              std::span<const DistillExample> counterfactuals,
                              std::span<const TeacherTargets> counterfactual_targets);

struct DistillConfig {
  double lambda = 0.5;
  int epochs = 10;
  int batch_size = 16;
  AdamConfig adam;
  SplitMode split = SplitMode::two_segment;
  MaskingStrategy strategy = MaskingStrategy::gradient;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;  // mean over the epoch's steps
  double eval_clean_acc = 0.0;
  double eval_confounded_acc = 0.0;
};

struct EvalSets {
  const Corpus* clean = nullptr;
  const Corpus* confounded = nullptr;
};

struct DistillResult {
  ModelParams student;
  std::vector<EpochRecord> history;
};

/// Fraction of samples whose greedy decode of the instruction reproduces the
/// gold response exactly.
double exact_match_accuracy(const ModelParams& model, const Corpus& samples);

/// Adam on blended_loss over paired mini-batches: every epoch shuffles the
/// originals and the counterfactuals on their own streams, and step s takes
/// the s-th slice of each. Strategy none ignores the counterfactuals.
/// With include_student_wrong_originals == false, originals the initial
/// student already gets wrong are dropped.
DistillResult train_distill(const ModelParams& teacher, const ModelParams& student, const Corpus& originals,
                            const std::vector<CounterfactualSample>& counterfactuals, const DistillConfig& cfg,
                            bool include_student_wrong_originals = true, EvalSets eval = {});

void write_history(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

}  // namespace leaf
