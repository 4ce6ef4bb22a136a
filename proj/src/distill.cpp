// SPDX-License-Identifier: Apache-2.0

#include "leaf/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "leaf/rng.hpp"

namespace leaf {

using ad::DenseArray;
using ad::Graph;
using ad::NodeId;
using json = nlohmann::json;

double kl_div(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument("kl_div: dimension mismatch (" + std::to_string(p.size()) + " vs " +
                                std::to_string(q.size()) + ")");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(acc, 0.0);
}

DistillExample original_example(const TaskSample& sample) {
  DistillExample ex;
  ex.tokens = sample.full_sequence();
  ex.target_mask.assign(ex.tokens.size(), false);
  std::fill(ex.target_mask.begin() + static_cast<std::ptrdiff_t>(sample.instruction.size()), ex.target_mask.end(),
            true);
  return ex;
}

DistillExample counterfactual_example(const CounterfactualSample& cf) {
  DistillExample ex;
  ex.tokens = cf.pruned_input;
  ex.tokens.insert(ex.tokens.end(), cf.target.begin(), cf.target.end());
  ex.target_mask.assign(ex.tokens.size(), false);
  std::fill(ex.target_mask.begin() + static_cast<std::ptrdiff_t>(cf.pruned_input.size()), ex.target_mask.end(), true);
  return ex;
}

namespace {

void check_example(const DistillExample& ex) {
  if (ex.tokens.size() != ex.target_mask.size()) throw std::invalid_argument("distill: target mask length mismatch");
  if (!ex.target_mask.empty() && ex.target_mask[0]) throw std::invalid_argument("distill: position 0 cannot be a target");
  if (std::find(ex.target_mask.begin(), ex.target_mask.end(), true) == ex.target_mask.end()) {
    throw std::invalid_argument("distill: example has no target positions");
  }
}

std::vector<double> softmax(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  std::vector<double> p(row.size());
  double z = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) z += p[i] = std::exp(row[i] - mx);
  for (double& v : p) v /= z;
  return p;
}

std::size_t target_count(const DistillExample& ex) {
  return static_cast<std::size_t>(std::count(ex.target_mask.begin(), ex.target_mask.end(), true));
}

}  // namespace

TeacherTargets teacher_targets(const ModelParams& teacher, const DistillExample& ex) {
  check_example(ex);
  const DenseArray logits = forward_logits(teacher, ex.tokens);
  TeacherTargets out(ex.tokens.size());
  for (std::size_t t = 1; t < ex.tokens.size(); ++t) {
    if (ex.target_mask[t]) out[t - 1] = softmax(logits.row(t - 1));
  }
  return out;
}

double kd_loss(const ModelParams& teacher, const ModelParams& student, const DistillExample& ex) {
  if (teacher.config.vocab_size != student.config.vocab_size) {
    throw std::invalid_argument("kd_loss: teacher and student vocabularies differ");
  }
  const TeacherTargets pt = teacher_targets(teacher, ex);
  const DenseArray logits = forward_logits(student, ex.tokens);
  double acc = 0.0;
  for (std::size_t r = 0; r < pt.size(); ++r) {
    if (pt[r].empty()) continue;
    acc += kl_div(pt[r], softmax(logits.row(r)));
  }
  return acc / static_cast<double>(target_count(ex));
}

double kd_loss(const ModelParams& teacher, const ModelParams& student, const TaskSample& sample) {
  return kd_loss(teacher, student, original_example(sample));
}

double cd_loss(const ModelParams& teacher, const ModelParams& student, const CounterfactualSample& cf) {
  return kd_loss(teacher, student, counterfactual_example(cf));
}

LossBreakdown blended_loss(double lambda, const ModelParams& teacher, const ModelParams& student,
                           std::span<const DistillExample> originals, std::span<const DistillExample> counterfactuals) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("blended_loss: lambda must lie in [0, 1]");
  if (originals.empty() && counterfactuals.empty()) throw std::invalid_argument("blended_loss: both batches empty");
  LossBreakdown b;
  for (const DistillExample& ex : originals) {
    b.L_kd += kd_loss(teacher, student, ex);
    b.kd_tokens += target_count(ex);
  }
  for (const DistillExample& ex : counterfactuals) {
    b.L_cd += kd_loss(teacher, student, ex);
    b.cd_tokens += target_count(ex);
  }
  if (!originals.empty()) b.L_kd /= static_cast<double>(originals.size());
  if (!counterfactuals.empty()) b.L_cd /= static_cast<double>(counterfactuals.size());
  b.L = lambda * b.L_kd + (1.0 - lambda) * b.L_cd;
  return b;
}

namespace {

// Adds weight * d(kd_loss)/d(student) into grads; returns kd_loss.
double accumulate_kd(const ModelParams& student, const DistillExample& ex, const TeacherTargets& pt, double weight,
                     std::vector<DenseArray>& grads) {
  const std::size_t n = ex.tokens.size();
  const auto V = static_cast<std::size_t>(student.config.vocab_size);
  if (pt.size() != n) throw std::invalid_argument("distill: teacher targets do not match example");
  const double inv = 1.0 / static_cast<double>(target_count(ex));

  // KL = sum p ln p - sum p ln q; only the cross term depends on the student.
  DenseArray p({n, V}, 0.0);
  double neg_entropy = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (pt[r].empty()) continue;
    if (pt[r].size() != V) throw std::invalid_argument("distill: teacher/student vocabulary mismatch");
    for (std::size_t v = 0; v < V; ++v) {
      p.at(r, v) = pt[r][v];
      if (pt[r][v] > 0.0) neg_entropy += pt[r][v] * std::log(pt[r][v]);
    }
  }
  Graph g;
  const ForwardNodes f = build_forward(g, student, ex.tokens, GradTarget::parameters);
  const NodeId lsm = g.log_softmax_rows(f.logits);
  const NodeId cross = g.sum(g.mul(g.constant(std::move(p)), lsm));
  const NodeId loss = g.scale(cross, -inv);
  if (weight != 0.0) {
    g.backward(loss);
    accumulate(grads, g, f.params, weight);
  }
  return std::max(neg_entropy * inv + g.value(loss)[0], 0.0);
}

}  // namespace

BlendedGrad blended_loss_grad(double lambda, const ModelParams& student, std::span<const DistillExample> originals,
                              std::span<const TeacherTargets> original_targets,
                              std::span<const DistillExample> counterfactuals,
                              std::span<const TeacherTargets> counterfactual_targets) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("blended_loss: lambda must lie in [0, 1]");
  if (originals.empty() && counterfactuals.empty()) throw std::invalid_argument("blended_loss: both batches empty");
  if (originals.size() != original_targets.size() || counterfactuals.size() != counterfactual_targets.size()) {
    throw std::invalid_argument("blended_loss: teacher targets do not match batch");
  }
  BlendedGrad out;
  out.grads = zero_grads(student);
  LossBreakdown& b = out.loss;
  if (!originals.empty()) {
    const double w = lambda / static_cast<double>(originals.size());
    for (std::size_t i = 0; i < originals.size(); ++i) {
      b.L_kd += accumulate_kd(student, originals[i], original_targets[i], w, out.grads);
      b.kd_tokens += target_count(originals[i]);
    }
    b.L_kd /= static_cast<double>(originals.size());
  }
  if (!counterfactuals.empty()) {
    const double w = (1.0 - lambda) / static_cast<double>(counterfactuals.size());
    for (std::size_t i = 0; i < counterfactuals.size(); ++i) {
      b.L_cd += accumulate_kd(student, counterfactuals[i], counterfactual_targets[i], w, out.grads);
      b.cd_tokens += target_count(counterfactuals[i]);
    }
    b.L_cd /= static_cast<double>(counterfactuals.size());
  }
  b.L = lambda * b.L_kd + (1.0 - lambda) * b.L_cd;
  return out;
}

void DistillConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  if (epochs < 0) throw std::invalid_argument("distill epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("distill batch_size must be >= 1");
  if (!(adam.lr > 0.0)) throw std::invalid_argument("distill learning rate must be positive");
}

double exact_match_accuracy(const ModelParams& model, const Corpus& samples) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const TaskSample& s : samples) hits += greedy_matches(model, s.instruction, s.response);
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

DistillResult train_distill(const ModelParams& teacher, const ModelParams& student, const Corpus& originals,
                            const std::vector<CounterfactualSample>& counterfactuals, const DistillConfig& cfg,
                            bool include_student_wrong_originals, EvalSets eval) {
  cfg.validate();
  validate_pair(teacher.config, student.config);
  DistillResult out{student, {}};
  ModelParams& params = out.student;

  std::vector<DistillExample> orig;
  for (const TaskSample& s : originals) {
    if (!include_student_wrong_originals && !greedy_matches(student, s.instruction, s.response)) continue;
    orig.push_back(original_example(s));
  }
  std::vector<DistillExample> cf;
  if (cfg.strategy != MaskingStrategy::none) {
    for (const CounterfactualSample& c : counterfactuals) cf.push_back(counterfactual_example(c));
  }
  if (orig.empty() && cf.empty()) return out;

  // The teacher is frozen, so its target distributions are computed once.
  std::vector<TeacherTargets> orig_t, cf_t;
  for (const auto& ex : orig) orig_t.push_back(teacher_targets(teacher, ex));
  for (const auto& ex : cf) cf_t.push_back(teacher_targets(teacher, ex));

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps = std::max((orig.size() + bs - 1) / bs, (cf.size() + bs - 1) / bs);
  Adam opt(params, cfg.adam);
  Rng orig_rng(derive_seed(cfg.seed, "batching/originals"));
  Rng cf_rng(derive_seed(cfg.seed, "batching/counterfactuals"));
  std::vector<std::size_t> orig_order(orig.size()), cf_order(cf.size());
  std::iota(orig_order.begin(), orig_order.end(), std::size_t{0});
  std::iota(cf_order.begin(), cf_order.end(), std::size_t{0});

  std::vector<DistillExample> ob, cb;
  std::vector<TeacherTargets> obt, cbt;
  auto slice = [&](const std::vector<std::size_t>& order, const std::vector<DistillExample>& src,
                   const std::vector<TeacherTargets>& src_t, std::size_t s, std::vector<DistillExample>& dst,
                   std::vector<TeacherTargets>& dst_t) {
    dst.clear();
    dst_t.clear();
    const std::size_t lo = order.size() * s / steps, hi = order.size() * (s + 1) / steps;
    for (std::size_t i = lo; i < hi; ++i) {
      dst.push_back(src[order[i]]);
      dst_t.push_back(src_t[order[i]]);
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    orig_rng.shuffle(orig_order);
    cf_rng.shuffle(cf_order);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    for (std::size_t s = 0; s < steps; ++s) {
      slice(orig_order, orig, orig_t, s, ob, obt);
      slice(cf_order, cf, cf_t, s, cb, cbt);
      if (ob.empty() && cb.empty()) continue;
      BlendedGrad bg = blended_loss_grad(cfg.lambda, params, ob, obt, cb, cbt);
      opt.step(params, bg.grads);
      rec.loss.L_kd += bg.loss.L_kd;
      rec.loss.L_cd += bg.loss.L_cd;
      rec.loss.L += bg.loss.L;
      rec.loss.kd_tokens += bg.loss.kd_tokens;
      rec.loss.cd_tokens += bg.loss.cd_tokens;
    }
    rec.loss.L_kd /= static_cast<double>(steps);
    rec.loss.L_cd /= static_cast<double>(steps);
    rec.loss.L /= static_cast<double>(steps);
    if (eval.clean) rec.eval_clean_acc = exact_match_accuracy(params, *eval.clean);
    if (eval.confounded) rec.eval_confounded_acc = exact_match_accuracy(params, *eval.confounded);
    out.history.push_back(rec);
  }
  return out;
}

void write_history(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  json arr = json::array();
  for (const EpochRecord& r : history) {
    arr.push_back({{"epoch", r.epoch},
                   {"L_kd", r.loss.L_kd},
                   {"L_cd", r.loss.L_cd},
                   {"L", r.loss.L},
                   {"kd_tokens", r.loss.kd_tokens},
                   {"cd_tokens", r.loss.cd_tokens},
                   {"eval_clean_acc", r.eval_clean_acc},
                   {"eval_confounded_acc", r.eval_confounded_acc}});
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << arr.dump(1) << '\n';
}

}  // namespace leaf
