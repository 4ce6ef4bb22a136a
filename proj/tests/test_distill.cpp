// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "leaf/distill.hpp"
#include "oracles.hpp"

using namespace leaf;
using leaf::testing::micro_config;

namespace {

std::vector<double> random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double z = 0.0;
  for (auto& x : p) z += x = rng.uniform(0.01, 1.0);
  for (auto& x : p) x /= z;
  return p;
}

ModelConfig micro_teacher(int vocab = 7) {
  ModelConfig c = micro_config(vocab, Capacity::teacher);
  c.d_model = 6;
  c.n_layers = 2;
  return c;
}

TaskSample sample(int id, TokenSeq instruction, TokenSeq response) {
  TaskSample s;
  s.id = id;
  s.split = Split::student_train;
  s.instruction = std::move(instruction);
  s.response = std::move(response);
  return s;
}

Corpus tiny_corpus() {
  Corpus c;
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    c.push_back(sample(i, {static_cast<TokenId>(rng.below(5)), 5, static_cast<TokenId>(rng.below(5))},
                       {static_cast<TokenId>(rng.below(5)), 6}));
  }
  return c;
}

}  // namespace

TEST_CASE("kl_div values and properties") {
  const std::vector<double> p{0.5, 0.5}, q{0.25, 0.75};
  CHECK(kl_div(p, q) == doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)).epsilon(1e-12));
  CHECK(kl_div(p, q) == doctest::Approx(0.14384).epsilon(1e-4));
  CHECK(kl_div(p, p) == 0.0);
  const std::vector<double> zero_mass{1.0, 0.0}, pos{0.9, 0.1};
  CHECK(kl_div(zero_mass, pos) == doctest::Approx(-std::log(0.9)));
  CHECK_THROWS(kl_div(p, std::vector<double>{1.0}));

  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(8);
    const auto a = random_distribution(rng, n), b = random_distribution(rng, n);
    const double d = kl_div(a, b);
    CHECK(d >= 0.0);
    CHECK(d == doctest::Approx(oracle::kl(a, b)).epsilon(1e-9));
    double gap = 0.0;
    for (std::size_t i = 0; i < n; ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
    CHECK((d == 0.0) == (gap < 1e-9));
  }
}

TEST_CASE("kd and cd losses") {
  const ModelConfig cfg = micro_config();
  const ModelParams a = init_params(cfg, 1), b = init_params(cfg, 2);
  const TaskSample s = sample(0, {1, 2, 3}, {4, 5, 6});
  CHECK(kd_loss(a, a, s) < 1e-10);
  CHECK(kd_loss(a, b, s) > 0.0);

  CounterfactualSample identity;
  identity.pruned_input = s.instruction;
  identity.target = s.response;
  identity.original_length = s.instruction.size();
  CHECK(cd_loss(a, b, identity) == kd_loss(a, b, s));

  // Direct per-position oracle.
  const DistillExample ex = original_example(s);
  const auto lt = forward_logits(a, ex.tokens), ls = forward_logits(b, ex.tokens);
  auto softmax = [](std::span<const double> r) {
    std::vector<double> p(r.begin(), r.end());
    double z = 0.0;
    for (auto& x : p) z += x = std::exp(x);
    for (auto& x : p) x /= z;
    return p;
  };
  double acc = 0.0;
  for (std::size_t t = 3; t < 6; ++t) acc += oracle::kl(softmax(lt.row(t - 1)), softmax(ls.row(t - 1)));
  CHECK(kd_loss(a, b, ex) == doctest::Approx(acc / 3.0).epsilon(1e-10));
}

TEST_CASE("blended loss: boundaries, arithmetic and exact affinity in lambda") {
  const ModelConfig cfg = micro_config();
  const ModelParams t = init_params(cfg, 3), s = init_params(cfg, 4);
  const std::vector<DistillExample> orig{original_example(sample(0, {1, 2}, {3, 4})),
                                         original_example(sample(1, {2, 2, 1}, {0, 6}))};
  CounterfactualSample cf;
  cf.pruned_input = {1};
  cf.target = {3, 4};
  const std::vector<DistillExample> cfs{counterfactual_example(cf)};

  const LossBreakdown one = blended_loss(1.0, t, s, orig, cfs);
  const LossBreakdown zero = blended_loss(0.0, t, s, orig, cfs);
  CHECK(one.L == one.L_kd);
  CHECK(zero.L == zero.L_cd);
  CHECK(one.kd_tokens == 4);
  CHECK(one.cd_tokens == 2);
  for (double lam : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const LossBreakdown b = blended_loss(lam, t, s, orig, cfs);
    CHECK(b.L == lam * one.L_kd + (1.0 - lam) * zero.L_cd);
    CHECK(std::abs(b.L - (lam * b.L_kd + (1 - lam) * b.L_cd)) <= 1e-12);
  }
  const LossBreakdown empty_cf = blended_loss(0.5, t, s, orig, {});
  CHECK(empty_cf.L_cd == 0.0);
  CHECK(empty_cf.L == 0.5 * empty_cf.L_kd);
  CHECK_THROWS(blended_loss(1.2, t, s, orig, cfs));
  CHECK_THROWS(blended_loss(0.5, t, s, {}, {}));
}

TEST_CASE("blended loss gradient matches finite differences") {
  const ModelConfig cfg = micro_config();
  const ModelParams t = init_params(cfg, 5);
  const ModelParams s = init_params(cfg, 6);
  const std::vector<DistillExample> orig{original_example(sample(0, {1, 2}, {3, 4, 5}))};
  CounterfactualSample cf;
  cf.pruned_input = {2};
  cf.target = {3, 4};
  const std::vector<DistillExample> cfs{counterfactual_example(cf)};
  const std::vector<TeacherTargets> ot{teacher_targets(t, orig[0])}, ct{teacher_targets(t, cfs[0])};

  const BlendedGrad g = blended_loss_grad(0.3, s, orig, ot, cfs, ct);
  CHECK(g.loss.L == doctest::Approx(blended_loss(0.3, t, s, orig, cfs).L).epsilon(1e-12));

  const std::vector<double> flat = s.flatten();
  std::vector<double> analytic;
  for (const auto& a : g.grads) analytic.insert(analytic.end(), a.values().begin(), a.values().end());
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    std::vector<double> x = flat;
    x[i] += h;
    const double up = blended_loss(0.3, t, ModelParams::unflatten(cfg, x), orig, cfs).L;
    x[i] -= 2 * h;
    const double down = blended_loss(0.3, t, ModelParams::unflatten(cfg, x), orig, cfs).L;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1e-2, std::abs(fd)));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("train_distill: zero epochs, teacher untouched, determinism, pure-KD reduction") {
  const ModelParams teacher = init_params(micro_teacher(), 10);
  const ModelParams student = init_params(micro_config(), 11);
  const Corpus data = tiny_corpus();
  CounterfactualSample cf;
  cf.source_id = 0;
  cf.pruned_input = {data[0].instruction[0]};
  cf.target = data[0].response;
  cf.original_length = 3;
  cf.span = {SpanScope::instruction, 1, 3};

  DistillConfig dc;
  dc.epochs = 0;
  CHECK(train_distill(teacher, student, data, {cf}, dc).student == student);

  dc.epochs = 3;
  dc.batch_size = 4;
  dc.seed = 9;
  const ModelParams teacher_before = teacher;
  const DistillResult a = train_distill(teacher, student, data, {cf}, dc);
  const DistillResult b = train_distill(teacher, student, data, {cf}, dc);
  CHECK(teacher == teacher_before);
  CHECK(a.student == b.student);
  CHECK_FALSE(a.student == student);
  REQUIRE(a.history.size() == 3);
  CHECK(a.history.back().loss.L < a.history.front().loss.L);
  for (const auto& r : a.history) CHECK(std::abs(r.loss.L - (0.5 * r.loss.L_kd + 0.5 * r.loss.L_cd)) < 1e-12);

  DistillConfig kd = dc;
  kd.lambda = 1.0;
  kd.strategy = MaskingStrategy::none;
  DistillConfig lam1 = dc;
  lam1.lambda = 1.0;
  CHECK(train_distill(teacher, student, data, {}, lam1).student == train_distill(teacher, student, data, {cf}, kd).student);

  dc.lambda = 2.0;
  CHECK_THROWS(train_distill(teacher, student, data, {cf}, dc));
}

TEST_CASE("student-correct originals only") {
  const ModelParams teacher = init_params(micro_teacher(), 10);
  ModelParams student = init_params(micro_config(), 11);
  for (auto& t : student.tensors) t.fill(0.0);
  student.tensors.back()[6] = 3.0;  // always emits token 6: wrong on every sample
  DistillConfig dc;
  dc.epochs = 2;
  const DistillResult r = train_distill(teacher, student, tiny_corpus(), {}, dc, false);
  CHECK(r.student == student);  // nothing left to train on
  CHECK(r.history.empty());
}

TEST_CASE("history file") {
  std::vector<EpochRecord> h(2);
  h[1].epoch = 2;
  h[1].loss.L = 0.25;
  const auto p = std::filesystem::temp_directory_path() / "leaf_history.json";
  write_history(h, p);
  std::ifstream is(p);
  std::string text((std::istreambuf_iterator<char>(is)), {});
  CHECK(text.find("\"eval_confounded_acc\"") != std::string::npos);
  CHECK(text.find("0.25") != std::string::npos);
  std::filesystem::remove(p);
}
