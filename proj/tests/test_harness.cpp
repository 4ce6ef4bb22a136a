// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "leaf/harness.hpp"
#include "leaf/rng.hpp"

using namespace leaf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = LEAF_SOURCE_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

json schema(const char* name) { return read_json(kSource / "schemas" / name); }

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c = default_experiment_config();
  c.seeds = {3};
  c.out_dir = out;
  c.corpus.n_teacher_train = 200;
  c.corpus.n_student_train = 200;
  c.corpus.n_eval = 40;
  c.teacher_train.epochs = 3;
  c.student_train.epochs = 2;
  c.distill.epochs = 2;
  c.sweep_tau = {0.1};
  return c;
}

fs::path scratch(const char* name) {
  const fs::path p = fs::temp_directory_path() / "leaf_harness_tests" / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("experiment config: defaults file, round trip, rejection") {
  const ExperimentConfig d = default_experiment_config();
  CHECK(to_json(load_experiment_config(kSource / "configs" / "default.json")) == to_json(d));
  CHECK(to_json(experiment_config_from_json(to_json(d))) == to_json(d));
  CHECK(to_json(experiment_config_from_json(json::object())) == to_json(d));

  json j = to_json(d);
  j["seeds"] = json::array();
  CHECK_THROWS(experiment_config_from_json(j));
  j = to_json(d);
  j["distill"]["lamda"] = 0.5;
  CHECK_THROWS_WITH(experiment_config_from_json(j), doctest::Contains("lamda"));
  j = to_json(d);
  j["student"]["d_model"] = 64;  // no capacity gap
  CHECK_THROWS(experiment_config_from_json(j));
  j = to_json(d);
  j["detection"]["scope"] = "everything";
  CHECK_THROWS(experiment_config_from_json(j));
  j = to_json(d);
  j["sweep"]["strategy"] = {"gradient", "magic"};
  CHECK_THROWS(experiment_config_from_json(j));
}

TEST_CASE("named seed streams are distinct and stable") {
  std::set<std::uint64_t> seen;
  for (const char* n : {"corpus", "init-teacher", "init-student", "batching/teacher", "batching/student",
                        "batching/distill", "baselines"}) {
    CHECK(seen.insert(stream_seed(1, n)).second);
    CHECK(stream_seed(1, n) == derive_seed(1, n));
  }
  CHECK(stream_seed(1, "corpus") != stream_seed(2, "corpus"));
}

TEST_CASE("jaccard properties") {
  CHECK(jaccard({1, 2, 3}, {1, 2, 3}) == 1.0);
  CHECK(jaccard({1, 2}, {}) == 0.0);
  CHECK(jaccard({}, {4}) == 0.0);
  CHECK(jaccard({}, {}) == 1.0);
  CHECK(jaccard({1, 1, 2}, {2, 3}) == doctest::Approx(1.0 / 3.0));

  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    TokenSeq a, b;
    const auto na = rng.below(8), nb = rng.below(8);
    for (std::uint64_t i = 0; i < na; ++i) a.push_back(static_cast<TokenId>(rng.below(6)));
    for (std::uint64_t i = 0; i < nb; ++i) b.push_back(static_cast<TokenId>(rng.below(6)));
    const double j = jaccard(a, b);
    CHECK(j == jaccard(b, a));
    CHECK(j >= 0.0);
    CHECK(j <= 1.0);
    if (!a.empty()) CHECK(jaccard(a, a) == 1.0);
    // Oracle: membership counting over the 6-symbol alphabet.
    int inter = 0, uni = 0;
    for (TokenId t = 0; t < 6; ++t) {
      const bool in_a = std::count(a.begin(), a.end(), t) > 0, in_b = std::count(b.begin(), b.end(), t) > 0;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
    CHECK(j == doctest::Approx(uni == 0 ? 1.0 : static_cast<double>(inter) / uni).epsilon(1e-12));
  }
}

TEST_CASE("one-sided sign test") {
  const SignTest all5 = sign_test({0.1, 0.2, 0.3, 0.1, 0.05});
  CHECK(all5.wins == 5);
  CHECK(all5.p_value == doctest::Approx(1.0 / 32.0).epsilon(1e-12));

  const SignTest ties = sign_test({0.1, 0.0, 0.2, 0.0, 0.3, 0.4, 0.5});
  CHECK(ties.ties == 2);
  CHECK(ties.p_value == doctest::Approx(1.0 / 32.0).epsilon(1e-12));

  const SignTest four_one = sign_test({1, 1, 1, 1, -1});
  CHECK(four_one.p_value == doctest::Approx(6.0 / 32.0).epsilon(1e-12));
  CHECK(sign_test({-1, -1}).p_value == 1.0);
  CHECK(sign_test({}).p_value == 1.0);
  CHECK(sign_test({0, 0}).p_value == 1.0);
}

TEST_CASE("schema validator subset") {
  const json s = json::parse(R"({
    "type": "object",
    "required": ["a"],
    "additionalProperties": false,
    "properties": {
      "a": {"$ref": "#/$defs/p"},
      "b": {"type": "array", "minItems": 1, "items": {"type": ["integer", "string"]}},
      "c": {"enum": ["x", "y"]}
    },
    "$defs": {"p": {"type": "number", "minimum": 0, "maximum": 1}}
  })");
  CHECK(validate_schema(json::parse(R"({"a": 0.5, "b": [1, "z"], "c": "x"})"), s).empty());
  CHECK(validate_schema(json::parse(R"({"a": 2})"), s).size() == 1);
  CHECK(validate_schema(json::parse(R"({"b": [1]})"), s).size() == 1);
  CHECK(validate_schema(json::parse(R"({"a": 0, "b": []})"), s).size() == 1);
  CHECK(validate_schema(json::parse(R"({"a": 0, "b": [1.5]})"), s).size() == 1);
  CHECK(validate_schema(json::parse(R"({"a": 0, "c": "q"})"), s).size() == 1);
  CHECK(validate_schema(json::parse(R"({"a": 0, "d": 1})"), s).size() == 1);
  CHECK(validate_schema(json::parse(R"([1])"), s).size() == 1);
  CHECK_FALSE(validate_schema(json(1), json::parse(R"({"$ref": "#/$defs/none"})")).empty());
}

TEST_CASE("missing upstream artifacts name the file and the producing command") {
  const ExperimentConfig c = tiny_config(scratch("missing"));
  CHECK_THROWS_WITH_AS(stage_train_teacher(c, 3), doctest::Contains("corpus.jsonl"), MissingArtifact);
  CHECK_THROWS_WITH(stage_train_teacher(c, 3), doctest::Contains("leaf generate"));
  stage_generate(c, 3);
  CHECK_THROWS_WITH(stage_detect(c, 3), doctest::Contains("leaf train-teacher"));
  CHECK_THROWS_WITH(stage_build_cf(c, 3), doctest::Contains("leaf detect"));
  CHECK_THROWS_WITH(stage_evaluate(c, 3), doctest::Contains("teacher.ckpt"));
  CHECK_THROWS_WITH(run_sweep(c, SweepAxis::tau), doctest::Contains("leaf train-teacher"));
}

TEST_CASE("untrained student scores near chance") {
  CorpusConfig cc;
  cc.n_teacher_train = 10;
  cc.n_student_train = 10;
  cc.n_eval = 100;
  cc.seed = 8;
  const Corpus eval = select_split(generate_corpus(cc), Split::eval_clean);
  const ExperimentConfig d = default_experiment_config();
  ModelConfig sc = d.student;
  sc.vocab_size = cc.resolved_vocab_size();
  const ModelParams untrained = init_params(sc, stream_seed(8, "init-student"));
  double chance = 0.0;
  for (const TaskSample& s : eval) chance += std::pow(1.0 / sc.vocab_size, static_cast<double>(s.response.size()));
  chance /= static_cast<double>(eval.size());
  CHECK(exact_match_accuracy(untrained, eval) <= 2.0 * chance);
}

TEST_CASE("pilot with identical models prunes nothing: delta exactly 0") {
  CorpusConfig cc;
  cc.n_teacher_train = 10;
  cc.n_student_train = 10;
  cc.n_eval = 30;
  cc.seed = 9;
  const Corpus eval = select_split(generate_corpus(cc), Split::eval_confounded);
  ModelConfig mc = default_experiment_config().teacher;
  mc.vocab_size = cc.resolved_vocab_size();
  const ModelParams m = init_params(mc, 1);
  const PilotResult r = pilot_prune_eval(m, m, eval, PilotConfig{}, SensitivityReduction::l2, Vocab(cc.base));
  CHECK(r.n == eval.size());
  CHECK(r.pruned_inputs == 0);
  CHECK(r.delta() == 0.0);
  CHECK(r.delta_all() == 0.0);
  CHECK(r.jaccard_after == r.jaccard_before);
}

TEST_CASE("tiny pipeline: schema-valid, deterministic, idempotent, sweep consistent") {
  const ExperimentConfig a = tiny_config(scratch("run_a"));
  const ExperimentConfig b = tiny_config(scratch("run_b"));
  const json sa = run_all(a);
  run_all(b);
  const RunPaths pa = run_paths(a, 3), pb = run_paths(b, 3);

  CHECK(slurp(pa.metrics()) == slurp(pb.metrics()));
  for (auto f : {&RunPaths::corpus, &RunPaths::teacher, &RunPaths::student, &RunPaths::detection, &RunPaths::heatmap,
                 &RunPaths::counterfactuals, &RunPaths::pilot}) {
    CHECK(slurp((pa.*f)()) == slurp((pb.*f)()));
  }
  CHECK(slurp(pa.distilled("leaf")) == slurp(pb.distilled("leaf")));
  CHECK(slurp(a.out_dir / "summary.json") == slurp(b.out_dir / "summary.json"));

  const json metrics = read_json(pa.metrics());
  for (const auto& e : validate_schema(metrics, schema("metrics.schema.json"))) FAIL_CHECK(e);
  for (const auto& e : validate_schema(sa, schema("summary.schema.json"))) FAIL_CHECK(e);
  CHECK(read_json(pa.timing()).contains("distill"));

  // Rerunning a stage reproduces its outputs byte for byte.
  const std::string student_before = slurp(pa.student());
  stage_train_student(a, 3);
  CHECK(slurp(pa.student()) == student_before);

  // Every emitted counterfactual passes verification against its unit.
  const Corpus train = select_split(read_corpus(pa.corpus()), Split::student_train);
  const ModelParams teacher = load_checkpoint(pa.teacher()), student = load_checkpoint(pa.student());
  DetectionConfig dc = a.detection;
  const Vocab vocab(a.corpus.base);
  for (const CounterfactualSample& cf : read_counterfactuals(pa.counterfactuals())) {
    const auto it = std::find_if(train.begin(), train.end(), [&](const TaskSample& s) { return s.id == cf.source_id; });
    REQUIRE(it != train.end());
    const auto units = detection_units(*it, dc, vocab);
    REQUIRE(cf.segment < units.size());
    CHECK(verify_removal(teacher, student, units[cf.segment], cf.span));
  }

  // A one-value sweep at the configured tau is the single run.
  const std::vector<SweepRow> rows = run_sweep(a, SweepAxis::tau);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].eval_confounded_acc == metrics["variants"]["leaf"]["eval_confounded_acc"].get<double>());
  CHECK(rows[0].eval_clean_acc == metrics["variants"]["leaf"]["eval_clean_acc"].get<double>());
  CHECK(rows[0].counterfactuals == metrics["detection"]["counterfactuals"].get<std::size_t>());

  const std::vector<SweepRow> strat = run_sweep(a, SweepAxis::strategy);
  std::set<std::string> names;
  for (const auto& r : strat) names.insert(r.value);
  CHECK(names == std::set<std::string>{"gradient", "random", "ppl", "none"});
  write_sweep_csv(SweepAxis::strategy, strat, sweep_path(a, SweepAxis::strategy));
  const std::string csv = slurp(sweep_path(a, SweepAxis::strategy));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 + 4);
  for (const auto& e : validate_sweep_csv(sweep_path(a, SweepAxis::strategy), schema("sweep_row.schema.json"))) {
    FAIL_CHECK(e);
  }
  CHECK_THROWS(run_sweep(a, SweepAxis::tau, {"1.5"}));
}

TEST_CASE("sweep CSV validation catches bad rows and CR endings") {
  const fs::path dir = scratch("csv");
  fs::create_directories(dir);
  const json rs = schema("sweep_row.schema.json");
  std::vector<SweepRow> rows(2);
  rows[0].value = rows[1].value = "0.1";
  rows[0].seed = 1;
  rows[1].seed = 2;
  rows[1].eval_clean_acc = 0.5;
  write_sweep_csv(SweepAxis::tau, rows, dir / "ok.csv");
  CHECK(validate_sweep_csv(dir / "ok.csv", rs).empty());
  CHECK(slurp(dir / "ok.csv").find("tau,0.1,mean,0.25,") != std::string::npos);

  std::ofstream(dir / "cr.csv", std::ios::binary) << "axis,value,seed,eval_clean_acc,eval_confounded_acc,precision,"
                                                     "recall,counterfactuals\r\ntau,0.1,1,0,0,0,0,0\r\n";
  CHECK_FALSE(validate_sweep_csv(dir / "cr.csv", rs).empty());
  std::ofstream(dir / "bad.csv", std::ios::binary) << "axis,value,seed,eval_clean_acc,eval_confounded_acc,precision,"
                                                      "recall,counterfactuals\ntau,0.1,1,1.5,0,0,0,0\n";
  CHECK(validate_sweep_csv(dir / "bad.csv", rs).size() == 1);
}
