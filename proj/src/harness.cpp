// SPDX-License-Identifier: Apache-2.0

#include "leaf/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "leaf/rng.hpp"

namespace leaf {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* reduction_name(SensitivityReduction r) { return r == SensitivityReduction::l2 ? "l2" : "abs_sum"; }

SensitivityReduction reduction_from_string(const std::string& s) {
  if (s == "l2") return SensitivityReduction::l2;
  if (s == "abs_sum") return SensitivityReduction::abs_sum;
  throw std::invalid_argument("unknown sensitivity reduction '" + s + "'");
}

// Rejects keys outside `allowed` so that typos in a config fail loudly.
void check_keys(const json& j, const char* section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument(std::string("config section '") + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw std::invalid_argument(std::string("unknown key '") + key + "' in config section '" + section + "'");
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json model_to_json(const ModelConfig& m) {
  return {{"d_model", m.d_model}, {"n_layers", m.n_layers}, {"d_ff", m.d_ff}, {"max_seq_len", m.max_seq_len}};
}

void model_from_json(const json& j, const char* section, ModelConfig& m) {
  check_keys(j, section, {"d_model", "n_layers", "d_ff", "max_seq_len"});
  read_opt(j, "d_model", m.d_model);
  read_opt(j, "n_layers", m.n_layers);
  read_opt(j, "d_ff", m.d_ff);
  read_opt(j, "max_seq_len", m.max_seq_len);
}

json train_to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.adam.lr}};
}

void train_from_json(const json& j, const char* section, TrainConfig& t) {
  check_keys(j, section, {"epochs", "batch_size", "lr"});
  read_opt(j, "epochs", t.epochs);
  read_opt(j, "batch_size", t.batch_size);
  read_opt(j, "lr", t.adam.lr);
}

// Shortest %g form that reads back to the same double.
std::string format_double(double v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::vector<SupervisedExample> supervised(const Corpus& c) {
  std::vector<SupervisedExample> out;
  out.reserve(c.size());
  for (const TaskSample& s : c) {
    SupervisedExample e;
    e.tokens = s.full_sequence();
    e.target_mask.assign(e.tokens.size(), false);
    for (std::size_t i = s.instruction.size(); i < e.tokens.size(); ++i) e.target_mask[i] = true;
    out.push_back(std::move(e));
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void record_timing(const RunPaths& p, const std::string& stage, double secs) {
  json t = fs::exists(p.timing()) ? read_json(p.timing()) : json::object();
  t[stage] = secs;
  write_json(t, p.timing());
}

template <typename F>
auto timed(const RunPaths& p, const std::string& stage, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  if constexpr (std::is_void_v<decltype(f())>) {
    f();
    record_timing(p, stage, seconds_since(t0));
  } else {
    auto r = f();
    record_timing(p, stage, seconds_since(t0));
    return r;
  }
}

void require(const fs::path& file, const char* producer) {
  if (!fs::exists(file)) throw MissingArtifact(file, producer);
}

Corpus load_corpus(const RunPaths& p) {
  require(p.corpus(), "generate");
  return read_corpus(p.corpus());
}

ModelParams load_model(const fs::path& file, const char* producer) {
  require(file, producer);
  return load_checkpoint(file);
}

ModelConfig resolved(ModelConfig m, const ExperimentConfig& cfg, Capacity cap) {
  m.vocab_size = cfg.corpus.resolved_vocab_size();
  m.capacity = cap;
  return m;
}

DetectionConfig detection_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  DetectionConfig d = cfg.detection;
  d.seed = stream_seed(seed, "baselines");
  return d;
}

DistillConfig distill_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  DistillConfig d = cfg.distill;
  d.seed = stream_seed(seed, "batching/distill");
  return d;
}

DistillConfig kd_variant(DistillConfig d) {
  d.lambda = 1.0;
  d.strategy = MaskingStrategy::none;
  return d;
}

struct Accuracy {
  double clean = 0.0;
  double confounded = 0.0;
};

Accuracy accuracy(const ModelParams& m, const Corpus& clean, const Corpus& confounded) {
  return {exact_match_accuracy(m, clean), exact_match_accuracy(m, confounded)};
}

json jaccard_stats(const ModelParams& m, const Corpus& samples, TokenId stop) {
  if (samples.empty()) return {{"mean", 0.0}, {"min", 0.0}, {"max", 0.0}};
  double sum = 0.0, lo = 1.0, hi = 0.0;
  for (const TaskSample& s : samples) {
    const double j = jaccard(decode_response(m, s.instruction, stop), s.response);
    sum += j;
    lo = std::min(lo, j);
    hi = std::max(hi, j);
  }
  return {{"mean", sum / static_cast<double>(samples.size())}, {"min", lo}, {"max", hi}};
}

json variant_json(const ModelParams& m, const Corpus& clean, const Corpus& confounded, TokenId stop) {
  const Accuracy a = accuracy(m, clean, confounded);
  return {{"eval_clean_acc", a.clean},
          {"eval_confounded_acc", a.confounded},
          {"jaccard_clean", jaccard_stats(m, clean, stop)},
          {"jaccard_confounded", jaccard_stats(m, confounded, stop)}};
}

json confusion_json(const TokenConfusion& c) {
  return {{"flagged", c.flagged},
          {"planted", c.planted},
          {"hits", c.hits},
          {"precision", c.precision()},
          {"recall", c.recall()}};
}

// Token-level quality of each masking strategy on the same filtered units,
// the random and PPL baselines at the gradient method's per-unit budget.
json detection_quality(const ModelParams& teacher, const ModelParams& student, const Corpus& student_train,
                       const DetectionConfig& base, const Vocab& vocab) {
  const std::vector<DetectionUnit> units = filter_instances(teacher, student, student_train, base, vocab);
  TokenConfusion per[3];
  double planted_sum = 0.0, other_sum = 0.0;
  std::size_t planted_n = 0, other_n = 0;
  std::size_t planted_tried = 0, planted_ok = 0, random_tried = 0, random_ok = 0;
  Rng span_rng(derive_seed(base.seed, "baselines/span-acceptance"));
  for (const DetectionUnit& u : units) {
    DetectionConfig c = base;
    c.strategy = MaskingStrategy::gradient;
    const AttributionRecord rec = compute_attribution(teacher, student, u, base.reduction);
    const std::size_t scoped = base.scope == DetectionScope::instruct ? u.instruction_len : u.context.size();
    for (std::size_t i = 0; i < scoped; ++i) {
      if (rec.degenerate) continue;
      if (u.planted[i]) {
        planted_sum += rec.norm_delta[i];
        ++planted_n;
      } else {
        other_sum += rec.norm_delta[i];
        ++other_n;
      }
    }
    int k = 0;
    for (MaskingStrategy s : {MaskingStrategy::gradient, MaskingStrategy::random, MaskingStrategy::ppl}) {
      c.strategy = s;
      per[k++] += score_flags(strategy_flags(student, u, rec, c), u.planted);
    }
    // Planted span vs. a random span of the same length inside the instruction.
    for (const TokenSpan& ps : extract_spans(u.planted)) {
      if (static_cast<std::size_t>(ps.end) > u.instruction_len) continue;
      const int len = ps.end - ps.start;
      ++planted_tried;
      planted_ok += verify_removal(teacher, student, u, {SpanScope::instruction, ps.start, ps.end});
      const int room = static_cast<int>(u.instruction_len) - len + 1;
      if (room <= 0) continue;
      const int start = static_cast<int>(span_rng.below(static_cast<std::uint64_t>(room)));
      ++random_tried;
      random_ok += verify_removal(teacher, student, u, {SpanScope::instruction, start, start + len});
    }
  }
  auto rate = [](std::size_t ok, std::size_t n) { return n == 0 ? 0.0 : static_cast<double>(ok) / static_cast<double>(n); };
  return {{"units", units.size()},
          {"gradient", confusion_json(per[0])},
          {"random", confusion_json(per[1])},
          {"ppl", confusion_json(per[2])},
          {"mean_norm_delta_planted", planted_n ? planted_sum / static_cast<double>(planted_n) : 0.0},
          {"mean_norm_delta_other", other_n ? other_sum / static_cast<double>(other_n) : 0.0},
          {"span_acceptance_planted", rate(planted_ok, planted_tried)},
          {"span_acceptance_random", rate(random_ok, random_tried)},
          {"span_trials", planted_tried}};
}

json pilot_json(const PilotResult& r) {
  return {{"n", r.n},
          {"pruned_inputs", r.pruned_inputs},
          {"acc_before", r.acc_before},
          {"acc_after", r.acc_after},
          {"delta_all", r.delta_all()},
          {"subset_n", r.subset_n},
          {"subset_acc_before", r.subset_acc_before},
          {"subset_acc_after", r.subset_acc_after},
          {"delta", r.delta()},
          {"jaccard_before", r.jaccard_before},
          {"jaccard_after", r.jaccard_after},
          {"jaccard_shift", r.jaccard_after - r.jaccard_before}};
}

json sign_json(const SignTest& t) {
  return {{"wins", t.wins}, {"losses", t.losses}, {"ties", t.ties}, {"p_value", t.p_value}};
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

// ------------------------------------------------------------------ config

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw std::invalid_argument("seed list must be nonempty");
  if (out_dir.empty()) throw std::invalid_argument("out_dir must be set");
  if (fs::exists(out_dir) && !fs::is_directory(out_dir)) {
    throw std::invalid_argument("out_dir '" + out_dir.string() + "' exists and is not a directory");
  }
  corpus.validate();
  const ModelConfig t = resolved(teacher, *this, Capacity::teacher);
  const ModelConfig s = resolved(student, *this, Capacity::student);
  t.validate();
  s.validate();
  validate_pair(t, s);
  for (const TrainConfig* tc : {&teacher_train, &student_train}) {
    if (tc->epochs < 0 || tc->batch_size < 1 || !(tc->adam.lr > 0.0)) {
      throw std::invalid_argument("training needs epochs >= 0, batch_size >= 1, lr > 0");
    }
  }
  detection.validate();
  distill.validate();
  if (!(pilot.tau >= 0.0 && pilot.tau <= 1.0) || pilot.min_span_len < 1) {
    throw std::invalid_argument("pilot needs tau in [0, 1] and min_span_len >= 1");
  }
  for (double v : sweep_tau) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("sweep tau values must lie in [0, 1]");
  }
  for (double v : sweep_lambda) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("sweep lambda values must lie in [0, 1]");
  }
  for (const auto& v : sweep_strategy) masking_strategy_from_string(v);
  for (const auto& v : sweep_splitting) split_mode_from_string(v);
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.corpus.base = 7;
  c.corpus.n_teacher_train = 4000;
  c.teacher = {0, 64, 2, 32, 128, Capacity::teacher};
  c.student = {0, 16, 1, 32, 64, Capacity::student};
  c.teacher_train.epochs = 40;
  c.student_train.epochs = 20;
  c.distill.epochs = 20;
  return c;
}

json to_json(const ExperimentConfig& c) {
  const CorpusConfig& k = c.corpus;
  const DetectionConfig& d = c.detection;
  const DistillConfig& s = c.distill;
  return {
      {"seeds", c.seeds},
      {"out_dir", c.out_dir.generic_string()},
      {"corpus",
       {{"base", k.base},
        {"vocab_size", k.vocab_size},
        {"n_teacher_train", k.n_teacher_train},
        {"n_student_train", k.n_student_train},
        {"n_eval", k.n_eval},
        {"confounder_rate", k.confounder_rate},
        {"rho", k.rho},
        {"response_noise_rate", k.response_noise_rate},
        {"three_binding_rate", k.three_binding_rate}}},
      {"teacher", model_to_json(c.teacher)},
      {"student", model_to_json(c.student)},
      {"teacher_train", train_to_json(c.teacher_train)},
      {"student_train", train_to_json(c.student_train)},
      {"detection",
       {{"tau", d.tau},
        {"min_span_len", d.min_span_len},
        {"scope", to_string(d.scope)},
        {"split", to_string(d.split)},
        {"include_student_wrong_originals", d.include_student_wrong_originals},
        {"reduction", reduction_name(d.reduction)}}},
      {"distill",
       {{"lambda", s.lambda},
        {"epochs", s.epochs},
        {"batch_size", s.batch_size},
        {"lr", s.adam.lr},
        {"split", to_string(s.split)},
        {"strategy", to_string(s.strategy)}}},
      {"pilot", {{"tau", c.pilot.tau}, {"min_span_len", c.pilot.min_span_len}}},
      {"sweep",
       {{"tau", c.sweep_tau},
        {"lambda", c.sweep_lambda},
        {"strategy", c.sweep_strategy},
        {"splitting", c.sweep_splitting}}},
  };
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c = default_experiment_config();
  check_keys(j, "root",
             {"seeds", "out_dir", "corpus", "teacher", "student", "teacher_train", "student_train", "detection",
              "distill", "pilot", "sweep"});
  read_opt(j, "seeds", c.seeds);
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("corpus")) {
    const json& k = j.at("corpus");
    check_keys(k, "corpus",
               {"base", "vocab_size", "n_teacher_train", "n_student_train", "n_eval", "confounder_rate", "rho",
                "response_noise_rate", "three_binding_rate"});
    read_opt(k, "base", c.corpus.base);
    read_opt(k, "vocab_size", c.corpus.vocab_size);
    read_opt(k, "n_teacher_train", c.corpus.n_teacher_train);
    read_opt(k, "n_student_train", c.corpus.n_student_train);
    read_opt(k, "n_eval", c.corpus.n_eval);
    read_opt(k, "confounder_rate", c.corpus.confounder_rate);
    read_opt(k, "rho", c.corpus.rho);
    read_opt(k, "response_noise_rate", c.corpus.response_noise_rate);
    read_opt(k, "three_binding_rate", c.corpus.three_binding_rate);
  }
  if (j.contains("teacher")) model_from_json(j.at("teacher"), "teacher", c.teacher);
  if (j.contains("student")) model_from_json(j.at("student"), "student", c.student);
  if (j.contains("teacher_train")) train_from_json(j.at("teacher_train"), "teacher_train", c.teacher_train);
  if (j.contains("student_train")) train_from_json(j.at("student_train"), "student_train", c.student_train);
  if (j.contains("detection")) {
    const json& d = j.at("detection");
    check_keys(d, "detection", {"tau", "min_span_len", "scope", "split", "include_student_wrong_originals", "reduction"});
    read_opt(d, "tau", c.detection.tau);
    read_opt(d, "min_span_len", c.detection.min_span_len);
    if (d.contains("scope")) c.detection.scope = detection_scope_from_string(d.at("scope").get<std::string>());
    if (d.contains("split")) c.detection.split = split_mode_from_string(d.at("split").get<std::string>());
    read_opt(d, "include_student_wrong_originals", c.detection.include_student_wrong_originals);
    if (d.contains("reduction")) c.detection.reduction = reduction_from_string(d.at("reduction").get<std::string>());
  }
  if (j.contains("distill")) {
    const json& d = j.at("distill");
    check_keys(d, "distill", {"lambda", "epochs", "batch_size", "lr", "split", "strategy"});
    read_opt(d, "lambda", c.distill.lambda);
    read_opt(d, "epochs", c.distill.epochs);
    read_opt(d, "batch_size", c.distill.batch_size);
    read_opt(d, "lr", c.distill.adam.lr);
    if (d.contains("split")) c.distill.split = split_mode_from_string(d.at("split").get<std::string>());
    if (d.contains("strategy")) c.distill.strategy = masking_strategy_from_string(d.at("strategy").get<std::string>());
  }
  if (j.contains("pilot")) {
    check_keys(j.at("pilot"), "pilot", {"tau", "min_span_len"});
    read_opt(j.at("pilot"), "tau", c.pilot.tau);
    read_opt(j.at("pilot"), "min_span_len", c.pilot.min_span_len);
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    check_keys(s, "sweep", {"tau", "lambda", "strategy", "splitting"});
    read_opt(s, "tau", c.sweep_tau);
    read_opt(s, "lambda", c.sweep_lambda);
    read_opt(s, "strategy", c.sweep_strategy);
    read_opt(s, "splitting", c.sweep_splitting);
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

MissingArtifact::MissingArtifact(const fs::path& file, const std::string& producer)
    : std::runtime_error("missing artifact '" + file.string() + "'; produce it with `leaf " + producer + "`") {}

RunPaths run_paths(const ExperimentConfig& cfg, std::uint64_t seed) {
  return {cfg.out_dir / ("seed-" + std::to_string(seed))};
}

std::uint64_t stream_seed(std::uint64_t seed, const char* name) { return derive_seed(seed, name); }

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return json::parse(is);
}

// ------------------------------------------------------------------ stages

void stage_generate(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RunPaths p = run_paths(cfg, seed);
  timed(p, "generate", [&] {
    CorpusConfig c = cfg.corpus;
    c.seed = stream_seed(seed, "corpus");
    fs::create_directories(p.dir);
    write_corpus(generate_corpus(c), p.corpus());
  });
}

void stage_train_teacher(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RunPaths p = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(p);
  timed(p, "train-teacher", [&] {
    ModelParams m = init_params(resolved(cfg.teacher, cfg, Capacity::teacher), stream_seed(seed, "init-teacher"));
    TrainConfig tc = cfg.teacher_train;
    tc.seed = stream_seed(seed, "batching/teacher");
    train_supervised(m, supervised(select_split(corpus, Split::teacher_train)), tc);
    save_checkpoint_binary(m, p.teacher());
  });
}

void stage_train_student(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RunPaths p = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(p);
  timed(p, "train-student", [&] {
    ModelParams m = init_params(resolved(cfg.student, cfg, Capacity::student), stream_seed(seed, "init-student"));
    TrainConfig tc = cfg.student_train;
    tc.seed = stream_seed(seed, "batching/student");
    train_supervised(m, supervised(select_split(corpus, Split::student_train)), tc);
    save_checkpoint_binary(m, p.student());
  });
}

void stage_detect(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RunPaths p = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(p);
  const ModelParams teacher = load_model(p.teacher(), "train-teacher");
  const ModelParams student = load_model(p.student(), "train-student");
  timed(p, "detect", [&] {
    const CounterfactualBuild b = build_counterfactual_dataset(
        teacher, student, select_split(corpus, Split::student_train), detection_for(cfg, seed), Vocab(cfg.corpus.base));
    write_detection_report(b.report, p.detection());
    write_heatmap_csv(b.report, p.heatmap());
  });
}

void stage_build_cf(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RunPaths p = run_paths(cfg, seed);
  require(p.detection(), "detect");
  const Corpus corpus = load_corpus(p);
  const ModelParams teacher = load_model(p.teacher(), "train-teacher");
  const ModelParams student = load_model(p.student(), "train-student");
  timed(p, "build-cf", [&] {
    const CounterfactualBuild b = build_counterfactual_dataset(
        teacher, student, select_split(corpus, Split::student_train), detection_for(cfg, seed), Vocab(cfg.corpus.base));
    write_counterfactuals(b.samples, p.counterfactuals());
  });
}

void stage_distill(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RunPaths p = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(p);
  const ModelParams teacher = load_model(p.teacher(), "train-teacher");
  const ModelParams student = load_model(p.student(), "train-student");
  require(p.counterfactuals(), "build-cf");
  const std::vector<CounterfactualSample> cfs = read_counterfactuals(p.counterfactuals());
  timed(p, "distill", [&] {
    const Corpus train = select_split(corpus, Split::student_train);
    const Corpus clean = select_split(corpus, Split::eval_clean);
    const Corpus confounded = select_split(corpus, Split::eval_confounded);
    const bool keep = cfg.detection.include_student_wrong_originals;
    const DistillConfig leaf_cfg = distill_for(cfg, seed);
    const DistillResult kd = train_distill(teacher, student, train, {}, kd_variant(leaf_cfg), keep, {&clean, &confounded});
    save_checkpoint_binary(kd.student, p.distilled("kd"));
    write_history(kd.history, p.history("kd"));
    const DistillResult lf = train_distill(teacher, student, train, cfs, leaf_cfg, keep, {&clean, &confounded});
    save_checkpoint_binary(lf.student, p.distilled("leaf"));
    write_history(lf.history, p.history("leaf"));
  });
}

json stage_pilot(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RunPaths p = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(p);
  const ModelParams teacher = load_model(p.teacher(), "train-teacher");
  const ModelParams student = load_model(p.student(), "train-student");
  return timed(p, "pilot", [&] {
    const PilotResult r = pilot_prune_eval(teacher, student, select_split(corpus, Split::eval_confounded), cfg.pilot,
                                           cfg.detection.reduction, Vocab(cfg.corpus.base));
    json j = pilot_json(r);
    j["format"] = "leaf-pilot";
    j["version"] = 1;
    write_json(j, p.pilot());
    return j;
  });
}

json stage_evaluate(const ExperimentConfig& cfg, std::uint64_t seed) {
  const RunPaths p = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(p);
  const ModelParams teacher = load_model(p.teacher(), "train-teacher");
  const ModelParams student = load_model(p.student(), "train-student");
  const ModelParams kd = load_model(p.distilled("kd"), "distill");
  const ModelParams lf = load_model(p.distilled("leaf"), "distill");
  require(p.counterfactuals(), "build-cf");
  require(p.pilot(), "pilot");
  const json pilot = read_json(p.pilot());
  const std::size_t n_cf = read_counterfactuals(p.counterfactuals()).size();
  return timed(p, "evaluate", [&] {
    const Vocab vocab(cfg.corpus.base);
    const Corpus train = select_split(corpus, Split::student_train);
    const Corpus clean = select_split(corpus, Split::eval_clean);
    const Corpus confounded = select_split(corpus, Split::eval_confounded);
    json m;
    m["format"] = "leaf-metrics";
    m["version"] = 1;
    m["seed"] = seed;
    m["variants"] = {{"teacher", variant_json(teacher, clean, confounded, vocab.stop())},
                     {"student", variant_json(student, clean, confounded, vocab.stop())},
                     {"kd", variant_json(kd, clean, confounded, vocab.stop())},
                     {"leaf", variant_json(lf, clean, confounded, vocab.stop())}};
    json det = detection_quality(teacher, student, train, detection_for(cfg, seed), vocab);
    det["counterfactuals"] = n_cf;
    m["detection"] = det;
    json pj = pilot;
    pj.erase("format");
    pj.erase("version");
    m["pilot"] = pj;
    write_json(m, p.metrics());
    return m;
  });
}

json run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  stage_generate(cfg, seed);
  stage_train_teacher(cfg, seed);
  stage_train_student(cfg, seed);
  stage_detect(cfg, seed);
  stage_build_cf(cfg, seed);
  stage_distill(cfg, seed);
  stage_pilot(cfg, seed);
  return stage_evaluate(cfg, seed);
}

json summarize(const ExperimentConfig& cfg, const std::vector<json>& per_seed) {
  std::vector<double> pilot_d, conf_d, clean_drop, g_rec, r_rec, p_rec;
  bool g_beats_r = true;
  for (const json& m : per_seed) {
    pilot_d.push_back(m.at("pilot").at("delta").get<double>());
    const json& v = m.at("variants");
    conf_d.push_back(v.at("leaf").at("eval_confounded_acc").get<double>() -
                     v.at("kd").at("eval_confounded_acc").get<double>());
    clean_drop.push_back(100.0 * (v.at("kd").at("eval_clean_acc").get<double>() -
                                  v.at("leaf").at("eval_clean_acc").get<double>()));
    const json& d = m.at("detection");
    g_rec.push_back(d.at("gradient").at("recall").get<double>());
    r_rec.push_back(d.at("random").at("recall").get<double>());
    p_rec.push_back(d.at("ppl").at("recall").get<double>());
    g_beats_r = g_beats_r && g_rec.back() > r_rec.back();
  }
  const SignTest pilot_t = sign_test(pilot_d), main_t = sign_test(conf_d);
  json s;
  s["format"] = "leaf-summary";
  s["version"] = 1;
  s["seeds"] = cfg.seeds;
  s["pilot"] = {{"deltas", pilot_d}, {"mean_delta", mean(pilot_d)}, {"sign_test", sign_json(pilot_t)}};
  s["main_effect"] = {{"confounded_diffs", conf_d},
                      {"mean_confounded_diff", mean(conf_d)},
                      {"clean_drop_pp", clean_drop},
                      {"mean_clean_drop_pp", mean(clean_drop)},
                      {"sign_test", sign_json(main_t)}};
  s["detection"] = {{"gradient_recall", g_rec},
                    {"random_recall", r_rec},
                    {"ppl_recall", p_rec},
                    {"gradient_beats_random_every_seed", g_beats_r}};
  return s;
}

json run_all(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<json> per_seed;
  for (std::uint64_t seed : cfg.seeds) per_seed.push_back(run_seed(cfg, seed));
  json s = summarize(cfg, per_seed);
  write_json(s, cfg.out_dir / "summary.json");
  return s;
}

// ----------------------------------------------------------------- metrics

double jaccard(const TokenSeq& a, const TokenSeq& b) {
  const std::set<TokenId> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (TokenId t : sa) inter += sb.count(t);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

SignTest sign_test(const std::vector<double>& d) {
  SignTest t;
  for (double x : d) {
    if (x > 0) ++t.wins;
    else if (x < 0) ++t.losses;
    else ++t.ties;
  }
  // P(X >= wins), X ~ Binomial(wins + losses, 1/2).
  const int n = t.wins + t.losses;
  double p = 0.0;
  for (int k = t.wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  t.p_value = std::min(1.0, n == 0 ? 1.0 : p);
  return t;
}

TokenSeq decode_response(const ModelParams& model, const TokenSeq& prompt, TokenId stop) {
  const int room = model.config.max_seq_len - static_cast<int>(prompt.size());
  if (room <= 0) return {};
  const TokenSeq full = greedy_decode(model, prompt, room, stop);
  return TokenSeq(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.end());
}

PilotResult pilot_prune_eval(const ModelParams& teacher, const ModelParams& student, const Corpus& samples,
                             const PilotConfig& cfg, SensitivityReduction reduction, const Vocab& vocab) {
  PilotResult r;
  r.n = samples.size();
  if (samples.empty()) return r;
  DetectionConfig dc;
  dc.tau = cfg.tau;
  dc.min_span_len = cfg.min_span_len;
  dc.scope = DetectionScope::instruct;
  dc.strategy = MaskingStrategy::gradient;
  dc.reduction = reduction;
  std::size_t before = 0, after = 0, sub_after = 0;
  for (const TaskSample& s : samples) {
    TokenSeq pruned = s.instruction;
    const TokenSeq target = decode_response(teacher, s.instruction, vocab.stop());
    if (!target.empty()) {
      DetectionUnit u;
      u.sample_id = s.id;
      u.context = s.instruction;
      u.target = target;
      u.instruction_len = s.instruction.size();
      u.planted.assign(s.instruction.size(), false);
      const UnitReport ur = analyze_unit(teacher, student, u, dc);
      std::vector<TokenSpan> spans;
      for (const SpanDecision& d : ur.spans) spans.push_back(to_context_span(d.span, u.instruction_len));
      if (!spans.empty()) {
        pruned = prune(s.instruction, spans);
        ++r.pruned_inputs;
      }
    }
    const bool ok_before = greedy_matches(student, s.instruction, s.response);
    const bool ok_after = greedy_matches(student, pruned, s.response);
    before += ok_before;
    after += ok_after;
    if (target == s.response && !ok_before) {
      ++r.subset_n;
      sub_after += ok_after;
    }
    r.jaccard_before += jaccard(decode_response(student, s.instruction, vocab.stop()), s.response);
    r.jaccard_after += jaccard(decode_response(student, pruned, vocab.stop()), s.response);
  }
  const double n = static_cast<double>(samples.size());
  r.acc_before = static_cast<double>(before) / n;
  r.acc_after = static_cast<double>(after) / n;
  r.jaccard_before /= n;
  r.jaccard_after /= n;
  if (r.subset_n > 0) {
    r.subset_acc_after = static_cast<double>(sub_after) / static_cast<double>(r.subset_n);
  }
  return r;
}

// ------------------------------------------------------------------ sweeps

const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::tau: return "tau";
    case SweepAxis::lambda: return "lambda";
    case SweepAxis::strategy: return "strategy";
    case SweepAxis::splitting: return "splitting";
  }
  return "?";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  for (auto a : {SweepAxis::tau, SweepAxis::lambda, SweepAxis::strategy, SweepAxis::splitting}) {
    if (s == to_string(a)) return a;
  }
  throw std::invalid_argument("unknown sweep axis '" + s + "' (tau, lambda, strategy, splitting)");
}

fs::path sweep_path(const ExperimentConfig& cfg, SweepAxis axis) {
  return cfg.out_dir / (std::string("sweep_") + to_string(axis) + ".csv");
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, SweepAxis axis, std::vector<std::string> values) {
  cfg.validate();
  if (values.empty()) {
    switch (axis) {
      case SweepAxis::tau:
        for (double v : cfg.sweep_tau) values.push_back(format_double(v));
        break;
      case SweepAxis::lambda:
        for (double v : cfg.sweep_lambda) values.push_back(format_double(v));
        break;
      case SweepAxis::strategy: values = cfg.sweep_strategy; break;
      case SweepAxis::splitting: values = cfg.sweep_splitting; break;
    }
  }
  // Parse every value before any work so a bad grid fails fast.
  std::vector<ExperimentConfig> variants;
  for (const std::string& v : values) {
    ExperimentConfig c = cfg;
    switch (axis) {
      case SweepAxis::tau: c.detection.tau = std::stod(v); break;
      case SweepAxis::lambda: c.distill.lambda = std::stod(v); break;
      case SweepAxis::strategy:
        c.detection.strategy = masking_strategy_from_string(v);
        c.distill.strategy = c.detection.strategy;
        break;
      case SweepAxis::splitting:
        c.detection.scope = DetectionScope::instruct_response;
        c.detection.split = split_mode_from_string(v);
        c.distill.split = c.detection.split;
        break;
    }
    c.validate();
    variants.push_back(std::move(c));
  }

  std::vector<SweepRow> rows;
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    const ExperimentConfig& c = variants[vi];
    for (std::uint64_t seed : cfg.seeds) {
      const RunPaths p = run_paths(cfg, seed);
      const Corpus corpus = load_corpus(p);
      const ModelParams teacher = load_model(p.teacher(), "train-teacher");
      const ModelParams student = load_model(p.student(), "train-student");
      const Corpus train = select_split(corpus, Split::student_train);
      const Corpus clean = select_split(corpus, Split::eval_clean);
      const Corpus confounded = select_split(corpus, Split::eval_confounded);
      const CounterfactualBuild b =
          build_counterfactual_dataset(teacher, student, train, detection_for(c, seed), Vocab(c.corpus.base));
      const DistillResult r = train_distill(teacher, student, train, b.samples, distill_for(c, seed),
                                            c.detection.include_student_wrong_originals);
      const Accuracy a = accuracy(r.student, clean, confounded);
      SweepRow row;
      row.value = values[vi];
      row.seed = seed;
      row.eval_clean_acc = a.clean;
      row.eval_confounded_acc = a.confounded;
      row.precision = b.report.tokens.precision();
      row.recall = b.report.tokens.recall();
      row.counterfactuals = b.samples.size();
      rows.push_back(row);
      write_json({{"axis", to_string(axis)},
                  {"value", row.value},
                  {"seed", seed},
                  {"eval_clean_acc", row.eval_clean_acc},
                  {"eval_confounded_acc", row.eval_confounded_acc},
                  {"precision", row.precision},
                  {"recall", row.recall},
                  {"counterfactuals", row.counterfactuals}},
                 p.dir / "sweep" / (std::string(to_string(axis)) + "-" + row.value) / "cell.json");
    }
  }
  return rows;
}

void write_sweep_csv(SweepAxis axis, const std::vector<SweepRow>& rows, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << "axis,value,seed,eval_clean_acc,eval_confounded_acc,precision,recall,counterfactuals\n";
  std::vector<std::string> order;
  std::map<std::string, std::vector<const SweepRow*>> by_value;
  for (const SweepRow& r : rows) {
    os << to_string(axis) << ',' << r.value << ',' << r.seed << ',' << format_double(r.eval_clean_acc) << ','
       << format_double(r.eval_confounded_acc) << ',' << format_double(r.precision) << ','
       << format_double(r.recall) << ',' << r.counterfactuals << '\n';
    if (!by_value.count(r.value)) order.push_back(r.value);
    by_value[r.value].push_back(&r);
  }
  for (const std::string& v : order) {
    const auto& rs = by_value[v];
    double c = 0, f = 0, pr = 0, re = 0, n_cf = 0;
    for (const SweepRow* r : rs) {
      c += r->eval_clean_acc;
      f += r->eval_confounded_acc;
      pr += r->precision;
      re += r->recall;
      n_cf += static_cast<double>(r->counterfactuals);
    }
    const double n = static_cast<double>(rs.size());
    os << to_string(axis) << ',' << v << ",mean," << format_double(c / n) << ',' << format_double(f / n) << ','
       << format_double(pr / n) << ',' << format_double(re / n) << ',' << format_double(n_cf / n) << '\n';
  }
}

// ------------------------------------------------------------------- schema

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

json csv_cell(const std::string& key, const std::string& cell) {
  if (key == "axis" || key == "value") return cell;
  try {
    std::size_t used = 0;
    if (key == "seed" || key == "counterfactuals") {
      const long long v = std::stoll(cell, &used);
      if (used == cell.size()) return v;
    }
    const double v = std::stod(cell, &used);
    if (used == cell.size()) return v;
  } catch (const std::exception&) {
  }
  return cell;
}

bool type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  if (type == "number") return v.is_number();
  if (type == "integer") {
    if (v.is_number_integer()) return true;
    return v.is_number_float() && std::floor(v.get<double>()) == v.get<double>();
  }
  throw std::invalid_argument("schema uses unsupported type '" + type + "'");
}

void validate_at(const json& v, const json& schema, const json& root, const std::string& where,
                 std::vector<std::string>& errors) {
  if (schema.contains("$ref")) {
    const std::string ref = schema.at("$ref").get<std::string>();
    const std::string prefix = "#/$defs/";
    if (ref.rfind(prefix, 0) != 0 || !root.contains("$defs") || !root.at("$defs").contains(ref.substr(prefix.size()))) {
      errors.push_back(where + ": unresolvable $ref '" + ref + "'");
      return;
    }
    validate_at(v, root.at("$defs").at(ref.substr(prefix.size())), root, where, errors);
    return;
  }
  if (schema.contains("type")) {
    const json& t = schema.at("type");
    bool ok = false;
    if (t.is_string()) {
      ok = type_matches(v, t.get<std::string>());
    } else {
      for (const auto& x : t) ok = ok || type_matches(v, x.get<std::string>());
    }
    if (!ok) {
      errors.push_back(where + ": expected type " + t.dump());
      return;
    }
  }
  if (schema.contains("enum")) {
    const json& e = schema.at("enum");
    if (std::find(e.begin(), e.end(), v) == e.end()) errors.push_back(where + ": value not in enum");
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema.at("minimum").get<double>()) {
      errors.push_back(where + ": below minimum");
    }
    if (schema.contains("maximum") && x > schema.at("maximum").get<double>()) {
      errors.push_back(where + ": above maximum");
    }
  }
  if (v.is_object()) {
    if (schema.contains("required")) {
      for (const auto& k : schema.at("required")) {
        if (!v.contains(k.get<std::string>())) errors.push_back(where + ": missing '" + k.get<std::string>() + "'");
      }
    }
    const json props = schema.value("properties", json::object());
    for (const auto& [k, sub] : v.items()) {
      if (props.contains(k)) {
        validate_at(sub, props.at(k), root, where + "/" + k, errors);
      } else if (schema.contains("additionalProperties") && schema.at("additionalProperties") == false) {
        errors.push_back(where + ": unexpected property '" + k + "'");
      }
    }
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema.at("minItems").get<std::size_t>()) {
      errors.push_back(where + ": fewer than minItems elements");
    }
    if (schema.contains("items")) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        validate_at(v[i], schema.at("items"), root, where + "/" + std::to_string(i), errors);
      }
    }
  }
}

}  // namespace

std::vector<std::string> validate_sweep_csv(const fs::path& csv, const json& row_schema) {
  std::ifstream is(csv, std::ios::binary);
  if (!is) return {"cannot open '" + csv.string() + "'"};
  const std::string text((std::istreambuf_iterator<char>(is)), {});
  std::vector<std::string> errors;
  if (text.find('\r') != std::string::npos) errors.push_back("CR found; expected LF line endings");
  if (text.empty() || text.back() != '\n') errors.push_back("file must end with a newline");
  std::stringstream ss(text);
  std::string line;
  std::vector<std::string> header;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto cells = split_csv_line(line);
    if (line_no == 1) {
      header = cells;
      continue;
    }
    if (cells.size() != header.size()) {
      errors.push_back("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) + " cells");
      continue;
    }
    json row = json::object();
    for (std::size_t i = 0; i < cells.size(); ++i) row[header[i]] = csv_cell(header[i], cells[i]);
    for (const std::string& e : validate_schema(row, row_schema)) {
      errors.push_back("line " + std::to_string(line_no) + ": " + e);
    }
  }
  if (header.empty()) errors.push_back("missing header row");
  return errors;
}

std::vector<std::string> validate_schema(const json& instance, const json& schema) {
  std::vector<std::string> errors;
  validate_at(instance, schema, schema, "#", errors);
  return errors;
}

}  // namespace leaf
