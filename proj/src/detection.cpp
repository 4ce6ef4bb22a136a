// SPDX-License-Identifier: Apache-2.0

#include "leaf/detection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "leaf/rng.hpp"

namespace leaf {

using json = nlohmann::json;

const char* to_string(DetectionScope s) {
  return s == DetectionScope::instruct ? "instruct" : "instruct+response";
}

DetectionScope detection_scope_from_string(const std::string& s) {
  if (s == "instruct") return DetectionScope::instruct;
  if (s == "instruct+response") return DetectionScope::instruct_response;
  throw std::invalid_argument("unknown detection scope '" + s + "'");
}

const char* to_string(MaskingStrategy s) {
  switch (s) {
    case MaskingStrategy::gradient: return "gradient";
    case MaskingStrategy::random: return "random";
    case MaskingStrategy::ppl: return "ppl";
    case MaskingStrategy::none: return "none";
  }
  return "?";
}

MaskingStrategy masking_strategy_from_string(const std::string& s) {
  for (auto m : {MaskingStrategy::gradient, MaskingStrategy::random, MaskingStrategy::ppl, MaskingStrategy::none}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown masking strategy '" + s + "'");
}

const char* to_string(TargetProvenance p) { return p == TargetProvenance::gold ? "gold" : "teacher"; }

TargetProvenance provenance_from_string(const std::string& s) {
  if (s == "gold") return TargetProvenance::gold;
  if (s == "teacher") return TargetProvenance::teacher;
  throw std::invalid_argument("unknown target provenance '" + s + "'");
}

void DetectionConfig::validate() const {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in [0, 1]");
  if (min_span_len < 1) throw std::invalid_argument("min_span_len must be >= 1");
}

std::vector<DetectionUnit> detection_units(const TaskSample& sample, const DetectionConfig& cfg, const Vocab& vocab) {
  const SplitMode mode = cfg.scope == DetectionScope::instruct ? SplitMode::none : cfg.split;
  const SplitResult split = split_response(sample, mode, vocab.separator());
  const std::size_t ilen = sample.instruction.size();

  std::vector<DetectionUnit> units;
  for (const SegmentPair& p : split.pairs) {
    DetectionUnit u;
    u.sample_id = sample.id;
    u.segment = p.index;
    u.context = p.context;
    u.target = p.target;
    u.instruction_len = ilen;
    u.planted.assign(u.context.size(), false);
    for (const ConfounderSpan& s : sample.planted_spans) {
      const std::size_t off = s.scope == SpanScope::instruction ? 0 : ilen;
      for (int i = s.start; i < s.end; ++i) {
        const std::size_t pos = off + static_cast<std::size_t>(i);
        if (pos < u.planted.size()) u.planted[pos] = true;
      }
    }
    units.push_back(std::move(u));
  }
  return units;
}

std::vector<double> minmax_normalize(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("minmax_normalize: empty vector");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo;
  const double range = *hi - *lo;
  std::vector<double> out(v.size(), 0.0);
  if (range > 0.0) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mn) / range;
  }
  return out;
}

AttributionRecord attribution_from_sensitivities(std::vector<double> g_teacher, std::vector<double> g_student) {
  if (g_teacher.size() != g_student.size()) {
    throw std::invalid_argument("attribution: teacher/student sensitivity lengths differ");
  }
  AttributionRecord r;
  r.g_teacher = std::move(g_teacher);
  r.g_student = std::move(g_student);
  r.gn_teacher = minmax_normalize(r.g_teacher);
  r.gn_student = minmax_normalize(r.g_student);
  r.delta.resize(r.gn_teacher.size());
  for (std::size_t i = 0; i < r.delta.size(); ++i) r.delta[i] = r.gn_teacher[i] - r.gn_student[i];
  r.norm_delta = minmax_normalize(r.delta);
  const auto [lo, hi] = std::minmax_element(r.delta.begin(), r.delta.end());
  r.degenerate = *lo == *hi;
  return r;
}

AttributionRecord compute_attribution(const ModelParams& teacher, const ModelParams& student, const DetectionUnit& unit,
                                      SensitivityReduction reduction) {
  if (teacher.config.vocab_size != student.config.vocab_size) {
    throw std::invalid_argument("compute_attribution: teacher and student vocabularies differ");
  }
  if (unit.context.empty() || unit.target.empty()) throw std::invalid_argument("compute_attribution: empty unit");
  TokenSeq seq = unit.context;
  seq.insert(seq.end(), unit.target.begin(), unit.target.end());
  std::vector<bool> ctx(seq.size(), false), tgt(seq.size(), false);
  std::fill_n(ctx.begin(), unit.context.size(), true);
  std::fill(tgt.begin() + static_cast<std::ptrdiff_t>(unit.context.size()), tgt.end(), true);

  auto scoped = [&](const ModelParams& m) {
    std::vector<double> g = token_grad_norms(m, seq, ctx, tgt, reduction);
    g.resize(unit.context.size());
    return g;
  };
  AttributionRecord r = attribution_from_sensitivities(scoped(teacher), scoped(student));
  r.sample_id = unit.sample_id;
  r.segment = unit.segment;
  return r;
}

std::vector<bool> flag_confounders(const AttributionRecord& record, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("flag_confounders: tau must lie in [0, 1]");
  std::vector<bool> flags(record.norm_delta.size(), false);
  if (record.degenerate) {
    if (tau >= 1.0) flags.assign(flags.size(), true);
    return flags;
  }
  for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = record.norm_delta[i] <= tau;
  return flags;
}

std::vector<TokenSpan> extract_spans(const std::vector<bool>& flags, int min_len) {
  std::vector<TokenSpan> spans;
  const int n = static_cast<int>(flags.size());
  int i = 0;
  while (i < n) {
    if (!flags[i]) {
      ++i;
      continue;
    }
    int j = i;
    while (j < n && flags[j]) ++j;
    if (j - i >= min_len) spans.push_back({i, j});
    i = j;
  }
  return spans;
}

std::vector<bool> flatten_spans(std::span<const TokenSpan> spans, std::size_t length) {
  std::vector<bool> flags(length, false);
  for (const TokenSpan& s : spans) {
    if (s.start < 0 || s.start >= s.end || static_cast<std::size_t>(s.end) > length) {
      throw std::invalid_argument("flatten_spans: span out of range");
    }
    for (int i = s.start; i < s.end; ++i) flags[i] = true;
  }
  return flags;
}

std::vector<ConfounderSpan> extract_scoped_spans(const std::vector<bool>& flags, std::size_t instruction_len,
                                                 int min_len) {
  // Break runs at the instruction boundary so no span straddles two scopes.
  const auto ilen = static_cast<int>(std::min(instruction_len, flags.size()));
  std::vector<ConfounderSpan> out;
  std::vector<bool> head(flags.begin(), flags.begin() + ilen);
  for (const TokenSpan& s : extract_spans(head, min_len)) out.push_back({SpanScope::instruction, s.start, s.end});
  std::vector<bool> tail(flags.begin() + ilen, flags.end());
  for (const TokenSpan& s : extract_spans(tail, min_len)) out.push_back({SpanScope::response, s.start, s.end});
  return out;
}

TokenSpan to_context_span(const ConfounderSpan& span, std::size_t instruction_len) {
  const int off = span.scope == SpanScope::instruction ? 0 : static_cast<int>(instruction_len);
  return {span.start + off, span.end + off};
}

TokenSeq prune(std::span<const TokenId> tokens, std::span<const TokenSpan> spans) {
  std::vector<TokenSpan> sorted(spans.begin(), spans.end());
  std::sort(sorted.begin(), sorted.end(), [](const TokenSpan& a, const TokenSpan& b) { return a.start < b.start; });
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    const TokenSpan& s = sorted[k];
    if (s.start < 0 || s.start >= s.end || static_cast<std::size_t>(s.end) > tokens.size()) {
      throw std::invalid_argument("prune: span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                                  ") out of range for length " + std::to_string(tokens.size()));
    }
    if (k > 0 && sorted[k - 1].end > s.start) throw std::invalid_argument("prune: overlapping spans");
  }
  TokenSeq out;
  out.reserve(tokens.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    while (next < sorted.size() && static_cast<std::size_t>(sorted[next].end) <= i) ++next;
    const bool inside = next < sorted.size() && static_cast<std::size_t>(sorted[next].start) <= i;
    if (!inside) out.push_back(tokens[i]);
  }
  return out;
}

std::vector<DetectionUnit> filter_instances(const ModelParams& teacher, const ModelParams& student,
                                            const Corpus& samples, const DetectionConfig& cfg, const Vocab& vocab) {
  std::vector<DetectionUnit> kept;
  for (const TaskSample& s : samples) {
    for (DetectionUnit& u : detection_units(s, cfg, vocab)) {
      if (greedy_matches(teacher, u.context, u.target) && !greedy_matches(student, u.context, u.target)) {
        kept.push_back(std::move(u));
      }
    }
  }
  return kept;
}

namespace {

TokenSeq pruned_context(const DetectionUnit& unit, const ConfounderSpan& span) {
  const TokenSpan cs = to_context_span(span, unit.instruction_len);
  return prune(unit.context, std::span<const TokenSpan>(&cs, 1));
}

}  // namespace

bool verify_removal(const ModelParams& teacher, const ModelParams& student, const DetectionUnit& unit,
                    const ConfounderSpan& span) {
  const TokenSeq ctx = pruned_context(unit, span);
  if (ctx.empty()) return false;
  return greedy_matches(teacher, ctx, unit.target) && greedy_matches(student, ctx, unit.target);
}

std::vector<bool> baseline_random_mask(std::size_t scoped_len, std::size_t k, std::uint64_t seed) {
  if (k > scoped_len) throw std::invalid_argument("baseline_random_mask: budget exceeds scoped length");
  std::vector<std::size_t> idx(scoped_len);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  std::vector<bool> flags(scoped_len, false);
  for (std::size_t i = 0; i < k; ++i) flags[idx[i]] = true;
  return flags;
}

std::vector<double> token_surprisal(const ModelParams& student, std::span<const TokenId> context) {
  if (context.empty()) throw std::invalid_argument("token_surprisal: empty context");
  const ad::DenseArray logits = forward_logits(student, context);
  std::vector<double> out(context.size());
  out[0] = std::log(static_cast<double>(student.config.vocab_size));
  for (std::size_t i = 1; i < context.size(); ++i) {
    const auto row = logits.row(i - 1);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    out[i] = -(row[static_cast<std::size_t>(context[i])] - mx - std::log(z));
  }
  return out;
}

std::vector<bool> baseline_ppl_mask(const ModelParams& student, std::span<const TokenId> context, std::size_t k) {
  if (k > context.size()) throw std::invalid_argument("baseline_ppl_mask: budget exceeds scoped length");
  const std::vector<double> nll = token_surprisal(student, context);
  std::vector<std::size_t> idx(context.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return nll[a] > nll[b]; });
  std::vector<bool> flags(context.size(), false);
  for (std::size_t i = 0; i < k; ++i) flags[idx[i]] = true;
  return flags;
}

TokenConfusion& TokenConfusion::operator+=(const TokenConfusion& o) {
  flagged += o.flagged;
  planted += o.planted;
  hits += o.hits;
  return *this;
}

TokenConfusion score_flags(const std::vector<bool>& flags, const std::vector<bool>& planted) {
  if (flags.size() != planted.size()) throw std::invalid_argument("score_flags: length mismatch");
  TokenConfusion c;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    c.flagged += flags[i];
    c.planted += planted[i];
    c.hits += flags[i] && planted[i];
  }
  return c;
}

std::vector<bool> strategy_flags(const ModelParams& student, const DetectionUnit& unit, const AttributionRecord& record,
                                 const DetectionConfig& cfg) {
  const std::vector<bool> grad = flag_confounders(record, cfg.tau);
  const auto budget = static_cast<std::size_t>(std::count(grad.begin(), grad.end(), true));
  switch (cfg.strategy) {
    case MaskingStrategy::gradient: return grad;
    case MaskingStrategy::random:
      return baseline_random_mask(unit.context.size(), budget,
                                  derive_seed(cfg.seed, "baselines/random",
                                              static_cast<std::uint64_t>(unit.sample_id) * 8 + unit.segment));
    case MaskingStrategy::ppl: return baseline_ppl_mask(student, unit.context, budget);
    case MaskingStrategy::none: return std::vector<bool>(unit.context.size(), false);
  }
  return grad;
}

UnitReport analyze_unit(const ModelParams& teacher, const ModelParams& student, const DetectionUnit& unit,
                        const DetectionConfig& cfg) {
  UnitReport ur;
  ur.sample_id = unit.sample_id;
  ur.segment = unit.segment;
  ur.context = unit.context;
  ur.planted = unit.planted;
  ur.record = compute_attribution(teacher, student, unit, cfg.reduction);
  ur.flags = strategy_flags(student, unit, ur.record, cfg);
  for (const ConfounderSpan& s : extract_scoped_spans(ur.flags, unit.instruction_len, cfg.min_span_len)) {
    ur.spans.push_back({s, false});
  }
  return ur;
}

CounterfactualBuild build_counterfactual_dataset(const ModelParams& teacher, const ModelParams& student,
                                                 const Corpus& samples, const DetectionConfig& cfg,
                                                 const Vocab& vocab) {
  cfg.validate();
  CounterfactualBuild out;
  DetectionReport& rep = out.report;
  rep.config = cfg;
  rep.samples_scanned = samples.size();

  std::size_t confounded_units = 0;
  for (const TaskSample& s : samples) {
    const auto units = detection_units(s, cfg, vocab);
    rep.units_scanned += units.size();
    if (s.confounded()) confounded_units += units.size();
  }
  rep.base_confounded_rate =
      rep.units_scanned == 0 ? 0.0 : static_cast<double>(confounded_units) / static_cast<double>(rep.units_scanned);

  const std::vector<DetectionUnit> candidates = filter_instances(teacher, student, samples, cfg, vocab);
  rep.candidates = candidates.size();
  std::vector<bool> confounded_ids;
  for (const TaskSample& s : samples) {
    if (s.id >= 0 && static_cast<std::size_t>(s.id) >= confounded_ids.size()) confounded_ids.resize(s.id + 1, false);
    if (s.id >= 0) confounded_ids[s.id] = s.confounded();
  }

  for (const DetectionUnit& unit : candidates) {
    if (unit.sample_id >= 0 && confounded_ids[unit.sample_id]) ++rep.confounded_candidates;
    UnitReport ur = analyze_unit(teacher, student, unit, cfg);
    rep.tokens += score_flags(ur.flags, unit.planted);
    for (SpanDecision& d : ur.spans) {
      ++rep.spans_proposed;
      d.accepted = verify_removal(teacher, student, unit, d.span);
      if (!d.accepted) continue;
      ++rep.spans_accepted;
      CounterfactualSample cf;
      cf.source_id = unit.sample_id;
      cf.segment = unit.segment;
      cf.span = d.span;
      cf.pruned_input = pruned_context(unit, d.span);
      cf.original_length = unit.context.size();
      // verify_removal established that the teacher's greedy output on the
      // pruned input is the gold target.
      cf.target = unit.target;
      cf.provenance = TargetProvenance::teacher;
      out.samples.push_back(std::move(cf));
    }
    rep.units.push_back(std::move(ur));
  }
  return out;
}

namespace {

json span_to_json(const ConfounderSpan& s) {
  return {{"scope", to_string(s.scope)}, {"start", s.start}, {"end", s.end}};
}

ConfounderSpan span_from_json(const json& j) {
  ConfounderSpan s;
  s.scope = scope_from_string(j.at("scope").get<std::string>());
  s.start = j.at("start").get<int>();
  s.end = j.at("end").get<int>();
  if (s.start < 0 || s.start >= s.end) throw std::runtime_error("invalid span in counterfactual file");
  return s;
}

json confusion_to_json(const TokenConfusion& c) {
  return {{"flagged", c.flagged}, {"planted", c.planted}, {"hits", c.hits},
          {"precision", c.precision()}, {"recall", c.recall()}};
}

}  // namespace

void write_detection_report(const DetectionReport& r, const std::filesystem::path& path) {
  json units = json::array();
  for (const UnitReport& u : r.units) {
    json spans = json::array();
    for (const SpanDecision& d : u.spans) {
      json sj = span_to_json(d.span);
      sj["accepted"] = d.accepted;
      spans.push_back(sj);
    }
    units.push_back({{"sample_id", u.sample_id},
                     {"segment", u.segment},
                     {"context", u.context},
                     {"g_teacher", u.record.g_teacher},
                     {"g_student", u.record.g_student},
                     {"gn_teacher", u.record.gn_teacher},
                     {"gn_student", u.record.gn_student},
                     {"delta", u.record.delta},
                     {"norm_delta", u.record.norm_delta},
                     {"degenerate", u.record.degenerate},
                     {"flags", u.flags},
                     {"planted", u.planted},
                     {"spans", spans}});
  }
  const DetectionConfig& c = r.config;
  json j = {{"format", "leaf-detection-report"},
            {"version", 1},
            {"config",
             {{"tau", c.tau},
              {"min_span_len", c.min_span_len},
              {"scope", to_string(c.scope)},
              {"split", to_string(c.split)},
              {"include_student_wrong_originals", c.include_student_wrong_originals},
              {"strategy", to_string(c.strategy)}}},
            {"samples_scanned", r.samples_scanned},
            {"units_scanned", r.units_scanned},
            {"candidates", r.candidates},
            {"confounded_candidates", r.confounded_candidates},
            {"base_confounded_rate", r.base_confounded_rate},
            {"spans_proposed", r.spans_proposed},
            {"spans_accepted", r.spans_accepted},
            {"tokens", confusion_to_json(r.tokens)},
            {"units", units}};
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(1) << '\n';
}

void write_heatmap_csv(const DetectionReport& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "sample_id,segment,position,token_id,g_teacher,g_student,norm_delta\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const UnitReport& u : r.units) {
    for (std::size_t i = 0; i < u.context.size(); ++i) {
      os << u.sample_id << ',' << u.segment << ',' << i << ',' << u.context[i] << ',' << num(u.record.g_teacher[i])
         << ',' << num(u.record.g_student[i]) << ',' << num(u.record.norm_delta[i]) << '\n';
    }
  }
}

void write_counterfactuals(const std::vector<CounterfactualSample>& cfs, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const CounterfactualSample& c : cfs) {
    json j = {{"source_id", c.source_id},
              {"segment", c.segment},
              {"span", span_to_json(c.span)},
              {"pruned_input", c.pruned_input},
              {"target", c.target},
              {"provenance", to_string(c.provenance)},
              {"original_length", c.original_length}};
    os << j.dump() << '\n';
  }
}

std::vector<CounterfactualSample> read_counterfactuals(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<CounterfactualSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      CounterfactualSample c;
      c.source_id = j.at("source_id").get<int>();
      c.segment = j.at("segment").get<std::size_t>();
      c.span = span_from_json(j.at("span"));
      c.pruned_input = j.at("pruned_input").get<TokenSeq>();
      c.target = j.at("target").get<TokenSeq>();
      c.provenance = provenance_from_string(j.at("provenance").get<std::string>());
      c.original_length = j.at("original_length").get<std::size_t>();
      if (c.pruned_input.size() + static_cast<std::size_t>(c.span.length()) != c.original_length) {
        throw std::runtime_error("pruned length does not match original length minus span");
      }
      out.push_back(std::move(c));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace leaf
