// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <map>
#include <set>

#include "doctest.h"
#include "leaf/corpus.hpp"

using namespace leaf;

namespace {

CorpusConfig small_config(std::uint64_t seed = 7) {
  CorpusConfig c;
  c.n_teacher_train = 300;
  c.n_student_train = 300;
  c.n_eval = 60;
  c.seed = seed;
  return c;
}

int distractor_value(const Vocab& v, const TaskSample& s) {
  for (const auto& sp : s.planted_spans) {
    if (sp.scope == SpanScope::instruction) return s.instruction[static_cast<std::size_t>(sp.start)] - v.distractor(0);
  }
  return -1;
}

// Strip every planted span from a copy of the sample.
TokenSeq strip(const TokenSeq& seq, const std::vector<ConfounderSpan>& spans, SpanScope scope) {
  std::vector<bool> drop(seq.size(), false);
  for (const auto& s : spans) {
    if (s.scope != scope) continue;
    for (int i = s.start; i < s.end; ++i) drop[static_cast<std::size_t>(i)] = true;
  }
  TokenSeq out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!drop[i]) out.push_back(seq[i]);
  }
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("leaf_corpus_" + name);
}

}  // namespace

TEST_CASE("vocab layout") {
  const Vocab v(5);
  CHECK(v.size() == 19);
  CHECK(v.digit(4) == 4);
  CHECK(v.variable(0) == 5);
  CHECK(v.distractor(0) == 8);
  CHECK(v.equals() == 13);
  CHECK(v.separator() == 14);
  CHECK(v.query(0) == 15);
  CHECK(v.stop() == 18);
  CHECK(Vocab::query_pair(1) == std::pair{0, 2});
  std::set<std::string> names;
  for (TokenId t = 0; t < v.size(); ++t) names.insert(v.token_name(t));
  CHECK(names.size() == 19);
  CHECK_THROWS(Vocab(1));
}

TEST_CASE("config validation") {
  CorpusConfig c;
  c.vocab_size = 10;
  CHECK_THROWS(c.validate());
  c.vocab_size = 25;
  CHECK(c.resolved_vocab_size() == 25);
  c = CorpusConfig{};
  c.confounder_rate = 0.0;
  CHECK_THROWS(c.validate());
  c = CorpusConfig{};
  c.rho = 1.5;
  CHECK_THROWS(c.validate());
}

TEST_CASE("generation is deterministic in the seed") {
  CHECK(generate_corpus(small_config(3)) == generate_corpus(small_config(3)));
  CHECK_FALSE(generate_corpus(small_config(3)) == generate_corpus(small_config(4)));
}

TEST_CASE("every sample satisfies the task rule and structural invariants") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const CorpusConfig cfg = small_config(seed);
    const Vocab v(cfg.base);
    for (const TaskSample& s : generate_corpus(cfg)) {
      CAPTURE(s.id);
      REQUIRE(evaluate_rule(v, s.instruction).has_value());
      CHECK(*evaluate_rule(v, s.instruction) == s.answer);
      CHECK(s.response.back() == v.stop());
      CHECK(s.response[s.response.size() - 2] == v.digit(s.answer));
      // Planted spans hold only distractor/noise tokens, never rule tokens,
      // and removing them leaves the answer unchanged.
      for (const auto& sp : s.planted_spans) {
        const TokenSeq& seq = sp.scope == SpanScope::instruction ? s.instruction : s.response;
        REQUIRE(sp.start >= 0);
        REQUIRE(sp.start < sp.end);
        REQUIRE(static_cast<std::size_t>(sp.end) <= seq.size());
        CHECK(v.is_distractor(seq[static_cast<std::size_t>(sp.start)]));
      }
      CHECK(*evaluate_rule(v, strip(s.instruction, s.planted_spans, SpanScope::instruction)) == s.answer);
      if (s.split != Split::student_train) {
        CHECK(std::none_of(s.planted_spans.begin(), s.planted_spans.end(),
                           [](const ConfounderSpan& sp) { return sp.scope == SpanScope::response; }));
      }
    }
  }
}

TEST_CASE("eval splits are paired sample-for-sample") {
  const Corpus c = generate_corpus(small_config());
  const Corpus clean = select_split(c, Split::eval_clean), conf = select_split(c, Split::eval_confounded);
  REQUIRE(clean.size() == conf.size());
  for (std::size_t k = 0; k < clean.size(); ++k) {
    CHECK_FALSE(clean[k].confounded());
    REQUIRE(conf[k].confounded());
    CHECK(strip(conf[k].instruction, conf[k].planted_spans, SpanScope::instruction) == clean[k].instruction);
    CHECK(conf[k].response == clean[k].response);
  }
}

TEST_CASE("splits never share a problem") {
  const Corpus c = generate_corpus(small_config());
  std::map<TokenSeq, std::set<Split>> seen;
  const Vocab v(5);
  for (const auto& s : c) seen[strip(s.instruction, s.planted_spans, SpanScope::instruction)].insert(s.split);
  for (const auto& [problem, splits] : seen) {
    const bool train_t = splits.count(Split::teacher_train) > 0;
    const bool train_s = splits.count(Split::student_train) > 0;
    const bool eval = splits.count(Split::eval_clean) + splits.count(Split::eval_confounded) > 0;
    CHECK(train_t + train_s + eval == 1);
  }
}

TEST_CASE("rho controls the distractor/answer association in student_train only") {
  const Vocab v(5);
  CorpusConfig cfg;
  cfg.n_teacher_train = 0;
  cfg.n_eval = 0;
  cfg.n_student_train = 2000;
  cfg.seed = 11;

  cfg.rho = 1.0;
  for (const auto& s : generate_corpus(cfg)) {
    if (s.confounded() && distractor_value(v, s) >= 0) CHECK(distractor_value(v, s) == (s.answer + 1) % 5);
  }

  cfg.rho = 0.0;
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0, n = 0;
  for (const auto& s : generate_corpus(cfg)) {
    const int d = distractor_value(v, s);
    if (d < 0) continue;
    const double x = d, y = (s.answer + 1) % 5;
    sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y, n += 1;
  }
  const double r = (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
  CHECK(std::abs(r) < 0.1);

  // Teacher split stays uninformative even at rho = 1.
  CorpusConfig tc = cfg;
  tc.rho = 1.0;
  tc.n_teacher_train = 2000;
  tc.n_student_train = 0;
  std::size_t hits = 0, total = 0;
  for (const auto& s : generate_corpus(tc)) {
    const int d = distractor_value(v, s);
    if (d < 0) continue;
    ++total;
    hits += d == (s.answer + 1) % 5;
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(total) < 0.3);
}

TEST_CASE("rule evaluator ignores non-binding tokens and reports missing bindings") {
  const Vocab v(5);
  const TokenSeq ok{v.variable(0), v.equals(), 3, v.separator(), v.distractor(2), v.variable(1), v.equals(), 4,
                    v.separator(), v.query(0)};
  CHECK(evaluate_rule(v, ok) == 2);
  const TokenSeq missing{v.variable(0), v.equals(), 3, v.separator(), v.query(1)};
  CHECK_FALSE(evaluate_rule(v, missing).has_value());
  CHECK_FALSE(evaluate_rule(v, TokenSeq{v.variable(0)}).has_value());
}

TEST_CASE("JSONL round trip, empty file and malformed lines") {
  const Corpus c = generate_corpus(small_config());
  const auto p = temp_path("rt.jsonl");
  write_corpus(c, p);
  CHECK(read_corpus(p) == c);

  write_corpus({}, p);
  CHECK(std::filesystem::file_size(p) == 0);
  CHECK(read_corpus(p).empty());

  write_corpus(Corpus(c.begin(), c.begin() + 3), p);
  {
    std::ifstream is(p);
    std::string all((std::istreambuf_iterator<char>(is)), {});
    all.resize(all.size() - 10);
    std::ofstream os(p, std::ios::trunc | std::ios::binary);
    os << all;
  }
  try {
    read_corpus(p);
    FAIL("expected CorpusParseError");
  } catch (const CorpusParseError& e) {
    CHECK(e.line() == 3);
  }
  std::filesystem::remove(p);
}

TEST_CASE("corpus statistics") {
  TaskSample s;
  s.instruction = TokenSeq(7, 0);
  s.response = TokenSeq(3, 0);
  const CorpusStats one = corpus_stats({s});
  CHECK(one.instruction.min == 7);
  CHECK(one.instruction.max == 7);
  CHECK(one.instruction.mean == 7.0);

  const Corpus c = generate_corpus(small_config());
  const CorpusStats st = corpus_stats(c);
  std::size_t sum = 0;
  for (const auto& [k, n] : st.per_split) sum += n;
  CHECK(sum == c.size());
  CHECK(st.total == c.size());
  const CorpusStats again = corpus_stats(generate_corpus(small_config()));
  CHECK(again.instruction.mean == st.instruction.mean);
  CHECK(again.confounded == st.confounded);
}
