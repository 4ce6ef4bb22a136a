// SPDX-License-Identifier: Apache-2.0

#include "leaf/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "leaf/rng.hpp"

namespace leaf {

using json = nlohmann::json;

const char* to_string(Split s) {
  switch (s) {
    case Split::teacher_train: return "teacher_train";
    case Split::student_train: return "student_train";
    case Split::eval_clean: return "eval_clean";
    case Split::eval_confounded: return "eval_confounded";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  for (Split v : {Split::teacher_train, Split::student_train, Split::eval_clean, Split::eval_confounded}) {
    if (s == to_string(v)) return v;
  }
  throw std::invalid_argument("unknown split '" + s + "'");
}

const char* to_string(SpanScope s) { return s == SpanScope::instruction ? "instruction" : "response"; }

SpanScope scope_from_string(const std::string& s) {
  if (s == "instruction") return SpanScope::instruction;
  if (s == "response") return SpanScope::response;
  throw std::invalid_argument("unknown span scope '" + s + "'");
}

TokenSeq TaskSample::full_sequence() const {
  TokenSeq seq = instruction;
  seq.insert(seq.end(), response.begin(), response.end());
  return seq;
}

Vocab::Vocab(int base) : base_(base) {
  if (base < 2) throw std::invalid_argument("vocab layout needs base >= 2");
}

std::pair<int, int> Vocab::query_pair(int q) {
  static constexpr std::array<std::pair<int, int>, kQueries> pairs{{{0, 1}, {0, 2}, {1, 2}}};
  return pairs.at(static_cast<std::size_t>(q));
}

std::string Vocab::token_name(TokenId t) const {
  if (is_digit(t)) return std::to_string(t);
  if (is_variable(t)) return std::string(1, static_cast<char>('a' + (t - base_)));
  if (is_distractor(t)) return "D" + std::to_string(t - distractor(0));
  if (t == equals()) return "=";
  if (t == separator()) return ";";
  if (is_query(t)) {
    auto [i, j] = query_pair(t - query(0));
    return std::string("Q") + static_cast<char>('a' + i) + static_cast<char>('a' + j);
  }
  if (t == stop()) return "<stop>";
  return "<" + std::to_string(t) + ">";
}

std::string Vocab::render(const TokenSeq& seq) const {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += token_name(seq[i]);
  }
  return out;
}

void CorpusConfig::validate() const {
  const Vocab vocab(base);
  if (vocab_size != 0 && vocab_size < vocab.size()) {
    throw std::invalid_argument("vocab_size " + std::to_string(vocab_size) + " too small for layout needing " +
                                std::to_string(vocab.size()) + " tokens");
  }
  if (!(confounder_rate > 0.0 && confounder_rate <= 1.0)) {
    throw std::invalid_argument("confounder_rate must lie in (0, 1]");
  }
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0, 1]");
  if (!(response_noise_rate >= 0.0 && response_noise_rate <= 1.0)) {
    throw std::invalid_argument("response_noise_rate must lie in [0, 1]");
  }
  if (!(three_binding_rate >= 0.0 && three_binding_rate <= 1.0)) {
    throw std::invalid_argument("three_binding_rate must lie in [0, 1]");
  }
  if (n_teacher_train < 0 || n_student_train < 0 || n_eval < 0) {
    throw std::invalid_argument("split sizes must be non-negative");
  }
}

int CorpusConfig::resolved_vocab_size() const { return vocab_size == 0 ? Vocab(base).size() : vocab_size; }

namespace {

struct Problem {
  std::vector<int> values;  // one per bound variable, in variable order
  int query = 0;
};

enum class Pool { teacher, student, eval };

Pool pool_of(const Problem& p, std::uint64_t seed) {
  std::uint64_t h = derive_seed(seed, "problem-pool", static_cast<std::uint64_t>(p.query));
  for (int v : p.values) h = splitmix64(h ^ static_cast<std::uint64_t>(v + 1));
  h = splitmix64(h ^ p.values.size());
  const std::uint64_t bucket = h % 5;
  if (bucket < 2) return Pool::teacher;
  if (bucket < 4) return Pool::student;
  return Pool::eval;
}

Problem draw_problem(Rng& rng, const CorpusConfig& cfg, Pool want) {
  for (int attempt = 0; attempt < 1'000'000; ++attempt) {
    Problem p;
    const int n = rng.bernoulli(cfg.three_binding_rate) ? 3 : 2;
    for (int k = 0; k < n; ++k) p.values.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.base))));
    p.query = n == 3 ? static_cast<int>(rng.below(Vocab::kQueries)) : 0;
    if (pool_of(p, cfg.seed) == want) return p;
  }
  throw std::runtime_error("problem pool is empty for this base/seed");
}

int answer_of(const Problem& p, int base) {
  auto [i, j] = Vocab::query_pair(p.query);
  return (p.values[static_cast<std::size_t>(i)] + p.values[static_cast<std::size_t>(j)]) % base;
}

TokenSeq clean_instruction(const Vocab& vocab, const Problem& p) {
  TokenSeq out;
  for (std::size_t k = 0; k < p.values.size(); ++k) {
    out.push_back(vocab.variable(static_cast<int>(k)));
    out.push_back(vocab.equals());
    out.push_back(vocab.digit(p.values[k]));
    out.push_back(vocab.separator());
  }
  out.push_back(vocab.query(p.query));
  return out;
}

TokenSeq gold_response(const Vocab& vocab, const Problem& p, int answer) {
  auto [i, j] = Vocab::query_pair(p.query);
  return {vocab.variable(i), vocab.digit(p.values[static_cast<std::size_t>(i)]), vocab.separator(),
          vocab.variable(j), vocab.digit(p.values[static_cast<std::size_t>(j)]), vocab.separator(),
          vocab.equals(),    vocab.digit(answer),                                 vocab.stop()};
}

TaskSample make_sample(int id, Split split, const Vocab& vocab, const Problem& p, std::optional<int> distractor,
                       std::optional<int> noise) {
  TaskSample s;
  s.id = id;
  s.split = split;
  s.answer = answer_of(p, vocab.base());
  s.instruction = clean_instruction(vocab, p);
  s.response = gold_response(vocab, p, s.answer);
  if (distractor) {
    // Distractor clause sits between the last binding and the query token.
    const int at = static_cast<int>(s.instruction.size()) - 1;
    s.instruction.insert(s.instruction.begin() + at, vocab.distractor(*distractor));
    s.planted_spans.push_back({SpanScope::instruction, at, at + 1});
  }
  if (noise) {
    // Noise step after the first reasoning step.
    constexpr int at = 3;
    s.response.insert(s.response.begin() + at, {vocab.distractor(*noise), vocab.separator()});
    s.planted_spans.push_back({SpanScope::response, at, at + 2});
  }
  return s;
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  const Vocab vocab(cfg.base);
  const auto base = static_cast<std::uint64_t>(cfg.base);
  Corpus corpus;
  int next_id = 0;

  auto train_split = [&](Split split, int n, Pool pool, const char* stream) {
    Rng rng(derive_seed(cfg.seed, stream));
    for (int k = 0; k < n; ++k) {
      const Problem p = draw_problem(rng, cfg, pool);
      const int answer = answer_of(p, cfg.base);
      std::optional<int> distractor;
      if (rng.bernoulli(cfg.confounder_rate)) {
        const bool spurious = split == Split::student_train && rng.bernoulli(cfg.rho);
        const int uniform = static_cast<int>(rng.below(base));
        distractor = spurious ? (answer + 1) % cfg.base : uniform;
      }
      std::optional<int> noise;
      if (split == Split::student_train && rng.bernoulli(cfg.response_noise_rate)) {
        noise = static_cast<int>(rng.below(base));
      }
      corpus.push_back(make_sample(next_id++, split, vocab, p, distractor, noise));
    }
  };
  train_split(Split::teacher_train, cfg.n_teacher_train, Pool::teacher, "corpus/teacher_train");
  train_split(Split::student_train, cfg.n_student_train, Pool::student, "corpus/student_train");

  // Paired eval: sample k of eval_confounded is sample k of eval_clean plus a
  // distractor with an independent value.
  Rng rng(derive_seed(cfg.seed, "corpus/eval"));
  std::vector<Problem> problems;
  std::vector<int> distractors;
  for (int k = 0; k < cfg.n_eval; ++k) {
    problems.push_back(draw_problem(rng, cfg, Pool::eval));
    distractors.push_back(static_cast<int>(rng.below(base)));
  }
  for (const Problem& p : problems) {
    corpus.push_back(make_sample(next_id++, Split::eval_clean, vocab, p, std::nullopt, std::nullopt));
  }
  for (std::size_t k = 0; k < problems.size(); ++k) {
    corpus.push_back(make_sample(next_id++, Split::eval_confounded, vocab, problems[k], distractors[k], std::nullopt));
  }
  return corpus;
}

std::optional<int> evaluate_rule(const Vocab& vocab, const TokenSeq& instruction) {
  std::array<std::optional<int>, Vocab::kVariables> bound{};
  std::optional<int> query;
  for (std::size_t i = 0; i < instruction.size(); ++i) {
    const TokenId t = instruction[i];
    if (vocab.is_variable(t) && i + 2 < instruction.size() && instruction[i + 1] == vocab.equals() && vocab.is_digit(instruction[i + 2])) {
      bound[static_cast<std::size_t>(t - vocab.variable(0))] = instruction[i + 2];
      i += 2;
    } else if (vocab.is_query(t)) {
      query = t - vocab.query(0);
    }
  }
  if (!query) return std::nullopt;
  auto [a, b] = Vocab::query_pair(*query);
  const auto& va = bound[static_cast<std::size_t>(a)];
  const auto& vb = bound[static_cast<std::size_t>(b)];
  if (!va || !vb) return std::nullopt;
  return (*va + *vb) % vocab.base();
}

// ------------------------------------------------------------------------ io

CorpusParseError::CorpusParseError(std::size_t line, const std::string& what)
    : std::runtime_error("corpus line " + std::to_string(line) + ": " + what), line_(line) {}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write corpus " + path.string());
  for (const TaskSample& s : corpus) {
    json spans = json::array();
    for (const auto& sp : s.planted_spans) {
      spans.push_back({{"scope", to_string(sp.scope)}, {"start", sp.start}, {"end", sp.end}});
    }
    const json j = {{"id", s.id},
                    {"split", to_string(s.split)},
                    {"instruction", s.instruction},
                    {"response", s.response},
                    {"answer", s.answer},
                    {"planted_spans", spans}};
    os << j.dump() << '\n';
  }
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read corpus " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      TaskSample s;
      s.id = j.at("id").get<int>();
      s.split = split_from_string(j.at("split").get<std::string>());
      s.instruction = j.at("instruction").get<TokenSeq>();
      s.response = j.at("response").get<TokenSeq>();
      s.answer = j.at("answer").get<int>();
      for (const auto& sp : j.at("planted_spans")) {
        ConfounderSpan span{scope_from_string(sp.at("scope").get<std::string>()), sp.at("start").get<int>(),
                            sp.at("end").get<int>()};
        const auto limit = span.scope == SpanScope::instruction ? s.instruction.size() : s.response.size();
        if (span.start < 0 || span.start >= span.end || static_cast<std::size_t>(span.end) > limit) {
          throw std::invalid_argument("planted span out of range");
        }
        s.planted_spans.push_back(span);
      }
      corpus.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw CorpusParseError(lineno, e.what());
    }
  }
  return corpus;
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats st;
  st.total = corpus.size();
  for (Split s : {Split::teacher_train, Split::student_train, Split::eval_clean, Split::eval_confounded}) {
    st.per_split[to_string(s)] = 0;
    st.confounded_per_split[to_string(s)] = 0;
  }
  if (corpus.empty()) return st;
  auto lengths = [&](auto member) {
    LengthStats ls{std::numeric_limits<std::size_t>::max(), 0, 0.0};
    for (const TaskSample& s : corpus) {
      const std::size_t n = (s.*member).size();
      ls.min = std::min(ls.min, n);
      ls.max = std::max(ls.max, n);
      ls.mean += static_cast<double>(n);
    }
    ls.mean /= static_cast<double>(corpus.size());
    return ls;
  };
  st.instruction = lengths(&TaskSample::instruction);
  st.response = lengths(&TaskSample::response);
  for (const TaskSample& s : corpus) {
    ++st.per_split[to_string(s.split)];
    if (s.confounded()) {
      ++st.confounded;
      ++st.confounded_per_split[to_string(s.split)];
    }
  }
  return st;
}

Corpus select_split(const Corpus& corpus, Split split) {
  Corpus out;
  std::copy_if(corpus.begin(), corpus.end(), std::back_inserter(out),
               [&](const TaskSample& s) { return s.split == split; });
  return out;
}

}  // namespace leaf
