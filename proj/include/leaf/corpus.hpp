// SPDX-License-Identifier: Apache-2.0
//
// Synthetic variable-binding / modular-sum tasks with planted distractors.
//
//   instruction:  a = 3 ; b = 1 ; c = 4 ; [D_v] Q_ac
//   response:     a 3 ; c 4 ; = 2 <stop>
//
// D_v is a distractor token carrying a value v. In student_train, with
// probability rho, v = (answer + 1) mod base: a shortcut that predicts the
// answer without reading the bindings. Everywhere else v is uniform and
// independent of the answer.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "leaf/tokens.hpp"

namespace leaf {

enum class Split { teacher_train, student_train, eval_clean, eval_confounded };
enum class SpanScope { instruction, response };

const char* to_string(Split s);
Split split_from_string(const std::string& s);
const char* to_string(SpanScope s);
SpanScope scope_from_string(const std::string& s);

/// Half-open token interval [start, end) inside the scoped sequence.
struct ConfounderSpan {
  SpanScope scope = SpanScope::instruction;
  int start = 0;
  int end = 0;

  int length() const { return end - start; }
  friend bool operator==(const ConfounderSpan&, const ConfounderSpan&) = default;
};

struct TaskSample {
  int id = 0;
  Split split = Split::teacher_train;
  TokenSeq instruction;
  TokenSeq response;
  int answer = 0;
  std::vector<ConfounderSpan> planted_spans;

  bool confounded() const { return !planted_spans.empty(); }
  TokenSeq full_sequence() const;
  friend bool operator==(const TaskSample&, const TaskSample&) = default;
};

using Corpus = std::vector<TaskSample>;

/// Token id layout: digits, variable names, distractor tokens (one per
/// value), '=', ';', one query token per unordered variable pair, stop.
class Vocab {
 public:
  static constexpr int kVariables = 3;
  static constexpr int kQueries = 3;  // {a,b}, {a,c}, {b,c}

  explicit Vocab(int base);

  int base() const { return base_; }
  int size() const { return stop() + 1; }

  TokenId digit(int v) const { return v; }
  TokenId variable(int k) const { return base_ + k; }
  TokenId distractor(int v) const { return base_ + kVariables + v; }
  TokenId equals() const { return 2 * base_ + kVariables; }
  TokenId separator() const { return equals() + 1; }
  TokenId query(int q) const { return separator() + 1 + q; }
  TokenId stop() const { return query(kQueries - 1) + 1; }

  bool is_digit(TokenId t) const { return t >= 0 && t < base_; }
  bool is_variable(TokenId t) const { return t >= base_ && t < base_ + kVariables; }
  bool is_distractor(TokenId t) const { return t >= distractor(0) && t < distractor(0) + base_; }
  bool is_query(TokenId t) const { return t >= query(0) && t <= query(kQueries - 1); }

  /// Variables (i, j), i < j, referenced by query token q.
  static std::pair<int, int> query_pair(int q);

  std::string token_name(TokenId t) const;
  std::string render(const TokenSeq& seq) const;

 private:
  int base_;
};

struct CorpusConfig {
  int base = 5;
  int vocab_size = 0;  // 0 = exactly the layout size; otherwise must fit it
  int n_teacher_train = 2000;
  int n_student_train = 2000;
  int n_eval = 300;  // per eval split; eval_clean and eval_confounded are paired
  double confounder_rate = 0.5;
  double rho = 0.9;
  double response_noise_rate = 0.1;
  double three_binding_rate = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  int resolved_vocab_size() const;
};

/// Deterministic in cfg.seed. Problems (binding values + query) are
/// partitioned by a seeded hash into teacher / student / eval pools, so the
/// splits never share a problem.
Corpus generate_corpus(const CorpusConfig& cfg);

/// Independent evaluator of the task rule: parses bindings and the query
/// from an instruction, ignoring anything that is not a binding clause.
std::optional<int> evaluate_rule(const Vocab& vocab, const TokenSeq& instruction);

/// JSON Lines, one sample per line:
/// {id, split, instruction, response, answer, planted_spans: [{scope, start, end}]}
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus read_corpus(const std::filesystem::path& path);

class CorpusParseError : public std::runtime_error {
 public:
  CorpusParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct LengthStats {
  std::size_t min = 0;
  std::size_t max = 0;
  double mean = 0.0;
};

struct CorpusStats {
  std::size_t total = 0;
  LengthStats instruction;
  LengthStats response;
  std::map<std::string, std::size_t> per_split;
  std::map<std::string, std::size_t> confounded_per_split;
  std::size_t confounded = 0;
};

CorpusStats corpus_stats(const Corpus& corpus);

Corpus select_split(const Corpus& corpus, Split split);

}  // namespace leaf
