// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "leaf/rng.hpp"
#include "leaf/splitting.hpp"

using namespace leaf;

namespace {

TaskSample with_response(TokenSeq response) {
  TaskSample s;
  s.instruction = {1, 2, 3};
  s.response = std::move(response);
  return s;
}

constexpr TokenId kDelim = 99;

}  // namespace

TEST_CASE("no-split yields the whole response") {
  const TaskSample s = with_response({4, 5, 6, 7});
  const SplitResult r = split_response(s, SplitMode::none, kDelim);
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].context == s.instruction);
  CHECK(r.pairs[0].target == s.response);
  CHECK_FALSE(r.fell_back);
}

TEST_CASE("2-segment without delimiters cuts at the midpoint") {
  const TaskSample s = with_response({0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  const SplitResult r = split_response(s, SplitMode::two_segment, kDelim);
  REQUIRE(r.pairs.size() == 2);
  CHECK(r.pairs[0].target.size() == 5);
  CHECK(r.pairs[1].target.size() == 5);
  CHECK(r.pairs[1].context == TokenSeq{1, 2, 3, 0, 1, 2, 3, 4});
  CHECK(r.pairs[1].response_offset == 5);
}

TEST_CASE("cuts snap forward to just after a delimiter inside the segment") {
  //                           0  1  2      3  4  5      6  7  8
  const TaskSample s = with_response({5, 0, kDelim, 6, 1, kDelim, 13, 1, 18});
  const SplitResult two = split_response(s, SplitMode::two_segment, kDelim);
  REQUIRE(two.pairs.size() == 2);
  CHECK(two.pairs[1].response_offset == 6);
  const SplitResult three = split_response(s, SplitMode::three_segment, kDelim);
  REQUIRE(three.pairs.size() == 3);
  CHECK(three.pairs[1].response_offset == 3);
  CHECK(three.pairs[2].response_offset == 6);
}

TEST_CASE("short responses fall back to a single pair") {
  const TaskSample s = with_response({4, 5});
  const SplitResult r = split_response(s, SplitMode::three_segment, kDelim);
  CHECK(r.fell_back);
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].target == s.response);
  CHECK_THROWS(split_response(with_response({}), SplitMode::none, kDelim));
}

TEST_CASE("targets tile the response exactly once for fuzzed lengths") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    TokenSeq resp(1 + rng.below(20));
    for (auto& t : resp) t = rng.bernoulli(0.3) ? kDelim : static_cast<TokenId>(rng.below(10));
    const TaskSample s = with_response(resp);
    for (SplitMode m : {SplitMode::none, SplitMode::two_segment, SplitMode::three_segment}) {
      const SplitResult r = split_response(s, m, kDelim);
      TokenSeq joined;
      std::size_t offset = 0;
      for (const SegmentPair& p : r.pairs) {
        CHECK(p.response_offset == offset);
        CHECK_FALSE(p.target.empty());
        CHECK(p.context.size() == s.instruction.size() + offset);
        joined.insert(joined.end(), p.target.begin(), p.target.end());
        offset += p.target.size();
      }
      CHECK(joined == resp);
      const std::size_t expected = resp.size() >= static_cast<std::size_t>(segment_count(m)) ? segment_count(m) : 1;
      CHECK(r.pairs.size() == expected);
    }
  }
}

TEST_CASE("mode names round-trip") {
  for (SplitMode m : {SplitMode::none, SplitMode::two_segment, SplitMode::three_segment}) {
    CHECK(split_mode_from_string(to_string(m)) == m);
  }
  CHECK_THROWS(split_mode_from_string("4-segment"));
}
