// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "leaf/corpus.hpp"

namespace leaf {

enum class SplitMode { none, two_segment, three_segment };

const char* to_string(SplitMode m);
SplitMode split_mode_from_string(const std::string& s);
int segment_count(SplitMode m);

/// One (context, target segment) pair. context = instruction +
/// response[0, response_offset); target = the next response segment.
struct SegmentPair {
  std::size_t index = 0;
  TokenSeq context;
  TokenSeq target;
  std::size_t instruction_len = 0;
  std::size_t response_offset = 0;
};

struct SplitResult {
  std::vector<SegmentPair> pairs;
  bool fell_back = false;  // response shorter than the segment count
};

/// Cuts the response at floor(len * j / k), j = 1..k-1, each cut snapped
/// forward to just after the next `delimiter` that still lies inside the
/// segment. Targets tile the response exactly once.
SplitResult split_response(const TaskSample& sample, SplitMode mode, TokenId delimiter);

}  // namespace leaf
