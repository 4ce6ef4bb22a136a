// SPDX-License-Identifier: Apache-2.0

#include "leaf/splitting.hpp"

#include <stdexcept>

namespace leaf {

const char* to_string(SplitMode m) {
  switch (m) {
    case SplitMode::none: return "no-split";
    case SplitMode::two_segment: return "2-segment";
    case SplitMode::three_segment: return "3-segment";
  }
  return "?";
}

SplitMode split_mode_from_string(const std::string& s) {
  for (SplitMode m : {SplitMode::none, SplitMode::two_segment, SplitMode::three_segment}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown splitting mode '" + s + "'");
}

int segment_count(SplitMode m) {
  switch (m) {
    case SplitMode::none: return 1;
    case SplitMode::two_segment: return 2;
    case SplitMode::three_segment: return 3;
  }
  return 1;
}

SplitResult split_response(const TaskSample& sample, SplitMode mode, TokenId delimiter) {
  const std::size_t len = sample.response.size();
  const auto k = static_cast<std::size_t>(segment_count(mode));
  SplitResult out;
  if (len == 0) throw std::invalid_argument("split_response: empty response");
  std::vector<std::size_t> cuts{0};
  if (k > 1 && len >= k) {
    for (std::size_t j = 1; j < k; ++j) {
      const std::size_t raw = len * j / k;
      const std::size_t limit = len * (j + 1) / k;  // next raw cut (or len)
      std::size_t cut = raw;
      for (std::size_t c = raw; c < limit; ++c) {
        if (c >= 1 && sample.response[c - 1] == delimiter) {
          cut = c;
          break;
        }
      }
      cuts.push_back(std::max(cut, cuts.back() + 1));
    }
  } else if (k > 1) {
    out.fell_back = true;
  }
  cuts.push_back(len);

  for (std::size_t j = 0; j + 1 < cuts.size(); ++j) {
    SegmentPair p;
    p.index = j;
    p.instruction_len = sample.instruction.size();
    p.response_offset = cuts[j];
    p.context = sample.instruction;
    p.context.insert(p.context.end(), sample.response.begin(),
                     sample.response.begin() + static_cast<std::ptrdiff_t>(cuts[j]));
    p.target.assign(sample.response.begin() + static_cast<std::ptrdiff_t>(cuts[j]),
                    sample.response.begin() + static_cast<std::ptrdiff_t>(cuts[j + 1]));
    out.pairs.push_back(std::move(p));
  }
  return out;
}

}  // namespace leaf
