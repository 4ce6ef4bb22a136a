// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace leaf {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

}  // namespace leaf
