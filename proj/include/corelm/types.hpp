#pragma once

#include <cstddef>
#include <cstdint>

namespace corelm {

using TokenId = std::int64_t;
// 0 marks a position outside every entity.
using EntityId = std::int64_t;

// Half-open token range [begin, end) covered by one source word.
struct WordSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const WordSpan&) const = default;
};

}  // namespace corelm
