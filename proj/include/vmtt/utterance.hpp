#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vmtt/tensor.hpp"

namespace vmtt {

/// Ground-truth extent of one token in feature frames (10 ms each),
/// half-open [start, end).
struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct Utterance {
  std::string id;
  Tensor features;  // T_in x feature_dim
  std::vector<int> tokens;
  std::vector<TokenSpan> spans;  // one per token

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

}  // namespace vmtt
