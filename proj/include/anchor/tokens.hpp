#ifndef ANCHOR_TOKENS_HPP_
#define ANCHOR_TOKENS_HPP_

#include "anchor/tensor.hpp"

#include <cstdint>
#include <vector>

namespace anchor {

using TokenSequence = std::vector<int32_t>;

// Right-padded batch of token sequences plus the per-row lengths. The mask
// marks exactly the non-pad positions, so unpadding is lossless.
struct TokenBatch {
  Index rows = 0;
  Index width = 0;
  std::vector<int32_t> tokens;  // rows*width, row-major
  std::vector<Index> lengths;
  int32_t pad_id = 0;

  static TokenBatch pad(const std::vector<TokenSequence>& seqs, int32_t pad_id,
                        Index min_width = 0) {
    TokenBatch b;
    b.pad_id = pad_id;
    b.rows = static_cast<Index>(seqs.size());
    b.width = min_width;
    for (const auto& s : seqs) b.width = std::max(b.width, static_cast<Index>(s.size()));
    b.tokens.assign(static_cast<size_t>(b.rows * b.width), pad_id);
    b.lengths.resize(static_cast<size_t>(b.rows));
    for (Index r = 0; r < b.rows; ++r) {
      const auto& s = seqs[static_cast<size_t>(r)];
      b.lengths[static_cast<size_t>(r)] = static_cast<Index>(s.size());
      for (size_t t = 0; t < s.size(); ++t)
        b.tokens[static_cast<size_t>(r) * static_cast<size_t>(b.width) + t] = s[t];
    }
    return b;
  }

  int32_t at(Index r, Index t) const {
    return tokens[static_cast<size_t>(r * width + t)];
  }

  std::vector<uint8_t> mask() const {
    std::vector<uint8_t> m(static_cast<size_t>(rows * width), 0);
    for (Index r = 0; r < rows; ++r)
      for (Index t = 0; t < lengths[static_cast<size_t>(r)]; ++t)
        m[static_cast<size_t>(r * width + t)] = 1;
    return m;
  }

  std::vector<TokenSequence> unpad() const {
    std::vector<TokenSequence> out(static_cast<size_t>(rows));
    for (Index r = 0; r < rows; ++r) {
      out[static_cast<size_t>(r)].assign(
          tokens.begin() + r * width,
          tokens.begin() + r * width + lengths[static_cast<size_t>(r)]);
    }
    return out;
  }
};

}  // namespace anchor

#endif  // ANCHOR_TOKENS_HPP_
