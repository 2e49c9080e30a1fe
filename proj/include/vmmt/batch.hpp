#pragma once

// Padded batch of parallel sentences with optional image feature rows.

#include <cstdint>
#include <vector>

namespace vmmt {

// Reserved vocabulary ids, fixed across every corpus and checkpoint.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

struct Batch {
  // [B][T] token ids, padded with kPadId; lengths give the real extents.
  std::vector<std::vector<int>> src;
  std::vector<std::vector<int>> tgt;  // without <s>/</s>
  std::vector<int> src_len;
  std::vector<int> tgt_len;
  std::vector<std::vector<double>> features;  // empty or [B][o]
  std::vector<uint8_t> synthetic;             // origin flag per sentence

  int size() const { return static_cast<int>(src.size()); }
  bool has_features() const { return !features.empty(); }
};

}  // namespace vmmt
