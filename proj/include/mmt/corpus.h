#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mmt/features.h"
#include "mmt/ops.h"

namespace mmt {

// Aligned source/target id sequences (without BOS/EOS) and, for fusion
// modes, one feature record per pair.
struct ParallelCorpus {
  std::vector<std::vector<TokenId>> sources;
  std::vector<std::vector<TokenId>> targets;
  std::vector<PatchFeatures> features;

  std::size_t size() const { return sources.size(); }
  bool has_features() const { return !features.empty(); }
  // Throws AlignmentError when the three lists disagree in length.
  void check() const;
  // Sub-corpus with the given rows, in the given order.
  ParallelCorpus select(std::span<const std::size_t> rows) const;
  // Feature pointers for `rows`; empty when the corpus has no features.
  std::vector<const PatchFeatures*> feature_ptrs(std::span<const std::size_t> rows) const;
};

}  // namespace mmt
