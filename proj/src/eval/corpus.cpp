#include "mmt/corpus.h"

#include "mmt/errors.h"

namespace mmt {

void ParallelCorpus::check() const {
  if (sources.size() != targets.size()) {
    throw AlignmentError(std::to_string(sources.size()) + " source lines but " + std::to_string(targets.size()) +
                         " target lines");
  }
  if (!features.empty() && features.size() != sources.size()) {
    throw AlignmentError(std::to_string(features.size()) + " feature records for " +
                         std::to_string(sources.size()) + " sentence pairs");
  }
}

ParallelCorpus ParallelCorpus::select(std::span<const std::size_t> rows) const {
  ParallelCorpus out;
  for (std::size_t r : rows) {
    out.sources.push_back(sources.at(r));
    out.targets.push_back(targets.at(r));
    if (has_features()) out.features.push_back(features.at(r));
  }
  return out;
}

std::vector<const PatchFeatures*> ParallelCorpus::feature_ptrs(std::span<const std::size_t> rows) const {
  std::vector<const PatchFeatures*> out;
  if (!has_features()) return out;
  for (std::size_t r : rows) out.push_back(&features.at(r));
  return out;
}

}  // namespace mmt
