#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mmt/model.h"

namespace mmt {

struct DecodeConfig {
  int beam = 5;
  std::size_t max_out_len = 64;  // generated tokens, EOS included

  void validate() const;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // without BOS and EOS
  double log_prob = 0.0;
  bool finished = false;
};

// Next-token log-probabilities for a set of prefixes that all start with BOS
// and share one length.
using StepFunction = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<TokenId>>&)>;

// Beam search without length normalization. Stops once no live hypothesis
// can beat the best finished one; falls back to the best unfinished
// hypothesis when nothing finished within max_out_len.
Hypothesis beam_search(const StepFunction& step, const DecodeConfig& cfg);
// Argmax at every step, same stopping rule.
Hypothesis greedy_search(const StepFunction& step, std::size_t max_out_len);

std::vector<double> log_softmax(std::span<const float> logits);

// Model-backed decoding of one sentence; `features` may be null in
// text-only mode.
Hypothesis beam_decode(const Model<float>& model, const std::vector<TokenId>& source,
                       const PatchFeatures* features, const DecodeConfig& cfg);
Hypothesis greedy_decode(const Model<float>& model, const std::vector<TokenId>& source,
                         const PatchFeatures* features, std::size_t max_out_len);

// Decodes every sentence (beam 1 runs batched greedy search).
std::vector<std::vector<TokenId>> translate(const Model<float>& model,
                                            const std::vector<std::vector<TokenId>>& sources,
                                            std::span<const PatchFeatures* const> features,
                                            const DecodeConfig& cfg);

}  // namespace mmt
