#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmt/features.h"
#include "mmt/masking.h"
#include "mmt/metrics.h"

namespace mmt {

// A small English-to-German-like caption language: templated sentences over
// characters, colors and four noun categories, with gender and case
// agreement on the target side so restrict and relaxed scoring differ.
struct SyntheticCorpus {
  std::vector<Sentence> source;
  std::vector<Sentence> target;
};

SyntheticCorpus make_synthetic_corpus(std::size_t pairs, std::uint64_t seed);

// Lexicon covering the synthetic language. Noun frequency ranks come from
// `counts_from` (rank 1 = most frequent, ties alphabetical).
MaskLexicon synthetic_lexicon(const std::vector<Sentence>& counts_from);

// Every lexicon word, i.e. everything a masker can hide.
std::vector<std::string> plantable_words(const MaskLexicon& lex);

// Image ids "img<offset+i>" with the masked words of each example planted.
std::vector<PatchFeatures> plant_features(const std::vector<MaskedExample>& examples, const SyntheticSpec& spec,
                                          std::size_t id_offset = 0);

}  // namespace mmt
