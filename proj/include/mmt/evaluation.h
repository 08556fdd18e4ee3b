#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mmt/corpus.h"
#include "mmt/decode.h"
#include "mmt/metrics.h"
#include "mmt/vocab.h"

namespace mmt {

// Decodes `test` and maps the output ids to target words.
std::vector<Sentence> decode_words(const Model<float>& model, const ParallelCorpus& test, const Vocab& tgt_vocab,
                                   const DecodeConfig& cfg);

// BLEU against `references`, plus restrict/relaxed accuracy when a sidecar
// is given.
EvalReport evaluate_hypotheses(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                               const std::vector<SidecarRecord>* sidecar);

// Decodes with the true features and with shuffle_incongruent(features,
// seed) under one decode config. Text-only models are rejected unless
// `allow_text_only` is set (used to confirm the comparison is neutral).
EvalReport congruence_report(const Model<float>& model, const ParallelCorpus& test,
                             const std::vector<Sentence>& references, const Vocab& tgt_vocab, std::uint64_t seed,
                             const DecodeConfig& cfg, bool allow_text_only = false);

// Selective-attention weights [source tokens x patches] for one sentence.
std::vector<std::vector<double>> attention_map(const Model<float>& model, const std::vector<TokenId>& source,
                                               const PatchFeatures& features);
// Writes attention_map as CSV: header "position,token,p0,...", one row per
// source token.
void dump_attention(const Model<float>& model, const std::vector<TokenId>& source, const PatchFeatures& features,
                    const Vocab& src_vocab, const std::filesystem::path& path);

}  // namespace mmt
