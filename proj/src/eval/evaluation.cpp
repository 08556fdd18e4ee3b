#include "mmt/evaluation.h"

#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "mmt/errors.h"

namespace mmt {

namespace {

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<Sentence> decode_words(const Model<float>& model, const ParallelCorpus& test, const Vocab& tgt_vocab,
                                   const DecodeConfig& cfg) {
  test.check();
  const auto rows = all_rows(test.size());
  const auto ids = translate(model, test.sources, test.feature_ptrs(rows), cfg);
  std::vector<Sentence> out;
  out.reserve(ids.size());
  for (const auto& s : ids) out.push_back(tgt_vocab.decode(s));
  return out;
}

EvalReport evaluate_hypotheses(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                               const std::vector<SidecarRecord>* sidecar) {
  EvalReport report;
  report.bleu = bleu(hypotheses, references);
  if (sidecar) {
    add_probing(report, probing_accuracy(hypotheses, references, *sidecar, ProbeCriterion::kRestrict),
                probing_accuracy(hypotheses, references, *sidecar, ProbeCriterion::kRelaxed));
  }
  return report;
}

EvalReport congruence_report(const Model<float>& model, const ParallelCorpus& test,
                             const std::vector<Sentence>& references, const Vocab& tgt_vocab, std::uint64_t seed,
                             const DecodeConfig& cfg, bool allow_text_only) {
  if (model.config().fusion_mode == FusionMode::kTextOnly && !allow_text_only) {
    throw ConfigError("congruence comparison needs a model that reads image features");
  }
  if (!test.has_features()) throw ConfigError("congruence comparison needs image features");
  ParallelCorpus shuffled = test;
  shuffled.features = shuffle_incongruent(test.features, seed);
  EvalReport report;
  report.congruent_bleu = bleu(decode_words(model, test, tgt_vocab, cfg), references);
  report.incongruent_bleu = bleu(decode_words(model, shuffled, tgt_vocab, cfg), references);
  return report;
}

std::vector<std::vector<double>> attention_map(const Model<float>& model, const std::vector<TokenId>& source,
                                               const PatchFeatures& features) {
  if (model.config().fusion_mode != FusionMode::kSelectiveAttention) {
    throw ConfigError("attention maps exist only in selective_attention mode");
  }
  NoTapeScope<float> no_tape;
  DropoutContext drop;
  FusionTrace<float> trace;
  const PatchFeatures* f = &features;
  model.encode(TokenBatch::from({source}), std::span<const PatchFeatures* const>(&f, 1), drop, &trace);
  const std::size_t p = trace.max_patches;
  std::vector<std::vector<double>> out(source.size(), std::vector<double>(p));
  for (std::size_t i = 0; i < source.size(); ++i) {
    for (std::size_t j = 0; j < p; ++j) out[i][j] = trace.attention[i * p + j];
  }
  return out;
}

void dump_attention(const Model<float>& model, const std::vector<TokenId>& source, const PatchFeatures& features,
                    const Vocab& src_vocab, const std::filesystem::path& path) {
  const auto map = attention_map(model, source, features);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "position,token";
  for (std::size_t j = 0; j < features.patches; ++j) out << ",p" << j;
  out << '\n';
  for (std::size_t i = 0; i < map.size(); ++i) {
    out << i << ',' << csv_field(src_vocab.token(source[i]));
    for (double w : map[i]) out << ',' << fmt::format("{:.9g}", w);
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace mmt
