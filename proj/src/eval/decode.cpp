#include "mmt/decode.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mmt/errors.h"
#include "mmt/vocab.h"

namespace mmt {

void DecodeConfig::validate() const {
  if (beam < 1) throw ConfigError("beam must be at least 1");
  if (max_out_len < 1) throw ConfigError("max_out_len must be at least 1");
}

std::vector<double> log_softmax(std::span<const float> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (float x : logits) z += std::exp(double(x) - m);
  const double lz = m + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = double(logits[i]) - lz;
  return out;
}

Hypothesis beam_search(const StepFunction& step, const DecodeConfig& cfg) {
  cfg.validate();
  struct Live {
    std::vector<TokenId> prefix;  // starts with BOS
    double score;
  };
  std::vector<Live> live{{{kBos}, 0.0}};
  Hypothesis best_finished;
  best_finished.log_prob = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < cfg.max_out_len && !live.empty(); ++t) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.prefix);
    const auto logp = step(prefixes);
    struct Cand {
      double score;
      std::size_t from;
      TokenId token;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (std::size_t v = 0; v < logp[i].size(); ++v) {
        if (TokenId(v) == kPad || TokenId(v) == kBos) continue;
        cands.push_back({live[i].score + logp[i][v], i, TokenId(v)});
      }
    }
    // Highest score first; ties to the earlier hypothesis, then lower id.
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
    std::vector<Live> next;
    for (const auto& c : cands) {
      if (next.size() == std::size_t(cfg.beam)) break;
      if (c.token == kEos) {
        if (c.score > best_finished.log_prob) {
          best_finished.tokens.assign(live[c.from].prefix.begin() + 1, live[c.from].prefix.end());
          best_finished.log_prob = c.score;
          best_finished.finished = true;
        }
        continue;
      }
      auto prefix = live[c.from].prefix;
      prefix.push_back(c.token);
      next.push_back({std::move(prefix), c.score});
    }
    live = std::move(next);
    // Log-probabilities only decrease, so no live prefix can still win.
    if (best_finished.finished &&
        std::all_of(live.begin(), live.end(), [&](const Live& h) { return h.score <= best_finished.log_prob; })) {
      break;
    }
  }
  if (best_finished.finished || live.empty()) return best_finished;
  Hypothesis h;
  const auto& top = live.front();
  h.tokens.assign(top.prefix.begin() + 1, top.prefix.end());
  h.log_prob = top.score;
  return h;
}

Hypothesis greedy_search(const StepFunction& step, std::size_t max_out_len) {
  Hypothesis h;
  std::vector<TokenId> prefix{kBos};
  for (std::size_t t = 0; t < max_out_len; ++t) {
    const auto logp = step({prefix}).front();
    TokenId best = -1;
    for (std::size_t v = 0; v < logp.size(); ++v) {
      if (TokenId(v) == kPad || TokenId(v) == kBos) continue;
      if (best < 0 || logp[v] > logp[std::size_t(best)]) best = TokenId(v);
    }
    h.log_prob += logp[std::size_t(best)];
    if (best == kEos) {
      h.finished = true;
      break;
    }
    prefix.push_back(best);
  }
  h.tokens.assign(prefix.begin() + 1, prefix.end());
  return h;
}

namespace {

StepFunction model_step(const Model<float>& model, const Encoded<float>& enc, std::size_t row) {
  return [&model, &enc, row](const std::vector<std::vector<TokenId>>& prefixes) {
    std::vector<std::size_t> rows(prefixes.size(), row);
    const auto logits = model.decode_step(prefixes, enc, rows);
    std::vector<std::vector<double>> out;
    out.reserve(logits.size());
    for (const auto& l : logits) out.push_back(log_softmax(l));
    return out;
  };
}

Encoded<float> encode_one(const Model<float>& model, const std::vector<TokenId>& source,
                          const PatchFeatures* features) {
  NoTapeScope<float> no_tape;
  DropoutContext drop;
  std::vector<const PatchFeatures*> feats;
  if (features) feats.push_back(features);
  return model.encode(TokenBatch::from({source}), feats, drop);
}

std::size_t out_limit(const Model<float>& model, std::size_t max_out_len) {
  // The decoder input holds BOS plus every generated token but the last.
  return std::min<std::size_t>(max_out_len, model.config().max_len);
}

}  // namespace

Hypothesis beam_decode(const Model<float>& model, const std::vector<TokenId>& source, const PatchFeatures* features,
                       const DecodeConfig& cfg) {
  const auto enc = encode_one(model, source, features);
  DecodeConfig c = cfg;
  c.max_out_len = out_limit(model, cfg.max_out_len);
  return beam_search(model_step(model, enc, 0), c);
}

Hypothesis greedy_decode(const Model<float>& model, const std::vector<TokenId>& source,
                         const PatchFeatures* features, std::size_t max_out_len) {
  const auto enc = encode_one(model, source, features);
  return greedy_search(model_step(model, enc, 0), out_limit(model, max_out_len));
}

std::vector<std::vector<TokenId>> translate(const Model<float>& model,
                                            const std::vector<std::vector<TokenId>>& sources,
                                            std::span<const PatchFeatures* const> features,
                                            const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<TokenId>> out(sources.size());
  if (sources.empty()) return out;
  if (cfg.beam > 1) {
    for (std::size_t i = 0; i < sources.size(); ++i) {
      out[i] = beam_decode(model, sources[i], features.empty() ? nullptr : features[i], cfg).tokens;
    }
    return out;
  }
  // Greedy search, batched over sentences.
  constexpr std::size_t kChunk = 64;
  const std::size_t limit = out_limit(model, cfg.max_out_len);
  for (std::size_t start = 0; start < sources.size(); start += kChunk) {
    const std::size_t end = std::min(sources.size(), start + kChunk);
    std::vector<std::vector<TokenId>> src(sources.begin() + std::ptrdiff_t(start), sources.begin() + std::ptrdiff_t(end));
    std::vector<const PatchFeatures*> feats;
    if (!features.empty()) feats.assign(features.begin() + std::ptrdiff_t(start), features.begin() + std::ptrdiff_t(end));
    NoTapeScope<float> no_tape;
    DropoutContext drop;
    const auto enc = model.encode(TokenBatch::from(src), feats, drop);
    std::vector<std::vector<TokenId>> prefixes(src.size(), std::vector<TokenId>{kBos});
    std::vector<std::size_t> live(src.size());
    std::iota(live.begin(), live.end(), 0);
    for (std::size_t t = 0; t < limit && !live.empty(); ++t) {
      std::vector<std::vector<TokenId>> batch;
      for (std::size_t i : live) batch.push_back(prefixes[i]);
      const auto logits = model.decode_step(batch, enc, live);
      std::vector<std::size_t> still;
      for (std::size_t j = 0; j < live.size(); ++j) {
        const auto& row = logits[j];
        TokenId best = -1;
        for (std::size_t v = 0; v < row.size(); ++v) {
          if (TokenId(v) == kPad || TokenId(v) == kBos) continue;
          if (best < 0 || row[v] > row[std::size_t(best)]) best = TokenId(v);
        }
        if (best == kEos) continue;
        prefixes[live[j]].push_back(best);
        still.push_back(live[j]);
      }
      live = std::move(still);
    }
    for (std::size_t i = 0; i < src.size(); ++i) out[start + i].assign(prefixes[i].begin() + 1, prefixes[i].end());
  }
  return out;
}

}  // namespace mmt
