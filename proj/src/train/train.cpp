#include "mmt/train.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "mmt/checkpoint.h"
#include "mmt/decode.h"
#include "mmt/errors.h"
#include "mmt/metrics.h"

namespace mmt {

double lr_schedule(std::int64_t step, const Schedule& s) {
  if (step < 0) throw ContractError("learning-rate step must be non-negative");
  if (step <= s.warmup) {
    if (s.warmup == 0) return s.peak_lr;
    return s.floor_lr + (s.peak_lr - s.floor_lr) * double(step) / double(s.warmup);
  }
  return s.peak_lr * std::sqrt(double(s.warmup) / double(step));
}

Adam::Adam(std::vector<Tensor<float>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  const float b1 = float(cfg_.beta1), b2 = float(cfg_.beta2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1 - b1) * g[j];
      v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= float(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
    p.zero_grad();
  }
}

std::vector<std::vector<std::size_t>> token_batches(const ParallelCorpus& corpus, std::size_t max_tokens,
                                                    std::uint64_t seed) {
  if (max_tokens == 0) throw ConfigError("batch token budget must be positive");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t tokens = 0;
  for (std::size_t i : order) {
    const std::size_t n = corpus.sources[i].size() + corpus.targets[i].size() + 1;
    if (!cur.empty() && tokens + n > max_tokens) {
      batches.push_back(std::move(cur));
      cur.clear();
      tokens = 0;
    }
    cur.push_back(i);
    tokens += n;
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

CorpusLoss evaluate_loss(const Model<float>& model, const ParallelCorpus& corpus, std::size_t batch_tokens) {
  NoTapeScope<float> no_tape;
  double loss_sum = 0, acc_sum = 0, weight = 0;
  for (const auto& rows : token_batches(corpus, batch_tokens, 0)) {
    const auto sub = corpus.select(rows);
    const auto feats = corpus.feature_ptrs(rows);
    double n = 0;
    for (const auto& t : sub.targets) n += double(t.size() + 1);
    loss_sum += n * model.forward_loss(sub.sources, sub.targets, feats, false).item();
    acc_sum += n * model.token_accuracy(sub.sources, sub.targets, feats);
    weight += n;
  }
  if (weight == 0) return {};
  return {loss_sum / weight, acc_sum / weight};
}

namespace {

std::vector<Sentence> as_strings(const std::vector<std::vector<TokenId>>& ids) {
  std::vector<Sentence> out;
  for (const auto& s : ids) {
    Sentence w;
    for (TokenId t : s) w.push_back(std::to_string(t));
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace

TrainResult train(Model<float>& model, const ParallelCorpus& corpus, const ParallelCorpus& validation,
                  const TrainConfig& cfg) {
  corpus.check();
  validation.check();
  if (corpus.size() == 0) throw ContractError("training corpus is empty");
  if (cfg.validate_every <= 0) throw ConfigError("validate_every must be positive");
  std::vector<Tensor<float>> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  Adam adam(params, cfg.adam);
  std::ofstream log;
  if (cfg.log_path) {
    log.open(*cfg.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open training log '" + cfg.log_path->string() + "'");
    log << "step\tlr\tloss\tval_bleu\n";
  }
  if (cfg.checkpoint_dir) std::filesystem::create_directories(*cfg.checkpoint_dir);

  std::vector<std::size_t> val_rows(validation.size());
  std::iota(val_rows.begin(), val_rows.end(), 0);
  const auto val_feats = validation.feature_ptrs(val_rows);

  TrainResult result;
  double best_bleu = -1;
  int stale = 0;
  std::uint64_t epoch = 0;
  std::vector<std::vector<std::size_t>> batches;
  std::size_t next_batch = 0;
  for (std::int64_t step = 1; step <= cfg.max_steps; ++step) {
    if (next_batch == batches.size()) {
      batches = token_batches(corpus, cfg.batch_tokens, cfg.seed * 1000003 + epoch++);
      next_batch = 0;
    }
    const auto& rows = batches[next_batch++];
    const auto sub = corpus.select(rows);
    const auto feats = corpus.feature_ptrs(rows);
    double loss_value = 0;
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      Tensor<float> loss = model.forward_loss(sub.sources, sub.targets, feats, true,
                                              cfg.seed * 0x9E3779B97F4A7C15ULL + std::uint64_t(step));
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw DivergenceError("training loss became " + fmt::format("{}", loss_value) + " at step " +
                                  std::to_string(step),
                              step);
      }
      tape.backward(loss);
    }
    const double lr = lr_schedule(step, cfg.schedule);
    adam.step(lr);
    result.losses.push_back(loss_value);
    result.steps = step;

    std::string val_bleu;
    if (validation.size() > 0 && step % cfg.validate_every == 0) {
      Validation v{.step = step};
      const auto cl = evaluate_loss(model, validation, cfg.batch_tokens);
      v.loss = cl.loss;
      v.token_accuracy = cl.token_accuracy;
      DecodeConfig greedy{.beam = 1, .max_out_len = cfg.val_decode_len};
      const auto hyps = translate(model, validation.sources, val_feats, greedy);
      v.bleu = bleu(as_strings(hyps), as_strings(validation.targets));
      result.validations.push_back(v);
      val_bleu = fmt::format("{:.4f}", v.bleu);
      if (cfg.checkpoint_dir) {
        const auto path = *cfg.checkpoint_dir / fmt::format("step{:07d}.mmtc", step);
        save_checkpoint(model, path);
        result.checkpoints.push_back(path);
      }
      if (v.bleu > best_bleu) {
        best_bleu = v.bleu;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        result.early_stopped = true;
      }
      if (cfg.stop_accuracy > 0 && v.token_accuracy > cfg.stop_accuracy) result.early_stopped = true;
    }
    if (log.is_open()) {
      log << step << '\t' << fmt::format("{:.9g}", lr) << '\t' << fmt::format("{:.9g}", loss_value) << '\t'
          << val_bleu << '\n';
    }
    if (result.early_stopped) break;
  }
  return result;
}

}  // namespace mmt
