#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmt/corpus.h"
#include "mmt/model.h"

namespace mmt {

struct Schedule {
  double peak_lr = 5e-3;
  double floor_lr = 1e-7;
  std::int64_t warmup = 2000;
};

// Linear warmup from floor to peak, then inverse-square-root decay.
double lr_schedule(std::int64_t step, const Schedule& s = {});

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// Adam with bias correction over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<Tensor<float>> params, AdamConfig cfg = {});
  // Applies one update from the parameters' current gradients, then clears
  // them. Parameters without a gradient are left as they are.
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor<float>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t t_ = 0;
};

// Groups corpus rows into batches of at most `max_tokens` source plus
// target tokens (EOS counted), in a seeded random order. A single pair over
// the budget forms its own batch.
std::vector<std::vector<std::size_t>> token_batches(const ParallelCorpus& corpus, std::size_t max_tokens,
                                                    std::uint64_t seed);

struct TrainConfig {
  std::int64_t max_steps = 2000;
  std::size_t batch_tokens = 4096;
  Schedule schedule;
  AdamConfig adam;
  std::int64_t validate_every = 200;
  int patience = 10;                 // validations without BLEU gain
  std::size_t val_decode_len = 64;   // greedy decoding limit at validation
  double stop_accuracy = 0.0;        // stop once validation token accuracy exceeds this (0 = off)
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> log_path;  // TSV: step, lr, loss, val_bleu
};

struct Validation {
  std::int64_t step = 0;
  double loss = 0.0;
  double bleu = 0.0;
  double token_accuracy = 0.0;
};

struct TrainResult {
  std::vector<double> losses;  // per step
  std::vector<Validation> validations;
  std::vector<std::filesystem::path> checkpoints;
  std::int64_t steps = 0;
  bool early_stopped = false;
};

// Trains `model` in place. `validation` may be empty (then no validation,
// early stopping or checkpoints). Throws DivergenceError on a non-finite
// loss.
TrainResult train(Model<float>& model, const ParallelCorpus& corpus, const ParallelCorpus& validation,
                  const TrainConfig& cfg);

// Teacher-forced loss and token accuracy without dropout, in batches.
struct CorpusLoss {
  double loss = 0.0;
  double token_accuracy = 0.0;
};
CorpusLoss evaluate_loss(const Model<float>& model, const ParallelCorpus& corpus, std::size_t batch_tokens = 4096);

}  // namespace mmt
