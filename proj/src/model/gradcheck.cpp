#include "mmt/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "mmt/model.h"
#include "mmt/ops.h"

namespace mmt {

namespace {

using TensorD = Tensor<double>;

TensorD random_leaf(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  TensorD t(std::move(shape), std::move(v));
  t.set_requires_grad();
  return t;
}

TensorD random_const(Shape shape, std::mt19937_64& rng) {
  TensorD t = random_leaf(std::move(shape), rng);
  t.set_requires_grad(false);
  return t;
}

TensorD weighted_sum(const TensorD& y, const TensorD& w) { return sum(mul(y, w)); }

void op_checks(std::uint64_t seed, double step, std::vector<GradCheckResult>& out,
               double tolerance) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> ext(1, 5);
  const std::size_t m = ext(rng), k = ext(rng) + 1, n = ext(rng);
  auto a = random_leaf({m, k}, rng);
  auto b = random_leaf({k, n}, rng);
  auto c = random_leaf({m, k}, rng);
  auto row = random_leaf({k}, rng);
  auto bias = random_leaf({n}, rng);
  auto probe_mn = random_const({m, n}, rng);
  auto probe_mk = random_const({m, k}, rng);

  auto add_result = [&](const std::string& name, double err) {
    out.push_back({name, seed, err, err < tolerance});
  };
  add_result("op.matmul",
             finite_difference_error([&] { return weighted_sum(matmul(a, b), probe_mn); }, {a, b}, step));
  add_result("op.linear", finite_difference_error(
                              [&] { return weighted_sum(linear(a, b, &bias), probe_mn); }, {a, b, bias}, step));
  add_result("op.add", finite_difference_error([&] { return weighted_sum(add(a, row), probe_mk); }, {a, row}, step));
  add_result("op.sub", finite_difference_error([&] { return weighted_sum(sub(row, c), probe_mk); }, {row, c}, step));
  add_result("op.mul", finite_difference_error([&] { return weighted_sum(mul(a, c), probe_mk); }, {a, c}, step));
  add_result("op.sigmoid", finite_difference_error([&] { return weighted_sum(sigmoid(a), probe_mk); }, {a}, step));
  add_result("op.scale", finite_difference_error([&] { return weighted_sum(scale(a, 1.7), probe_mk); }, {a}, step));
  add_result("op.dropout", finite_difference_error(
                               [&] { return weighted_sum(dropout(a, 0.3, seed, true), probe_mk); }, {a}, step));
  add_result("op.softmax_rows",
             finite_difference_error([&] { return weighted_sum(softmax_rows(a), probe_mk); }, {a}, step));

  auto away = random_leaf({m, k}, rng, 0.1, 1.0);
  for (std::size_t i = 0; i < away.size(); i += 2) away.mutable_data()[i] *= -1;
  add_result("op.relu", finite_difference_error([&] { return weighted_sum(relu(away), probe_mk); }, {away}, step));

  auto gain = random_leaf({k}, rng);
  auto shift = random_leaf({k}, rng);
  add_result("op.layer_norm",
             finite_difference_error([&] { return weighted_sum(layer_norm(a, gain, shift), probe_mk); },
                                     {a, gain, shift}, step));

  std::vector<TokenId> targets(m);
  for (auto& t : targets) t = static_cast<TokenId>(rng() % k);
  targets[0] = -1;
  add_result("op.cross_entropy",
             finite_difference_error([&] { return cross_entropy_label_smoothed(a, targets, 0.1, -1); }, {a}, step));

  std::vector<std::int32_t> ids{0, static_cast<std::int32_t>(m - 1), 0};
  auto probe3 = random_const({3, k}, rng);
  add_result("op.gather_rows",
             finite_difference_error([&] { return weighted_sum(gather_rows(a, ids), probe3); }, {a}, step));

  auto tall = random_leaf({m + 2, k}, rng);
  std::vector<std::size_t> offsets{0, 2, m + 2};
  auto probe2 = random_const({2, k}, rng);
  add_result("op.segment_mean",
             finite_difference_error([&] { return weighted_sum(segment_mean(tall, offsets), probe2); }, {tall}, step));

  auto col = random_leaf({m, 1}, rng);
  add_result("op.broadcast_cols",
             finite_difference_error([&] { return weighted_sum(broadcast_cols(col, k), probe_mk); }, {col}, step));

  const std::size_t len = 3, d = 4;
  auto q = random_leaf({2 * len, d}, rng);
  auto kk = random_leaf({2 * len, d}, rng);
  auto v = random_leaf({2 * len, d}, rng);
  auto probe_att = random_const({2 * len, d}, rng);
  AttentionSpec spec{.batch = 2, .query_len = len, .key_len = len, .heads = 2, .causal = true,
                     .key_valid = {1, 1, 1, 1, 1, 0}};
  add_result("op.attention", finite_difference_error(
                                 [&] { return weighted_sum(attention(q, kk, v, spec), probe_att); }, {q, kk, v}, step));
}

PatchFeatures random_features(const std::string& id, std::uint32_t p, std::uint32_t d, bool cls,
                              std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  PatchFeatures f{.image_id = id, .has_cls = cls, .patches = p, .dim = d, .values = {}};
  f.values.resize(std::size_t(p) * d);
  for (auto& x : f.values) x = dist(rng);
  return f;
}

void model_check(const std::string& name, ModelConfig config, std::uint64_t seed, double step,
                 double tolerance, std::vector<GradCheckResult>& out) {
  std::mt19937_64 rng(seed * 7919 + 17);
  Model<double> model(config, seed);
  auto pick = [&](std::uint32_t vocab) { return static_cast<TokenId>(4 + rng() % (vocab - 4)); };
  const auto sv = config.src_vocab, tv = config.tgt_vocab;
  std::vector<std::vector<TokenId>> src{{pick(sv), pick(sv), pick(sv), pick(sv)}, {pick(sv), pick(sv)}};
  std::vector<std::vector<TokenId>> tgt{{pick(tv), pick(tv), pick(tv)}, {pick(tv), pick(tv), pick(tv), pick(tv)}};
  PatchFeatures f0 = random_features("img0", 3, config.d_img, false, rng);
  PatchFeatures f1 = random_features("img1", 4, config.d_img, true, rng);
  std::vector<const PatchFeatures*> feats{&f0, &f1};
  std::vector<Tensor<double>> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  const double err = finite_difference_error(
      [&] { return model.forward_loss(src, tgt, feats, true, seed); }, params, step);
  out.push_back({name, seed, err, err < tolerance});
}

}  // namespace

double finite_difference_error(const std::function<Tensor<double>()>& loss_fn,
                               std::vector<Tensor<double>> inputs, double step) {
  for (auto& in : inputs) in.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(loss_fn());
  }
  NoTapeScope<double> no_tape;
  double worst = 0.0;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.size(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      double& x = in.mutable_data()[i];
      const double saved = x;
      x = saved + step;
      const double up = loss_fn().item();
      x = saved - step;
      const double down = loss_fn().item();
      x = saved;
      const double numeric = (up - down) / (2 * step);
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), kGradNormFloor});
    worst = std::max(worst, std::sqrt(diff2) / denom);
    in.zero_grad();
  }
  return worst;
}

std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& options) {
  std::vector<GradCheckResult> out;
  ModelConfig micro;
  micro.enc_layers = 2;
  micro.dec_layers = 2;
  micro.d_model = 8;
  micro.d_ffn = 16;
  micro.heads = 2;
  micro.dropout = 0.1;
  micro.label_smoothing = 0.1;
  micro.d_img = 6;
  micro.src_vocab = 12;
  micro.tgt_vocab = 11;
  micro.max_len = 16;

  for (int s = 1; s <= options.seeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    if (options.include_ops) op_checks(seed, options.step, out, options.tolerance);
    if (!options.include_model) continue;
    for (FusionMode mode : {FusionMode::kTextOnly, FusionMode::kGated, FusionMode::kSelectiveAttention}) {
      ModelConfig c = micro;
      c.fusion_mode = mode;
      model_check("model." + to_string(mode), c, seed, options.step, options.tolerance, out);
    }
    ModelConfig raw = micro;
    raw.fusion_mode = FusionMode::kSelectiveAttention;
    raw.raw_qkv = true;
    model_check("model.selective_attention.raw_qkv", raw, seed, options.step, options.tolerance, out);
    ModelConfig scalar_gate = micro;
    scalar_gate.fusion_mode = FusionMode::kGated;
    scalar_gate.gate = GateGranularity::kPerPosition;
    model_check("model.gated.per_position", scalar_gate, seed, options.step, options.tolerance, out);
  }
  return out;
}

}  // namespace mmt
