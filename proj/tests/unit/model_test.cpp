#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmt/errors.h"
#include "mmt/model.h"
#include "mmt/vocab.h"

using namespace mmt;

namespace {

using TensorD = Tensor<double>;

ModelConfig micro(FusionMode mode = FusionMode::kTextOnly) {
  ModelConfig c;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.heads = 2;
  c.dropout = 0.1;
  c.fusion_mode = mode;
  c.d_img = 6;
  c.src_vocab = 12;
  c.tgt_vocab = 11;
  c.max_len = 16;
  return c;
}

TensorD random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1, 1);
  std::vector<double> v(r * c);
  for (auto& x : v) x = dist(rng);
  return TensorD({r, c}, std::move(v));
}

PatchFeatures random_features(const std::string& id, std::uint32_t p, std::uint32_t d, std::mt19937_64& rng,
                              bool cls = false) {
  std::uniform_real_distribution<float> dist(-1, 1);
  PatchFeatures f{.image_id = id, .has_cls = cls, .patches = p, .dim = d, .values = {}};
  f.values.resize(std::size_t(p) * d);
  for (auto& x : f.values) x = dist(rng);
  return f;
}

std::vector<double> row_of(const TensorD& t, std::size_t i) {
  return {t.data().begin() + std::ptrdiff_t(i * t.cols()), t.data().begin() + std::ptrdiff_t((i + 1) * t.cols())};
}

}  // namespace

TEST(ModelConfig, HeadsMustDivideWidth) {
  ModelConfig c = micro();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = micro();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EncodeText, SingleTokenShapeUnderDefaultConfig) {
  ModelConfig c;
  c.src_vocab = 20;
  c.tgt_vocab = 20;
  Model<float> model(c, 1);
  DropoutContext drop;
  auto h = model.encode_text(TokenBatch::from({{5}}), drop);
  EXPECT_EQ(h.shape(), (Shape{1, 128}));
}

TEST(EncodeText, PositionsBreakPermutationSymmetry) {
  Model<double> model(micro(), 3);
  DropoutContext drop;
  auto ab = model.encode_text(TokenBatch::from({{5, 7}}), drop);
  auto ba = model.encode_text(TokenBatch::from({{7, 5}}), drop);
  // Without positions, token 5's row would be identical in both orders.
  const auto a_first = row_of(ab, 0), a_second = row_of(ba, 1);
  double diff = 0;
  for (std::size_t j = 0; j < a_first.size(); ++j) diff += std::abs(a_first[j] - a_second[j]);
  EXPECT_GT(diff, 1e-3);
}

TEST(EncodeText, OverLengthInputIsLengthError) {
  Model<double> model(micro(), 3);
  DropoutContext drop;
  std::vector<TokenId> tokens(17, 5);
  EXPECT_THROW(model.encode_text(TokenBatch::from({tokens}), drop), LengthError);
}

TEST(EncodeText, ZeroSublayersLeaveScaledEmbeddingPlusPosition) {
  const ModelConfig c = micro();
  auto params = zero_params<double>(c);
  std::mt19937_64 rng(9);
  params.src_embed = random_matrix(c.src_vocab, c.d_model, rng);
  for (auto* g : {&params.enc_ln_g, &params.dec_ln_g}) std::fill(g->mutable_data().begin(), g->mutable_data().end(), 1.0);
  for (auto& l : params.encoder) {
    std::fill(l.ln1_g.mutable_data().begin(), l.ln1_g.mutable_data().end(), 1.0);
    std::fill(l.ln2_g.mutable_data().begin(), l.ln2_g.mutable_data().end(), 1.0);
  }
  Model<double> model(c, params);
  DropoutContext drop;
  const std::vector<TokenId> tokens{4, 9, 6};
  auto h = model.encode_text(TokenBatch::from({tokens}), drop);

  // Hand trace: every residual branch adds zero, so only the final
  // normalization of emb * sqrt(d) + pos remains.
  const std::size_t d = c.d_model;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    std::vector<double> x(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double angle = double(t) / std::pow(10000.0, double(j - j % 2) / double(d));
      const double pos = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
      x[j] = params.src_embed.at(std::size_t(tokens[t]), j) * std::sqrt(double(d)) + pos;
    }
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / double(d);
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= double(d);
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_NEAR(h.at(t, j), (x[j] - mean) / std::sqrt(var + 1e-5), 1e-12);
    }
  }
}

TEST(ProjectImage, IdentityLeavesInput) {
  std::mt19937_64 rng(1);
  auto raw = random_matrix(5, 4, rng);
  TensorD eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 4 + i] = 1.0;
  EXPECT_EQ(project_image(raw, eye).values(), raw.values());
}

TEST(ProjectImage, SinglePatchShape) {
  std::mt19937_64 rng(2);
  EXPECT_EQ(project_image(random_matrix(1, 6, rng), random_matrix(6, 8, rng)).shape(), (Shape{1, 8}));
}

TEST(ProjectImage, RowsMatchDirectProducts) {
  std::mt19937_64 rng(3);
  auto raw = random_matrix(7, 5, rng);
  auto w = random_matrix(5, 3, rng);
  auto out = project_image(raw, w);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += raw.at(i, k) * w.at(k, j);
      EXPECT_NEAR(out.at(i, j), s, 1e-12);
    }
  }
}

TEST(ProjectImage, DimensionMismatchNamesBothSizes) {
  std::mt19937_64 rng(4);
  try {
    project_image(random_matrix(2, 5, rng), random_matrix(6, 8, rng));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('5'), std::string::npos) << msg;
    EXPECT_NE(msg.find('6'), std::string::npos) << msg;
  }
}

TEST(GatedFuse, ZeroGateWeightsAverageInputs) {
  std::mt19937_64 rng(5);
  auto text = random_matrix(3, 4, rng), ctx = random_matrix(3, 4, rng);
  TensorD zero({4, 4}, 0.0);
  TensorD gate;
  auto out = gated_fuse(text, ctx, zero, zero, &gate);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_DOUBLE_EQ(gate.data()[i], 0.5);
    EXPECT_NEAR(out.data()[i], (text.data()[i] + ctx.data()[i]) / 2, 1e-15);
  }
}

TEST(GatedFuse, EqualInputsPassThrough) {
  std::mt19937_64 rng(6);
  auto text = random_matrix(3, 4, rng);
  auto out = gated_fuse(text, text, random_matrix(4, 4, rng), random_matrix(4, 4, rng));
  EXPECT_EQ(out.values(), text.values());
}

TEST(GatedFuse, OutputStaysBetweenInputsAndGateIsOpen) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto text = random_matrix(4, 6, rng), ctx = random_matrix(4, 6, rng);
    TensorD gate;
    auto out = gated_fuse(text, ctx, random_matrix(6, 6, rng), random_matrix(6, 6, rng), &gate);
    for (std::size_t i = 0; i < out.size(); ++i) {
      EXPECT_GT(gate.data()[i], 0.0);
      EXPECT_LT(gate.data()[i], 1.0);
      EXPECT_GE(out.data()[i], std::min(text.data()[i], ctx.data()[i]) - 1e-15);
      EXPECT_LE(out.data()[i], std::max(text.data()[i], ctx.data()[i]) + 1e-15);
    }
  }
}

TEST(GatedFuse, PerPositionGateIsConstantAcrossChannels) {
  std::mt19937_64 rng(8);
  auto text = random_matrix(3, 4, rng), ctx = random_matrix(3, 4, rng);
  TensorD gate;
  gated_fuse(text, ctx, random_matrix(4, 1, rng), random_matrix(4, 1, rng), &gate);
  ASSERT_EQ(gate.shape(), (Shape{3, 4}));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 1; j < 4; ++j) EXPECT_EQ(gate.at(i, j), gate.at(i, 0));
  }
}

TEST(GatedFuse, ShapeMismatchIsDimensionError) {
  std::mt19937_64 rng(9);
  EXPECT_THROW(gated_fuse(random_matrix(3, 4, rng), random_matrix(2, 4, rng), random_matrix(4, 4, rng),
                          random_matrix(4, 4, rng)),
               DimensionError);
}

TEST(PoolImage, SinglePatchIsRepeated) {
  TensorD image({1, 3}, {1, 2, 3});
  auto out = pool_image_for_gate(image, false, 4);
  ASSERT_EQ(out.shape(), (Shape{4, 3}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(row_of(out, i), (std::vector<double>{1, 2, 3}));
}

TEST(PoolImage, ClsRowWinsOverOtherRows) {
  TensorD image({3, 2}, {9, 8, 100, -100, 5, 5});
  auto out = pool_image_for_gate(image, true, 2);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(row_of(out, i), (std::vector<double>{9, 8}));
}

TEST(PoolImage, MeanWithoutCls) {
  TensorD image({3, 2}, {1, 1, 2, 2, 3, 3});
  EXPECT_EQ(pool_image_for_gate(image, false, 2).values(), (std::vector<double>{2, 2, 2, 2}));
}

TEST(PoolImage, NoRowsIsEmptyFeatureError) {
  Model<double> model(micro(FusionMode::kGated), 1);
  PatchFeatures empty{.image_id = "e", .has_cls = false, .patches = 0, .dim = 6, .values = {}};
  const PatchFeatures* feats[] = {&empty};
  EXPECT_THROW(model.forward_loss({{4, 5}}, {{6}}, feats, false), EmptyFeatureError);
}

TEST(SelectiveAttention, SinglePatchGetsAllWeight) {
  std::mt19937_64 rng(10);
  auto text = random_matrix(3, 4, rng), image = random_matrix(1, 4, rng);
  auto wv = random_matrix(4, 4, rng);
  auto wq = random_matrix(4, 4, rng), wk = random_matrix(4, 4, rng);
  auto out = selective_attention(text, image, &wq, &wk, &wv);
  auto value = matmul(image, wv);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), value.at(0, j), 1e-15);
  }
}

TEST(SelectiveAttention, IdenticalPatchesIgnoreText) {
  std::mt19937_64 rng(11);
  auto row = random_matrix(1, 4, rng);
  std::vector<double> rows;
  for (int i = 0; i < 5; ++i) rows.insert(rows.end(), row.data().begin(), row.data().end());
  TensorD image({5, 4}, rows);
  std::vector<double> weights;
  auto out = selective_attention<double>(random_matrix(3, 4, rng), image, nullptr, nullptr, nullptr, &weights);
  for (double w : weights) EXPECT_NEAR(w, 0.2, 1e-15);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), row.at(0, j), 1e-14);
  }
}

TEST(SelectiveAttention, TwoPatchHandComputation) {
  TensorD text({1, 2}, {1.0, 0.5});
  TensorD image({2, 2}, {2.0, 0.0, -1.0, 3.0});
  TensorD eye({2, 2}, {1, 0, 0, 1});
  auto out = selective_attention(text, image, &eye, &eye, &eye);
  // Scores q.k / sqrt(2): (2.0) / 1.41421..., (-1 + 1.5) / 1.41421...
  const double s1 = 2.0 / std::sqrt(2.0), s2 = 0.5 / std::sqrt(2.0);
  const double w1 = 1.0 / (1.0 + std::exp(s2 - s1)), w2 = 1.0 - w1;
  EXPECT_NEAR(out.at(0, 0), w1 * 2.0 + w2 * -1.0, 1e-10);
  EXPECT_NEAR(out.at(0, 1), w1 * 0.0 + w2 * 3.0, 1e-10);
}

TEST(SelectiveAttention, RowsStayInsideValueEnvelope) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    auto text = random_matrix(4, 5, rng), image = random_matrix(6, 5, rng);
    auto wv = random_matrix(5, 5, rng);
    auto out = selective_attention<double>(text, image, nullptr, nullptr, &wv);
    auto value = matmul(image, wv);
    for (std::size_t j = 0; j < 5; ++j) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t r = 0; r < 6; ++r) {
        lo = std::min(lo, value.at(r, j));
        hi = std::max(hi, value.at(r, j));
      }
      for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_GE(out.at(i, j), lo - 1e-12);
        EXPECT_LE(out.at(i, j), hi + 1e-12);
      }
    }
  }
}

TEST(SelectiveAttention, NoPatchesIsEmptyFeatureError) {
  Model<double> model(micro(FusionMode::kSelectiveAttention), 1);
  PatchFeatures empty{.image_id = "e", .has_cls = false, .patches = 0, .dim = 6, .values = {}};
  const PatchFeatures* feats[] = {&empty};
  EXPECT_THROW(model.forward_loss({{4, 5}}, {{6}}, feats, false), EmptyFeatureError);
}

TEST(Parameters, CountIsAPureFunctionOfConfig) {
  for (FusionMode mode : {FusionMode::kTextOnly, FusionMode::kGated, FusionMode::kSelectiveAttention}) {
    const ModelConfig c = micro(mode);
    Model<float> a(c, 1), b(c, 2);
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      EXPECT_EQ(a.parameters()[i].name, b.parameters()[i].name);
      EXPECT_EQ(a.parameters()[i].tensor.shape(), b.parameters()[i].tensor.shape());
    }
    EXPECT_EQ(a.parameter_count(), parameter_count(c));
  }
}

TEST(Parameters, DefaultTextOnlyCount) {
  ModelConfig c;
  c.src_vocab = 100;
  c.tgt_vocab = 100;
  // Embeddings, four encoder layers, four decoder layers, two final norms,
  // output projection.
  const std::size_t d = 128, ff = 256, attn = 4 * (d * d + d), ffn = d * ff + ff + ff * d + d, ln = 2 * d;
  const std::size_t expected = 2 * 100 * d + 4 * (2 * ln + attn + ffn) + 4 * (3 * ln + 2 * attn + ffn) + 2 * ln +
                               d * 100 + 100;
  EXPECT_EQ(parameter_count(c), expected);
}

TEST(Parameters, FusionModesAddTheirMatrices) {
  const auto base = parameter_count(micro());
  const std::size_t d = 8, di = 6;
  EXPECT_EQ(parameter_count(micro(FusionMode::kGated)), base + di * d + 2 * d * d);
  EXPECT_EQ(parameter_count(micro(FusionMode::kSelectiveAttention)), base + di * d + 5 * d * d);
  ModelConfig raw = micro(FusionMode::kSelectiveAttention);
  raw.raw_qkv = true;
  EXPECT_EQ(parameter_count(raw), base + di * d + 2 * d * d);
}

TEST(Parameters, MismatchedShapesAreCheckpointError) {
  auto params = zero_params<float>(micro());
  params.out_b = Tensor<float>({3}, 0.0f);
  EXPECT_THROW(Model<float>(micro(), params), CheckpointError);
}

TEST(DecodeStep, LogitsCoverTargetVocabulary) {
  Model<float> model(micro(), 4);
  DropoutContext drop;
  auto enc = model.encode(TokenBatch::from({{4, 5, 6}}), {}, drop);
  const std::size_t row = 0;
  auto logits = model.decode_step({{kBos, 7}}, enc, std::span<const std::size_t>(&row, 1));
  ASSERT_EQ(logits.size(), 1u);
  EXPECT_EQ(logits[0].size(), 11u);
}

TEST(DecodeStep, PrefixContracts) {
  Model<float> model(micro(), 4);
  DropoutContext drop;
  auto enc = model.encode(TokenBatch::from({{4, 5, 6}}), {}, drop);
  const std::size_t row = 0;
  EXPECT_THROW(model.decode_step({{7, 7}}, enc, std::span<const std::size_t>(&row, 1)), ContractError);
  std::vector<TokenId> long_prefix(17, 5);
  long_prefix[0] = kBos;
  EXPECT_THROW(model.decode_step({long_prefix}, enc, std::span<const std::size_t>(&row, 1)), LengthError);
}

TEST(DecodeStep, FuturePositionsDoNotLeakBackwards) {
  Model<double> model(micro(), 5);
  DropoutContext drop;
  auto enc = model.encode(TokenBatch::from({{4, 5, 6}}), {}, drop);
  auto a = model.decode(TokenBatch::from({{kBos, 4, 5, 6, 7}}), enc, drop);
  auto b = model.decode(TokenBatch::from({{kBos, 4, 5, 9, 10}}), enc, drop);
  const std::size_t v = 11;
  for (std::size_t i = 0; i < 3 * v; ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
  double diff = 0;
  for (std::size_t i = 3 * v; i < 5 * v; ++i) diff += std::abs(a.data()[i] - b.data()[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(DecodeStep, StepwiseLossMatchesTeacherForcedLoss) {
  ModelConfig c = micro();
  c.label_smoothing = 0.1;
  Model<double> model(c, 6);
  const std::vector<std::vector<TokenId>> src{{4, 5, 6, 7}, {8, 9}};
  const std::vector<std::vector<TokenId>> tgt{{5, 6, 7}, {8, 9, 10, 4}};
  const double expected = model.forward_loss(src, tgt, {}, false).item();

  DropoutContext drop;
  auto enc = model.encode(TokenBatch::from(src), {}, drop);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < src.size(); ++b) {
    const auto in = with_bos(tgt[b]);
    const auto out = with_eos(tgt[b]);
    for (std::size_t t = 0; t < out.size(); ++t) {
      std::vector<TokenId> prefix(in.begin(), in.begin() + std::ptrdiff_t(t + 1));
      auto logits = model.decode_step({prefix}, enc, std::span<const std::size_t>(&b, 1))[0];
      double z = 0;
      for (double l : logits) z += std::exp(l);
      double nll = 0;
      for (std::size_t k = 0; k < logits.size(); ++k) {
        const double w = TokenId(k) == out[t] ? 0.9 : 0.1 / double(logits.size() - 1);
        nll -= w * (logits[k] - std::log(z));
      }
      total += nll;
      ++count;
    }
  }
  EXPECT_NEAR(total / double(count), expected, 1e-10);
}

TEST(ForwardLoss, UntrainedLossIsNearUniform) {
  ModelConfig c;
  c.src_vocab = 100;
  c.tgt_vocab = 100;
  Model<float> model(c, 7);
  std::mt19937_64 rng(7);
  std::vector<std::vector<TokenId>> src, tgt;
  for (int i = 0; i < 8; ++i) {
    std::vector<TokenId> s, t;
    for (int j = 0; j < 9; ++j) {
      s.push_back(TokenId(4 + rng() % 96));
      t.push_back(TokenId(4 + rng() % 96));
    }
    src.push_back(s);
    tgt.push_back(t);
  }
  EXPECT_NEAR(model.forward_loss(src, tgt, {}, false).item(), std::log(100.0), 0.2);
}

TEST(ForwardLoss, TextOnlyIgnoresFeatures) {
  Model<double> model(micro(), 8);
  std::mt19937_64 rng(8);
  auto f1 = random_features("a", 3, 6, rng), f2 = random_features("b", 5, 6, rng);
  const PatchFeatures* one[] = {&f1};
  const PatchFeatures* two[] = {&f2};
  const std::vector<std::vector<TokenId>> src{{4, 5}}, tgt{{6, 7}};
  const double none = model.forward_loss(src, tgt, {}, false).item();
  EXPECT_EQ(model.forward_loss(src, tgt, one, false).item(), none);
  EXPECT_EQ(model.forward_loss(src, tgt, two, false).item(), none);
}

TEST(ForwardLoss, FusionModesNeedFeatures) {
  Model<double> model(micro(FusionMode::kGated), 9);
  EXPECT_THROW(model.forward_loss({{4, 5}}, {{6}}, {}, false), ConfigError);
  std::mt19937_64 rng(9);
  auto wrong = random_features("w", 3, 5, rng);
  const PatchFeatures* feats[] = {&wrong};
  EXPECT_THROW(model.forward_loss({{4, 5}}, {{6}}, feats, false), DimensionError);
}

TEST(ForwardLoss, ImageParametersReceiveGradient) {
  for (FusionMode mode : {FusionMode::kGated, FusionMode::kSelectiveAttention}) {
    Model<double> model(micro(mode), 10);
    std::mt19937_64 rng(10);
    // Features that encode the target token in one patch.
    std::vector<PatchFeatures> feats;
    std::vector<std::vector<TokenId>> src, tgt;
    for (int i = 0; i < 4; ++i) {
      const TokenId word = TokenId(4 + i);
      auto f = random_features("img" + std::to_string(i), 4, 6, rng);
      f.values[std::size_t(i % 4) * 6 + std::size_t(i)] += 3.0f;
      feats.push_back(f);
      src.push_back({4, 5});
      tgt.push_back({word});
    }
    std::vector<const PatchFeatures*> ptrs;
    for (const auto& f : feats) ptrs.push_back(&f);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(model.forward_loss(src, tgt, ptrs, false));
    const auto& fp = model.params().fusion;
    for (const auto* t : {&fp.project, &fp.gate_text, &fp.gate_image}) {
      ASSERT_TRUE(t->has_grad());
      double norm = 0;
      for (double g : t->grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << to_string(mode);
    }
  }
}

TEST(Invariants, PatchOrderDoesNotMatterForSelectiveAttention) {
  Model<double> model(micro(FusionMode::kSelectiveAttention), 11);
  std::mt19937_64 rng(11);
  auto f = random_features("img", 5, 6, rng, true);
  PatchFeatures permuted = f;
  const std::size_t order[] = {3, 0, 4, 2, 1};
  for (std::size_t i = 0; i < 5; ++i) {
    std::copy_n(f.values.begin() + std::ptrdiff_t(order[i] * 6), 6, permuted.values.begin() + std::ptrdiff_t(i * 6));
  }
  const PatchFeatures* a[] = {&f};
  const PatchFeatures* b[] = {&permuted};
  const std::vector<std::vector<TokenId>> src{{4, 5, 6}}, tgt{{7, 8}};
  EXPECT_NEAR(model.forward_loss(src, tgt, a, false).item(), model.forward_loss(src, tgt, b, false).item(), 1e-6);
}

TEST(Invariants, TracedGateAndAttentionAreWellFormed) {
  Model<double> model(micro(FusionMode::kSelectiveAttention), 12);
  std::mt19937_64 rng(12);
  auto f1 = random_features("a", 4, 6, rng), f2 = random_features("b", 2, 6, rng);
  const PatchFeatures* feats[] = {&f1, &f2};
  DropoutContext drop;
  FusionTrace<double> trace;
  model.encode(TokenBatch::from({{4, 5, 6}, {7}}), feats, drop, &trace);
  ASSERT_EQ(trace.max_patches, 4u);
  for (std::size_t row = 0; row < 6; ++row) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += trace.attention[row * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  // The second image has two patches; its padding columns get no weight.
  for (std::size_t row = 3; row < 6; ++row) {
    EXPECT_EQ(trace.attention[row * 4 + 2], 0.0);
    EXPECT_EQ(trace.attention[row * 4 + 3], 0.0);
  }
  for (double g : trace.gate.data()) {
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
}

TEST(Determinism, SameSeedSameOutputs) {
  Model<float> a(micro(FusionMode::kGated), 13), b(micro(FusionMode::kGated), 13);
  std::mt19937_64 rng(13);
  auto f = random_features("a", 3, 6, rng);
  const PatchFeatures* feats[] = {&f};
  EXPECT_EQ(a.forward_loss({{4, 5}}, {{6, 7}}, feats, true, 99).item(),
            b.forward_loss({{4, 5}}, {{6, 7}}, feats, true, 99).item());
}
