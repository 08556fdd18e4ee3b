#include "mmt/model.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "mmt/errors.h"
#include "mmt/vocab.h"

namespace mmt {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kTextOnly: return "text_only";
    case FusionMode::kGated: return "gated";
    case FusionMode::kSelectiveAttention: return "selective_attention";
  }
  return "?";
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "text_only") return FusionMode::kTextOnly;
  if (s == "gated") return FusionMode::kGated;
  if (s == "selective_attention") return FusionMode::kSelectiveAttention;
  throw ConfigError("unknown fusion mode '" + s + "' (text_only, gated, selective_attention)");
}

void ModelConfig::validate() const {
  if (enc_layers == 0 || dec_layers == 0) throw ConfigError("model needs at least one layer");
  if (d_model == 0 || d_ffn == 0 || heads == 0) throw ConfigError("model dimensions must be positive");
  if (d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ConfigError("label_smoothing must lie in [0,1)");
  }
  if (src_vocab < 5 || tgt_vocab < 5) throw ConfigError("vocabularies must include the special tokens");
  if (max_len == 0) throw ConfigError("max_len must be positive");
  if (fusion_mode != FusionMode::kTextOnly && d_img == 0) throw ConfigError("d_img must be positive");
}

namespace {

// Calls f(name, tensor&, shape) for every parameter present under `c`, in
// checkpoint order.
template <typename T, typename P, typename F>
void visit_params(P& p, const ModelConfig& c, F&& f) {
  const std::size_t d = c.d_model, ff = c.d_ffn;
  auto attn = [&](const std::string& pre, auto& a) {
    f(pre + ".wq", a.wq, Shape{d, d});
    f(pre + ".bq", a.bq, Shape{d});
    f(pre + ".wk", a.wk, Shape{d, d});
    f(pre + ".bk", a.bk, Shape{d});
    f(pre + ".wv", a.wv, Shape{d, d});
    f(pre + ".bv", a.bv, Shape{d});
    f(pre + ".wo", a.wo, Shape{d, d});
    f(pre + ".bo", a.bo, Shape{d});
  };
  auto ffn = [&](const std::string& pre, auto& n) {
    f(pre + ".w1", n.w1, Shape{d, ff});
    f(pre + ".b1", n.b1, Shape{ff});
    f(pre + ".w2", n.w2, Shape{ff, d});
    f(pre + ".b2", n.b2, Shape{d});
  };
  f("src_embed", p.src_embed, Shape{c.src_vocab, d});
  f("tgt_embed", p.tgt_embed, Shape{c.tgt_vocab, d});
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    auto& l = p.encoder[i];
    const std::string pre = "enc." + std::to_string(i);
    f(pre + ".ln1.g", l.ln1_g, Shape{d});
    f(pre + ".ln1.b", l.ln1_b, Shape{d});
    attn(pre + ".self", l.self_attn);
    f(pre + ".ln2.g", l.ln2_g, Shape{d});
    f(pre + ".ln2.b", l.ln2_b, Shape{d});
    ffn(pre + ".ffn", l.ffn);
  }
  f("enc.ln.g", p.enc_ln_g, Shape{d});
  f("enc.ln.b", p.enc_ln_b, Shape{d});
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    auto& l = p.decoder[i];
    const std::string pre = "dec." + std::to_string(i);
    f(pre + ".ln1.g", l.ln1_g, Shape{d});
    f(pre + ".ln1.b", l.ln1_b, Shape{d});
    attn(pre + ".self", l.self_attn);
    f(pre + ".ln2.g", l.ln2_g, Shape{d});
    f(pre + ".ln2.b", l.ln2_b, Shape{d});
    attn(pre + ".cross", l.cross_attn);
    f(pre + ".ln3.g", l.ln3_g, Shape{d});
    f(pre + ".ln3.b", l.ln3_b, Shape{d});
    ffn(pre + ".ffn", l.ffn);
  }
  f("dec.ln.g", p.dec_ln_g, Shape{d});
  f("dec.ln.b", p.dec_ln_b, Shape{d});
  f("out.w", p.out_w, Shape{d, c.tgt_vocab});
  f("out.b", p.out_b, Shape{c.tgt_vocab});
  if (c.fusion_mode != FusionMode::kTextOnly) {
    const std::size_t gate_cols = c.gate == GateGranularity::kPerChannel ? d : 1;
    f("fusion.project", p.fusion.project, Shape{c.d_img, d});
    f("fusion.gate_text", p.fusion.gate_text, Shape{d, gate_cols});
    f("fusion.gate_image", p.fusion.gate_image, Shape{d, gate_cols});
    if (c.fusion_mode == FusionMode::kSelectiveAttention && !c.raw_qkv) {
      f("fusion.sel_q", p.fusion.sel_q, Shape{d, d});
      f("fusion.sel_k", p.fusion.sel_k, Shape{d, d});
      f("fusion.sel_v", p.fusion.sel_v, Shape{d, d});
    }
  }
}

template <typename T>
ModelParams<T> sized_params(const ModelConfig& c) {
  ModelParams<T> p;
  p.encoder.resize(c.enc_layers);
  p.decoder.resize(c.dec_layers);
  return p;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
Tensor<T> constant(Shape shape, std::vector<T> values) {
  return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace

template <typename T>
std::vector<NamedTensor<T>> ordered_parameters(const ModelParams<T>& params, const ModelConfig& config) {
  std::vector<NamedTensor<T>> out;
  visit_params<T>(params, config, [&](const std::string& name, const Tensor<T>& t, const Shape&) {
    out.push_back({name, t});
  });
  return out;
}

template <typename T>
ModelParams<T> zero_params(const ModelConfig& config) {
  auto p = sized_params<T>(config);
  visit_params<T>(p, config, [&](const std::string&, Tensor<T>& t, const Shape& s) {
    t = Tensor<T>(s, T(0));
    t.set_requires_grad();
  });
  return p;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config) {
  auto p = sized_params<float>(config);
  std::vector<std::pair<std::string, Shape>> out;
  visit_params<float>(p, config, [&](const std::string& name, Tensor<float>&, const Shape& s) {
    out.emplace_back(name, s);
  });
  return out;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_layout(config)) n += numel(shape);
  return n;
}

TokenBatch TokenBatch::from(const std::vector<std::vector<TokenId>>& sequences) {
  TokenBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) b.len = std::max(b.len, s.size());
  if (b.batch == 0 || b.len == 0) throw ContractError("token batch must be non-empty");
  b.ids.assign(b.batch * b.len, kPad);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(sequences[i].begin(), sequences[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.len));
  }
  return b;
}

std::vector<std::uint8_t> TokenBatch::valid() const {
  std::vector<std::uint8_t> v(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) v[i] = ids[i] != kPad;
  return v;
}

std::vector<TokenId> with_bos(const std::vector<TokenId>& target) {
  std::vector<TokenId> out{kBos};
  out.insert(out.end(), target.begin(), target.end());
  return out;
}

std::vector<TokenId> with_eos(const std::vector<TokenId>& target) {
  std::vector<TokenId> out(target);
  out.push_back(kEos);
  return out;
}

template <typename T>
std::vector<T> sinusoidal_positions(std::size_t max_len, std::size_t d) {
  std::vector<T> table(max_len * d);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = double(pos) / std::pow(10000.0, double(i) / double(d));
      table[pos * d + i] = T(std::sin(angle));
      if (i + 1 < d) table[pos * d + i + 1] = T(std::cos(angle));
    }
  }
  return table;
}

// ---- fusion blocks ----

template <typename T>
Tensor<T> project_image(const Tensor<T>& raw, const Tensor<T>& w) {
  if (raw.ndim() != 2 || raw.cols() != w.dim(0)) {
    throw DimensionError("image features have dimension " + std::to_string(raw.cols()) +
                         ", projection expects " + std::to_string(w.dim(0)));
  }
  return matmul(raw, w);
}

template <typename T>
Tensor<T> gated_fuse(const Tensor<T>& text, const Tensor<T>& image_ctx, const Tensor<T>& u,
                     const Tensor<T>& v, Tensor<T>* gate_out) {
  if (text.shape() != image_ctx.shape()) {
    throw DimensionError("gated fusion inputs differ: " + shape_str(text.shape()) + " vs " +
                         shape_str(image_ctx.shape()));
  }
  Tensor<T> lambda = sigmoid(add(matmul(text, u), matmul(image_ctx, v)));
  if (lambda.cols() == 1 && text.cols() != 1) lambda = broadcast_cols(lambda, text.cols());
  if (gate_out) *gate_out = lambda;
  return add(text, mul(lambda, sub(image_ctx, text)));
}

template <typename T>
Tensor<T> pool_image_for_gate(const Tensor<T>& image, bool has_cls, std::size_t len) {
  if (image.ndim() != 2 || image.dim(0) == 0) throw EmptyFeatureError("no image rows to pool");
  Tensor<T> pooled;
  if (has_cls) {
    const std::int32_t first = 0;
    pooled = gather_rows(image, std::span<const std::int32_t>(&first, 1));
  } else {
    const std::size_t offsets[] = {0, image.dim(0)};
    pooled = segment_mean(image, std::span<const std::size_t>(offsets));
  }
  std::vector<std::int32_t> rows(len, 0);
  return gather_rows(pooled, rows);
}

template <typename T>
Tensor<T> selective_attention(const Tensor<T>& text, const Tensor<T>& image, const Tensor<T>* wq,
                              const Tensor<T>* wk, const Tensor<T>* wv, std::vector<T>* weights) {
  if (image.ndim() != 2 || image.dim(0) == 0) throw EmptyFeatureError("selective attention over zero patches");
  if (text.cols() != image.cols()) {
    throw DimensionError("selective attention needs a shared dimension: text " +
                         shape_str(text.shape()) + ", image " + shape_str(image.shape()));
  }
  Tensor<T> q = wq ? matmul(text, *wq) : text;
  Tensor<T> k = wk ? matmul(image, *wk) : image;
  Tensor<T> v = wv ? matmul(image, *wv) : image;
  AttentionSpec spec{.batch = 1, .query_len = text.dim(0), .key_len = image.dim(0), .heads = 1,
                     .causal = false, .key_valid = {}};
  return attention(q, k, v, spec, weights);
}

// ---- Model ----

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(config), params_(sized_params<T>(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  visit_params<T>(params_, config_, [&](const std::string& name, Tensor<T>& t, const Shape& shape) {
    std::vector<T> values(numel(shape), T(0));
    if (shape.size() == 2) {
      double bound = std::sqrt(6.0 / double(shape[0] + shape[1]));
      // Keep initial predictions close to uniform.
      if (name == "out.w") bound /= std::sqrt(double(config_.d_model));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& x : values) x = T(dist(rng));
    } else if (ends_with(name, ".g")) {
      std::fill(values.begin(), values.end(), T(1));
    }
    t = Tensor<T>(shape, std::move(values));
    t.set_requires_grad();
  });
  positions_ = constant<T>({config_.max_len, config_.d_model},
                           sinusoidal_positions<T>(config_.max_len, config_.d_model));
}

template <typename T>
Model<T>::Model(const ModelConfig& config, ModelParams<T> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  if (params_.encoder.size() != config_.enc_layers || params_.decoder.size() != config_.dec_layers) {
    throw CheckpointError("parameter layer count does not match the model config");
  }
  visit_params<T>(params_, config_, [&](const std::string& name, Tensor<T>& t, const Shape& shape) {
    if (!t.defined() || t.shape() != shape) {
      throw CheckpointError("parameter " + name + " should have shape " + shape_str(shape));
    }
  });
  positions_ = constant<T>({config_.max_len, config_.d_model},
                           sinusoidal_positions<T>(config_.max_len, config_.d_model));
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

namespace {

template <typename T>
Tensor<T> attention_block(const Tensor<T>& x, const Tensor<T>& memory, const AttentionParams<T>& a,
                          const AttentionSpec& spec) {
  Tensor<T> q = linear(x, a.wq, &a.bq);
  Tensor<T> k = linear(memory, a.wk, &a.bk);
  Tensor<T> v = linear(memory, a.wv, &a.bv);
  return linear(attention(q, k, v, spec), a.wo, &a.bo);
}

template <typename T>
Tensor<T> ffn_block(const Tensor<T>& x, const FfnParams<T>& f) {
  return linear(relu(linear(x, f.w1, &f.b1)), f.w2, &f.b2);
}

}  // namespace

template <typename T>
Tensor<T> Model<T>::embed(const Tensor<T>& table, const TokenBatch& tokens, DropoutContext& drop) const {
  if (tokens.len > config_.max_len) {
    throw LengthError("sequence of length " + std::to_string(tokens.len) + " exceeds max_len " +
                      std::to_string(config_.max_len));
  }
  const std::size_t d = config_.d_model;
  Tensor<T> x = scale(gather_rows(table, tokens.ids), T(std::sqrt(double(d))));
  std::vector<T> pos(tokens.ids.size() * d);
  const auto& table_pos = positions_.values();
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    std::copy_n(table_pos.begin(), tokens.len * d,
                pos.begin() + static_cast<std::ptrdiff_t>(b * tokens.len * d));
  }
  x = add(x, constant<T>({tokens.ids.size(), d}, std::move(pos)));
  return dropout(x, config_.dropout, drop.next(), drop.train);
}

template <typename T>
Tensor<T> Model<T>::encode_text(const TokenBatch& src, DropoutContext& drop) const {
  Tensor<T> x = embed(params_.src_embed, src, drop);
  AttentionSpec spec{.batch = src.batch, .query_len = src.len, .key_len = src.len,
                     .heads = config_.heads, .causal = false, .key_valid = src.valid()};
  for (const auto& l : params_.encoder) {
    Tensor<T> h = layer_norm(x, l.ln1_g, l.ln1_b);
    x = add(x, dropout(attention_block(h, h, l.self_attn, spec), config_.dropout, drop.next(), drop.train));
    h = layer_norm(x, l.ln2_g, l.ln2_b);
    x = add(x, dropout(ffn_block(h, l.ffn), config_.dropout, drop.next(), drop.train));
  }
  return layer_norm(x, params_.enc_ln_g, params_.enc_ln_b);
}

template <typename T>
Tensor<T> Model<T>::image_batch(std::span<const PatchFeatures* const> features, std::size_t& max_patches,
                                std::vector<std::uint8_t>& valid) const {
  max_patches = 0;
  for (const auto* f : features) {
    if (f == nullptr) throw ConfigError("missing image features for a batch row");
    if (f->patches == 0) throw EmptyFeatureError("image '" + f->image_id + "' has no patches");
    if (f->dim != config_.d_img) {
      throw DimensionError("image '" + f->image_id + "' has feature dimension " +
                           std::to_string(f->dim) + ", model expects " + std::to_string(config_.d_img));
    }
    max_patches = std::max<std::size_t>(max_patches, f->patches);
  }
  const std::size_t di = config_.d_img;
  std::vector<T> raw(features.size() * max_patches * di, T(0));
  valid.assign(features.size() * max_patches, 0);
  for (std::size_t b = 0; b < features.size(); ++b) {
    const auto* f = features[b];
    std::transform(f->values.begin(), f->values.end(),
                   raw.begin() + static_cast<std::ptrdiff_t>(b * max_patches * di),
                   [](float v) { return T(v); });
    std::fill_n(valid.begin() + static_cast<std::ptrdiff_t>(b * max_patches), f->patches, 1);
  }
  return constant<T>({features.size() * max_patches, di}, std::move(raw));
}

template <typename T>
Encoded<T> Model<T>::encode(const TokenBatch& src, std::span<const PatchFeatures* const> features,
                            DropoutContext& drop, FusionTrace<T>* trace) const {
  Encoded<T> enc;
  enc.batch = src.batch;
  enc.src_len = src.len;
  enc.src_valid = src.valid();
  enc.text = encode_text(src, drop);
  if (config_.fusion_mode == FusionMode::kTextOnly) {
    enc.memory = enc.text;
    return enc;
  }
  if (features.size() != src.batch) {
    throw ConfigError(to_string(config_.fusion_mode) + " mode needs image features for every sentence (got " +
                      std::to_string(features.size()) + " for " + std::to_string(src.batch) + ")");
  }
  const auto& fp = params_.fusion;
  const std::size_t L = src.len;
  Tensor<T> context;
  if (config_.fusion_mode == FusionMode::kGated) {
    // Pool the raw rows, then project; equal to projecting then pooling.
    std::vector<T> rows;
    std::vector<std::size_t> offsets{0};
    for (const auto* f : features) {
      if (f == nullptr) throw ConfigError("missing image features for a batch row");
      if (f->dim != config_.d_img) {
        throw DimensionError("image '" + f->image_id + "' has feature dimension " +
                             std::to_string(f->dim) + ", model expects " + std::to_string(config_.d_img));
      }
      if (f->patches == 0) throw EmptyFeatureError("image '" + f->image_id + "' has no patches");
      const std::size_t take = f->has_cls ? 1 : f->patches;
      rows.insert(rows.end(), f->values.begin(), f->values.begin() + static_cast<std::ptrdiff_t>(take * f->dim));
      offsets.push_back(offsets.back() + take);
    }
    Tensor<T> raw = constant<T>({offsets.back(), config_.d_img}, std::move(rows));
    Tensor<T> pooled = project_image(segment_mean(raw, offsets), fp.project);
    std::vector<std::int32_t> owner(src.batch * L);
    for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = static_cast<std::int32_t>(i / L);
    context = gather_rows(pooled, owner);
  } else {
    std::size_t max_patches = 0;
    std::vector<std::uint8_t> valid;
    Tensor<T> raw = image_batch(features, max_patches, valid);
    Tensor<T> image = project_image(raw, fp.project);
    Tensor<T> q = config_.raw_qkv ? enc.text : matmul(enc.text, fp.sel_q);
    Tensor<T> k = config_.raw_qkv ? image : matmul(image, fp.sel_k);
    Tensor<T> v = config_.raw_qkv ? image : matmul(image, fp.sel_v);
    AttentionSpec spec{.batch = src.batch, .query_len = L, .key_len = max_patches, .heads = 1,
                       .causal = false, .key_valid = std::move(valid)};
    context = attention(q, k, v, spec, trace ? &trace->attention : nullptr);
    if (trace) trace->max_patches = max_patches;
  }
  enc.memory = gated_fuse(enc.text, context, fp.gate_text, fp.gate_image, trace ? &trace->gate : nullptr);
  return enc;
}

template <typename T>
Tensor<T> Model<T>::decode(const TokenBatch& tgt_in, const Encoded<T>& enc, DropoutContext& drop) const {
  if (tgt_in.batch != enc.batch) throw ContractError("decoder batch does not match encoder batch");
  Tensor<T> y = embed(params_.tgt_embed, tgt_in, drop);
  AttentionSpec self{.batch = tgt_in.batch, .query_len = tgt_in.len, .key_len = tgt_in.len,
                     .heads = config_.heads, .causal = true, .key_valid = tgt_in.valid()};
  AttentionSpec cross{.batch = tgt_in.batch, .query_len = tgt_in.len, .key_len = enc.src_len,
                      .heads = config_.heads, .causal = false, .key_valid = enc.src_valid};
  for (const auto& l : params_.decoder) {
    Tensor<T> h = layer_norm(y, l.ln1_g, l.ln1_b);
    y = add(y, dropout(attention_block(h, h, l.self_attn, self), config_.dropout, drop.next(), drop.train));
    h = layer_norm(y, l.ln2_g, l.ln2_b);
    y = add(y, dropout(attention_block(h, enc.memory, l.cross_attn, cross), config_.dropout, drop.next(),
                       drop.train));
    h = layer_norm(y, l.ln3_g, l.ln3_b);
    y = add(y, dropout(ffn_block(h, l.ffn), config_.dropout, drop.next(), drop.train));
  }
  y = layer_norm(y, params_.dec_ln_g, params_.dec_ln_b);
  return linear(y, params_.out_w, &params_.out_b);
}

template <typename T>
std::vector<std::vector<T>> Model<T>::decode_step(const std::vector<std::vector<TokenId>>& prefixes,
                                                  const Encoded<T>& enc,
                                                  std::span<const std::size_t> rows) const {
  if (prefixes.empty() || prefixes.size() != rows.size()) {
    throw ContractError("decode_step needs one encoder row per prefix");
  }
  const std::size_t t = prefixes.front().size();
  for (const auto& p : prefixes) {
    if (p.empty() || p.front() != kBos) throw ContractError("decode_step prefix must start with BOS");
    if (p.size() != t) throw ContractError("decode_step prefixes must share one length");
  }
  if (t > config_.max_len) {
    throw LengthError("prefix of length " + std::to_string(t) + " exceeds max_len " +
                      std::to_string(config_.max_len));
  }
  NoTapeScope<T> no_tape;
  Encoded<T> sub;
  sub.batch = prefixes.size();
  sub.src_len = enc.src_len;
  std::vector<std::int32_t> mem_rows;
  for (std::size_t r : rows) {
    if (r >= enc.batch) throw IndexError("encoder row out of range");
    for (std::size_t j = 0; j < enc.src_len; ++j) {
      mem_rows.push_back(static_cast<std::int32_t>(r * enc.src_len + j));
      sub.src_valid.push_back(enc.src_valid[r * enc.src_len + j]);
    }
  }
  sub.memory = gather_rows(enc.memory, mem_rows);
  DropoutContext drop;
  Tensor<T> logits = decode(TokenBatch::from(prefixes), sub, drop);
  const std::size_t v = config_.tgt_vocab;
  std::vector<std::vector<T>> out(prefixes.size());
  const auto& lv = logits.values();
  for (std::size_t b = 0; b < prefixes.size(); ++b) {
    const auto first = lv.begin() + static_cast<std::ptrdiff_t>(((b + 1) * t - 1) * v);
    out[b].assign(first, first + static_cast<std::ptrdiff_t>(v));
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::forward_loss(const std::vector<std::vector<TokenId>>& sources,
                                 const std::vector<std::vector<TokenId>>& targets,
                                 std::span<const PatchFeatures* const> features, bool train,
                                 std::uint64_t dropout_seed) const {
  if (sources.empty() || sources.size() != targets.size()) {
    throw ContractError("forward_loss needs a non-empty batch of aligned pairs");
  }
  DropoutContext drop{.train = train, .seed = dropout_seed};
  Encoded<T> enc = encode(TokenBatch::from(sources), features, drop);
  std::vector<std::vector<TokenId>> in, out;
  for (const auto& t : targets) {
    in.push_back(with_bos(t));
    out.push_back(with_eos(t));
  }
  TokenBatch tgt_in = TokenBatch::from(in);
  TokenBatch tgt_out = TokenBatch::from(out);
  Tensor<T> logits = decode(tgt_in, enc, drop);
  return cross_entropy_label_smoothed(logits, tgt_out.ids, config_.label_smoothing, kPad);
}

template <typename T>
double Model<T>::token_accuracy(const std::vector<std::vector<TokenId>>& sources,
                                const std::vector<std::vector<TokenId>>& targets,
                                std::span<const PatchFeatures* const> features) const {
  NoTapeScope<T> no_tape;
  DropoutContext drop;
  Encoded<T> enc = encode(TokenBatch::from(sources), features, drop);
  std::vector<std::vector<TokenId>> in, out;
  for (const auto& t : targets) {
    in.push_back(with_bos(t));
    out.push_back(with_eos(t));
  }
  TokenBatch tgt_out = TokenBatch::from(out);
  Tensor<T> logits = decode(TokenBatch::from(in), enc, drop);
  const std::size_t v = config_.tgt_vocab;
  std::size_t total = 0, correct = 0;
  for (std::size_t i = 0; i < tgt_out.ids.size(); ++i) {
    if (tgt_out.ids[i] == kPad) continue;
    const T* row = logits.values().data() + i * v;
    const auto best = std::max_element(row, row + v) - row;
    ++total;
    correct += best == tgt_out.ids[i];
  }
  return total ? double(correct) / double(total) : 0.0;
}

#define MMT_INSTANTIATE_MODEL(T)                                                                  \
  template class Model<T>;                                                                        \
  template std::vector<NamedTensor<T>> ordered_parameters(const ModelParams<T>&, const ModelConfig&); \
  template ModelParams<T> zero_params<T>(const ModelConfig&);                                     \
  template std::vector<T> sinusoidal_positions<T>(std::size_t, std::size_t);                      \
  template Tensor<T> project_image(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> gated_fuse(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                const Tensor<T>&, Tensor<T>*);                                    \
  template Tensor<T> pool_image_for_gate(const Tensor<T>&, bool, std::size_t);                    \
  template Tensor<T> selective_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,    \
                                         const Tensor<T>*, const Tensor<T>*, std::vector<T>*);

MMT_INSTANTIATE_MODEL(float)
MMT_INSTANTIATE_MODEL(double)

}  // namespace mmt
