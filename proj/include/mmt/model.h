#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmt/features.h"
#include "mmt/ops.h"

namespace mmt {

enum class FusionMode { kTextOnly, kGated, kSelectiveAttention };
// Gate λ either per position and channel ([L x d]) or one scalar per position.
enum class GateGranularity { kPerChannel, kPerPosition };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& s);

struct ModelConfig {
  std::uint32_t enc_layers = 4;
  std::uint32_t dec_layers = 4;
  std::uint32_t d_model = 128;
  std::uint32_t d_ffn = 256;
  std::uint32_t heads = 4;
  double dropout = 0.3;
  double label_smoothing = 0.1;
  FusionMode fusion_mode = FusionMode::kTextOnly;
  std::uint32_t d_img = 768;
  std::uint32_t src_vocab = 0;
  std::uint32_t tgt_vocab = 0;
  std::uint32_t max_len = 256;
  // Use H_text/H_img directly as Q/K/V in selective attention.
  bool raw_qkv = false;
  GateGranularity gate = GateGranularity::kPerChannel;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderLayerParams {
  Tensor<T> ln1_g, ln1_b;
  AttentionParams<T> self_attn;
  Tensor<T> ln2_g, ln2_b;
  FfnParams<T> ffn;
};

template <typename T>
struct DecoderLayerParams {
  Tensor<T> ln1_g, ln1_b;
  AttentionParams<T> self_attn;
  Tensor<T> ln2_g, ln2_b;
  AttentionParams<T> cross_attn;
  Tensor<T> ln3_g, ln3_b;
  FfnParams<T> ffn;
};

// Image-side parameters. `project` maps d_img -> d_model; `gate_text` and
// `gate_image` are the two gate matrices; `sel_*` are the selective-attention
// projections (absent with raw_qkv or outside selective mode).
template <typename T>
struct FusionParams {
  Tensor<T> project;
  Tensor<T> gate_text, gate_image;
  Tensor<T> sel_q, sel_k, sel_v;
};

template <typename T>
struct ModelParams {
  Tensor<T> src_embed, tgt_embed;
  std::vector<EncoderLayerParams<T>> encoder;
  Tensor<T> enc_ln_g, enc_ln_b;
  std::vector<DecoderLayerParams<T>> decoder;
  Tensor<T> dec_ln_g, dec_ln_b;
  Tensor<T> out_w, out_b;
  FusionParams<T> fusion;
};

// Every parameter present under `config`, in the fixed checkpoint order.
template <typename T>
std::vector<NamedTensor<T>> ordered_parameters(const ModelParams<T>& params,
                                               const ModelConfig& config);

// All parameters allocated with zeros (gains too), marked trainable.
template <typename T>
ModelParams<T> zero_params(const ModelConfig& config);

// Shapes of ModelParams for a config, in checkpoint order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

// Right-padded batch of token sequences, row-major [batch x len].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<TokenId> ids;

  static TokenBatch from(const std::vector<std::vector<TokenId>>& sequences);
  std::vector<std::uint8_t> valid() const;
  TokenId at(std::size_t b, std::size_t t) const { return ids[b * len + t]; }
};

struct DropoutContext {
  bool train = false;
  std::uint64_t seed = 0;
  std::uint64_t calls = 0;
  std::uint64_t next() { return seed * 0x100000001b3ULL + ++calls; }
};

// Intermediate values of the fusion block, for inspection and attention
// dumps. Filled only when requested.
template <typename T>
struct FusionTrace {
  std::vector<T> attention;  // [batch][query][patch] padded to max patches
  std::size_t max_patches = 0;
  Tensor<T> gate;            // λ
};

template <typename T>
struct Encoded {
  Tensor<T> text;    // H_text [batch*src_len x d]
  Tensor<T> memory;  // fused output fed to cross-attention
  std::size_t batch = 0;
  std::size_t src_len = 0;
  std::vector<std::uint8_t> src_valid;
};

// ---- Fusion building blocks on single examples ----

// raw [p x d_img] * W; no bias, no positions.
template <typename T>
Tensor<T> project_image(const Tensor<T>& raw, const Tensor<T>& w);

// λ = σ(H_text·U + ctx·V); out = (1-λ)⊙H_text + λ⊙ctx. U and V are [d x d]
// for a per-channel gate or [d x 1] for a per-position gate.
template <typename T>
Tensor<T> gated_fuse(const Tensor<T>& text, const Tensor<T>& image_ctx, const Tensor<T>& u,
                     const Tensor<T>& v, Tensor<T>* gate_out = nullptr);

// CLS row if present, otherwise the patch mean, repeated over `len` rows.
template <typename T>
Tensor<T> pool_image_for_gate(const Tensor<T>& image, bool has_cls, std::size_t len);

// Single-head softmax(QK^T/sqrt(d))V with Q = text·Wq, K = image·Wk,
// V = image·Wv; null projections mean identity.
template <typename T>
Tensor<T> selective_attention(const Tensor<T>& text, const Tensor<T>& image, const Tensor<T>* wq,
                              const Tensor<T>* wk, const Tensor<T>* wv,
                              std::vector<T>* weights = nullptr);

template <typename T>
std::vector<T> sinusoidal_positions(std::size_t max_len, std::size_t d);

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const ModelConfig& config, ModelParams<T> params);

  const ModelConfig& config() const { return config_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }
  std::vector<NamedTensor<T>> parameters() const { return ordered_parameters(params_, config_); }
  std::size_t parameter_count() const;

  // H_text for a batch of source sequences.
  Tensor<T> encode_text(const TokenBatch& src, DropoutContext& drop) const;
  // H_text followed by the configured fusion. `features` holds one entry per
  // batch row and may be empty in text-only mode.
  Encoded<T> encode(const TokenBatch& src, std::span<const PatchFeatures* const> features,
                    DropoutContext& drop, FusionTrace<T>* trace = nullptr) const;
  // Decoder over teacher-forced inputs; logits [batch*len x tgt_vocab].
  Tensor<T> decode(const TokenBatch& tgt_in, const Encoded<T>& enc, DropoutContext& drop) const;
  // Next-token logits for each prefix in `prefixes` (all of equal length),
  // attending to batch row `rows[i]` of `enc`.
  std::vector<std::vector<T>> decode_step(const std::vector<std::vector<TokenId>>& prefixes,
                                          const Encoded<T>& enc,
                                          std::span<const std::size_t> rows) const;

  // Teacher-forced label-smoothed loss, mean over non-pad target tokens.
  Tensor<T> forward_loss(const std::vector<std::vector<TokenId>>& sources,
                         const std::vector<std::vector<TokenId>>& targets,
                         std::span<const PatchFeatures* const> features, bool train,
                         std::uint64_t dropout_seed = 0) const;

  // Share of non-pad target positions (EOS included) whose argmax logit is
  // the reference token, teacher-forced.
  double token_accuracy(const std::vector<std::vector<TokenId>>& sources,
                        const std::vector<std::vector<TokenId>>& targets,
                        std::span<const PatchFeatures* const> features) const;

 private:
  Tensor<T> embed(const Tensor<T>& table, const TokenBatch& tokens, DropoutContext& drop) const;
  Tensor<T> image_batch(std::span<const PatchFeatures* const> features, std::size_t& max_patches,
                        std::vector<std::uint8_t>& valid) const;

  ModelConfig config_;
  ModelParams<T> params_;
  Tensor<T> positions_;
};

// Teacher-forcing views of a target sequence.
std::vector<TokenId> with_bos(const std::vector<TokenId>& target);
std::vector<TokenId> with_eos(const std::vector<TokenId>& target);

}  // namespace mmt
