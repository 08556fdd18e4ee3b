#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmt/tensor.h"

// Differentiable operations over Tensor<T>. Every operation records a
// backward rule on the active tape when one of its inputs requires a
// gradient; otherwise it is a plain forward computation.
//
// Broadcasting is deliberately narrow: a binary operand may be smaller than
// the other only if its shape, after dropping leading 1s, is a suffix of the
// larger shape. It is then repeated periodically ([d] or [1 x d] against
// [n x d]). Anything else is a DimensionError.
namespace mmt {

using TokenId = std::int32_t;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[n x in] * w[in x out] (+ bias[out]).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// Inverted dropout. The keep mask is a pure function of (seed, element
// index), so a call is reproducible from its seed alone. Identity when
// `train` is false or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t seed, bool train);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias);

// Mean over non-pad rows of the label-smoothed negative log-likelihood:
// weight 1-eps on the target, eps/(V-1) on each other class.
template <typename T>
Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits, std::span<const TokenId> targets,
                                       double eps, TokenId pad_id);

// Row lookup: out[i] = table[ids[i]]. Backward scatter-adds into the table.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int32_t> ids);

// Mean of consecutive row segments: segment s covers rows
// [offsets[s], offsets[s+1]). Empty segments are rejected.
template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::size_t> offsets);

// [n x 1] -> [n x width] by repeating each row's single value.
template <typename T>
Tensor<T> broadcast_cols(const Tensor<T>& x, std::size_t width);

struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::size_t heads = 1;
  bool causal = false;
  // batch * key_len flags; empty means every key is visible.
  std::vector<std::uint8_t> key_valid;
};

// Scaled dot-product attention over a batch laid out as stacked rows:
// q is [batch*query_len x d], k and v are [batch*key_len x d]. Heads split
// the channel dimension. When `weights` is given it receives the attention
// probabilities laid out [batch][head][query][key].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionSpec& spec, std::vector<T>* weights = nullptr);

// Counter-based uniform in [0,1) used by dropout; exposed for tests.
double counter_uniform(std::uint64_t seed, std::uint64_t index);

}  // namespace mmt
