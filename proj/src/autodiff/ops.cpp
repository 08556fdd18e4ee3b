#include "mmt/ops.h"

// Small products would otherwise be evaluated as dot products whose
// vectorization depends on buffer alignment; the blocked kernel does not.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "mmt/errors.h"

namespace mmt {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_mat(const std::vector<T>& v, std::size_t r, std::size_t c) {
  return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
MatMap<T> as_mat(std::vector<T>& v, std::size_t r, std::size_t c) {
  return MatMap<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Returns the active tape if any of the inputs requires a gradient.
template <typename T, typename... Ts>
Tape<T>* recording(const Ts&... inputs) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return nullptr;
  const bool any = (inputs.requires_grad() || ...);
  return any ? tape : nullptr;
}

template <typename T>
bool wants_grad(const std::shared_ptr<TensorNode<T>>& n) {
  return n->requires_grad && !n->grad.empty();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Period of the smaller operand when broadcasting, or throws.
std::size_t broadcast_period(const Shape& big, const Shape& small) {
  std::size_t lead = 0;
  while (lead + 1 < small.size() && small[lead] == 1) ++lead;
  const std::size_t tail = small.size() - lead;
  if (tail > big.size() ||
      !std::equal(small.begin() + static_cast<std::ptrdiff_t>(lead), small.end(),
                  big.end() - static_cast<std::ptrdiff_t>(tail))) {
    throw DimensionError("cannot broadcast " + shape_str(small) + " against " + shape_str(big));
  }
  return numel(small);
}

enum class BinOp { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
  const bool a_big = a.size() >= b.size();
  const Tensor<T>& big = a_big ? a : b;
  const Tensor<T>& small = a_big ? b : a;
  const std::size_t period =
      big.shape() == small.shape() ? small.size() : broadcast_period(big.shape(), small.shape());

  Tensor<T> out(big.shape());
  auto& o = out.node()->data;
  const auto& av = a.node()->data;
  const auto& bv = b.node()->data;
  const std::size_t n = o.size();
  const std::size_t pa = a_big ? n : period;
  const std::size_t pb = a_big ? period : n;
  // Walk in blocks of the broadcast period so the inner loop is contiguous.
  const std::size_t block = std::min(pa, pb);
  for (std::size_t base = 0; base < n; base += block) {
    const T* x = av.data() + (pa == n ? base : 0);
    const T* y = bv.data() + (pb == n ? base : 0);
    T* z = o.data() + base;
    switch (op) {
      case BinOp::kAdd: for (std::size_t i = 0; i < block; ++i) z[i] = x[i] + y[i]; break;
      case BinOp::kSub: for (std::size_t i = 0; i < block; ++i) z[i] = x[i] - y[i]; break;
      case BinOp::kMul: for (std::size_t i = 0; i < block; ++i) z[i] = x[i] * y[i]; break;
    }
  }

  if (auto* tape = recording<T>(a, b)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record({an, bn}, on, [an, bn, on, pa, pb, op, n, block]() {
      const bool ga = wants_grad(an), gb = wants_grad(bn);
      for (std::size_t base = 0; base < n; base += block) {
        const std::size_t oa = pa == n ? base : 0, ob = pb == n ? base : 0;
        const T* g = on->grad.data() + base;
        if (ga) {
          T* dst = an->grad.data() + oa;
          if (op == BinOp::kMul) {
            const T* y = bn->data.data() + ob;
            for (std::size_t i = 0; i < block; ++i) dst[i] += g[i] * y[i];
          } else {
            for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
          }
        }
        if (gb) {
          T* dst = bn->grad.data() + ob;
          if (op == BinOp::kMul) {
            const T* x = an->data.data() + oa;
            for (std::size_t i = 0; i < block; ++i) dst[i] += g[i] * x[i];
          } else if (op == BinOp::kSub) {
            for (std::size_t i = 0; i < block; ++i) dst[i] -= g[i];
          } else {
            for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.ndim() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

double uniform_from_key(std::uint64_t key, std::uint64_t index) {
  return static_cast<double>(splitmix64(key ^ index) >> 11) * 0x1.0p-53;
}

}  // namespace

double counter_uniform(std::uint64_t seed, std::uint64_t index) {
  return uniform_from_key(splitmix64(seed), index);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  as_mat(out.node()->data, m, n).noalias() = as_mat(a.node()->data, m, k) * as_mat(b.node()->data, k, n);

  if (auto* tape = recording<T>(a, b)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record({an, bn}, on, [an, bn, on, m, k, n]() {
      auto g = as_mat(std::as_const(on->grad), m, n);
      if (wants_grad(an)) as_mat(an->grad, m, k).noalias() += g * as_mat(std::as_const(bn->data), k, n).transpose();
      if (wants_grad(bn)) as_mat(bn->grad, k, n).noalias() += as_mat(std::as_const(an->data), m, k).transpose() * g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  require_matrix(w, "linear weight");
  const std::size_t in = w.dim(0), outd = w.dim(1);
  if (x.cols() != in) {
    throw DimensionError("linear input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  if (bias && bias->size() != outd) {
    throw DimensionError("linear bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const std::size_t n = x.rows();
  Tensor<T> out({n, outd});
  auto o = as_mat(out.node()->data, n, outd);
  o.noalias() = as_mat(x.node()->data, n, in) * as_mat(w.node()->data, in, outd);
  if (bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->node()->data.data(),
                                                             static_cast<Eigen::Index>(outd));
    o.rowwise() += bv;
  }

  Tape<T>* tape = bias ? recording<T>(x, w, *bias) : recording<T>(x, w);
  if (tape) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    std::shared_ptr<TensorNode<T>> bn = bias ? bias->node() : nullptr;
    std::vector<std::shared_ptr<TensorNode<T>>> ins{xn, wn};
    if (bn) ins.push_back(bn);
    tape->record(std::move(ins), on, [xn, wn, bn, on, n, in, outd]() {
      auto g = as_mat(std::as_const(on->grad), n, outd);
      if (wants_grad(xn)) as_mat(xn->grad, n, in).noalias() += g * as_mat(std::as_const(wn->data), in, outd).transpose();
      if (wants_grad(wn)) as_mat(wn->grad, in, outd).noalias() += as_mat(std::as_const(xn->data), n, in).transpose() * g;
      if (bn && wants_grad(bn)) {
        // Row by row in order; Eigen's column sums vary with buffer alignment.
        T* gb = bn->grad.data();
        const T* gd = on->grad.data();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < outd; ++c) gb[c] += gd[r * outd + c];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kAdd);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kSub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kMul);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) {
    // Split by sign so exp never overflows.
    const T v = xv[i];
    if (v >= 0) {
      o[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      o[i] = e / (T(1) + e);
    }
  }
  if (auto* tape = recording<T>(x)) {
    auto xn = x.node(), on = out.node();
    tape->record({xn}, on, [xn, on]() {
      for (std::size_t i = 0; i < on->data.size(); ++i) {
        const T s = on->data[i];
        xn->grad[i] += on->grad[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0 ? xv[i] : T(0);
  if (auto* tape = recording<T>(x)) {
    auto xn = x.node(), on = out.node();
    tape->record({xn}, on, [xn, on]() {
      for (std::size_t i = 0; i < on->data.size(); ++i) {
        if (xn->data[i] > 0) xn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor;
  if (auto* tape = recording<T>(x)) {
    auto xn = x.node(), on = out.node();
    tape->record({xn}, on, [xn, on, factor]() {
      for (std::size_t i = 0; i < on->data.size(); ++i) xn->grad[i] += on->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t seed, bool train) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout probability must lie in [0,1)");
  if (!train || p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  const std::uint64_t key = splitmix64(seed);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = uniform_from_key(key, i) < p ? T(0) : keep_scale;
  }
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * mask[i];
  if (auto* tape = recording<T>(x)) {
    auto xn = x.node(), on = out.node();
    tape->record({xn}, on, [xn, on, mask = std::move(mask)]() {
      for (std::size_t i = 0; i < on->data.size(); ++i) xn->grad[i] += on->grad[i] * mask[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (auto* tape = recording<T>(x)) {
    auto xn = x.node(), on = out.node();
    tape->record({xn}, on, [xn, on]() {
      for (auto& g : xn->grad) g += on->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out(x.shape());
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * c;
    T* orow = o.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < c; ++j) orow[j] /= z;
  }
  if (auto* tape = recording<T>(x)) {
    auto xn = x.node(), on = out.node();
    tape->record({xn}, on, [xn, on, r, c]() {
      for (std::size_t i = 0; i < r; ++i) {
        const T* y = on->data.data() + i * c;
        const T* g = on->grad.data() + i * c;
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
        T* gx = xn->grad.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const std::size_t d = x.cols(), r = x.rows();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm affine parameters " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last dimension of " +
                         shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(r);
  const auto& xv = x.node()->data;
  const auto& gv = gain.node()->data;
  const auto& bv = bias.node()->data;
  auto& o = out.node()->data;
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + T(kLayerNormEps));
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[i * d + j] = h;
      o[i * d + j] = h * gv[j] + bv[j];
    }
  }
  if (auto* tape = recording<T>(x, gain, bias)) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    tape->record({xn, gn, bn}, on,
                 [xn, gn, bn, on, r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
                   const auto& g = on->grad;
                   for (std::size_t i = 0; i < r; ++i) {
                     const T* gy = g.data() + i * d;
                     const T* h = xhat.data() + i * d;
                     if (wants_grad(gn)) {
                       for (std::size_t j = 0; j < d; ++j) gn->grad[j] += gy[j] * h[j];
                     }
                     if (wants_grad(bn)) {
                       for (std::size_t j = 0; j < d; ++j) bn->grad[j] += gy[j];
                     }
                     if (wants_grad(xn)) {
                       T mean_gh = 0, mean_ghh = 0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const T gh = gy[j] * gn->data[j];
                         mean_gh += gh;
                         mean_ghh += gh * h[j];
                       }
                       mean_gh /= T(d);
                       mean_ghh /= T(d);
                       T* gx = xn->grad.data() + i * d;
                       for (std::size_t j = 0; j < d; ++j) {
                         const T gh = gy[j] * gn->data[j];
                         gx[j] += inv_std[i] * (gh - mean_gh - h[j] * mean_ghh);
                       }
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits, std::span<const TokenId> targets,
                                       double eps, TokenId pad_id) {
  require_matrix(logits, "cross_entropy_label_smoothed");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross entropy got " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " logit rows");
  }
  if (eps < 0.0 || eps >= 1.0) throw ContractError("label smoothing must lie in [0,1)");
  if (v < 2 && eps > 0.0) throw ContractError("label smoothing needs at least two classes");
  for (auto t : targets) {
    if (t != pad_id && (t < 0 || static_cast<std::size_t>(t) >= v)) {
      throw IndexError("target id " + std::to_string(t) + " out of range for vocabulary of " +
                       std::to_string(v));
    }
  }
  const T on_w = T(1.0 - eps);
  const T off_w = v > 1 ? T(eps / double(v - 1)) : T(0);
  const auto& lv = logits.node()->data;
  std::vector<T> probs(lv.size());
  std::size_t count = 0;
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == pad_id) continue;
    ++count;
    const T* row = lv.data() + i * v;
    const T mx = *std::max_element(row, row + v);
    T z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const T log_z = std::log(z) + mx;
    T row_loss = 0;
    for (std::size_t j = 0; j < v; ++j) {
      const T logp = row[j] - log_z;
      probs[i * v + j] = std::exp(logp);
      row_loss -= (static_cast<std::size_t>(targets[i]) == j ? on_w : off_w) * logp;
    }
    total += row_loss;
  }
  const T denom = count ? T(count) : T(1);
  Tensor<T> out = Tensor<T>::scalar(total / denom);
  if (auto* tape = recording<T>(logits)) {
    auto ln = logits.node(), on = out.node();
    std::vector<TokenId> tg(targets.begin(), targets.end());
    tape->record({ln}, on,
                 [ln, on, n, v, on_w, off_w, denom, pad_id, tg = std::move(tg), probs = std::move(probs)]() {
                   const T g = on->grad[0] / denom;
                   // Weights sum to one, so d/dlogit = p - w.
                   for (std::size_t i = 0; i < n; ++i) {
                     if (tg[i] == pad_id) continue;
                     T* gr = ln->grad.data() + i * v;
                     const T* p = probs.data() + i * v;
                     for (std::size_t j = 0; j < v; ++j) {
                       const T w = static_cast<std::size_t>(tg[i]) == j ? on_w : off_w;
                       gr[j] += g * (p[j] - w);
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ContractError("gather_rows needs at least one index");
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("row index " + std::to_string(id) + " out of range for table of " +
                       std::to_string(vocab) + " rows");
    }
  }
  Tensor<T> out({ids.size(), d});
  auto& o = out.node()->data;
  const auto& tv = table.node()->data;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                o.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (auto* tape = recording<T>(table)) {
    auto tn = table.node(), on = out.node();
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    tape->record({tn}, on, [tn, on, d, idx = std::move(idx)]() {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        T* dst = tn->grad.data() + static_cast<std::size_t>(idx[i]) * d;
        const T* src = on->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::size_t> offsets) {
  require_matrix(x, "segment_mean");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != x.dim(0)) {
    throw DimensionError("segment offsets must run from 0 to " + std::to_string(x.dim(0)));
  }
  const std::size_t segs = offsets.size() - 1, d = x.dim(1);
  for (std::size_t s = 0; s < segs; ++s) {
    if (offsets[s + 1] <= offsets[s]) throw EmptyFeatureError("segment_mean over an empty segment");
  }
  Tensor<T> out({segs, d});
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t s = 0; s < segs; ++s) {
    const T inv = T(1) / T(offsets[s + 1] - offsets[s]);
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) {
      for (std::size_t j = 0; j < d; ++j) o[s * d + j] += xv[r * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) o[s * d + j] *= inv;
  }
  if (auto* tape = recording<T>(x)) {
    auto xn = x.node(), on = out.node();
    std::vector<std::size_t> off(offsets.begin(), offsets.end());
    tape->record({xn}, on, [xn, on, d, off = std::move(off)]() {
      for (std::size_t s = 0; s + 1 < off.size(); ++s) {
        const T inv = T(1) / T(off[s + 1] - off[s]);
        for (std::size_t r = off[s]; r < off[s + 1]; ++r) {
          for (std::size_t j = 0; j < d; ++j) xn->grad[r * d + j] += on->grad[s * d + j] * inv;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_cols(const Tensor<T>& x, std::size_t width) {
  if (x.cols() != 1) throw DimensionError("broadcast_cols expects [n x 1], got " + shape_str(x.shape()));
  const std::size_t n = x.rows();
  Tensor<T> out({n, width});
  auto& o = out.node()->data;
  const auto& xv = x.node()->data;
  for (std::size_t i = 0; i < n; ++i) std::fill_n(o.begin() + static_cast<std::ptrdiff_t>(i * width), width, xv[i]);
  if (auto* tape = recording<T>(x)) {
    auto xn = x.node(), on = out.node();
    tape->record({xn}, on, [xn, on, n, width]() {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < width; ++j) xn->grad[i] += on->grad[i * width + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionSpec& spec, std::vector<T>* weights) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t B = spec.batch, Lq = spec.query_len, Lk = spec.key_len, H = spec.heads;
  const std::size_t d = q.dim(1);
  if (q.dim(0) != B * Lq || k.dim(0) != B * Lk || v.dim(0) != B * Lk || k.dim(1) != d ||
      v.dim(1) != d) {
    throw DimensionError("attention shapes q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) +
                         " v" + shape_str(v.shape()) + " do not match batch layout");
  }
  if (H == 0 || d % H != 0) throw DimensionError("attention heads must divide the model dimension");
  if (!spec.key_valid.empty() && spec.key_valid.size() != B * Lk) {
    throw DimensionError("attention key mask has the wrong length");
  }
  const std::size_t dh = d / H;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  std::vector<T> probs(B * H * Lq * Lk, T(0));
  Tensor<T> out({B * Lq, d});
  const auto& qv = q.node()->data;
  const auto& kv = k.node()->data;
  const auto& vv = v.node()->data;
  auto& ov = out.node()->data;

  using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  using MutStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  const auto lq = static_cast<Eigen::Index>(Lq), lk = static_cast<Eigen::Index>(Lk),
             edh = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

  RowMat<T> scores(lq, lk);
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* valid = spec.key_valid.empty() ? nullptr : spec.key_valid.data() + b * Lk;
    for (std::size_t h = 0; h < H; ++h) {
      Strided qm(qv.data() + b * Lq * d + h * dh, lq, edh, stride);
      Strided km(kv.data() + b * Lk * d + h * dh, lk, edh, stride);
      Strided vm(vv.data() + b * Lk * d + h * dh, lk, edh, stride);
      scores.noalias() = qm * km.transpose();
      T* p = probs.data() + (b * H + h) * Lq * Lk;
      for (std::size_t i = 0; i < Lq; ++i) {
        const T* srow = scores.data() + i * Lk;
        T* prow = p + i * Lk;
        const std::size_t limit = spec.causal ? std::min(i + 1, Lk) : Lk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          if (valid && !valid[j]) continue;
          mx = std::max(mx, srow[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;  // nothing visible: zero row
        T z = 0;
        for (std::size_t j = 0; j < limit; ++j) {
          if (valid && !valid[j]) continue;
          prow[j] = std::exp((srow[j] - mx) * inv_sqrt);
          z += prow[j];
        }
        const T inv_z = T(1) / z;
        for (std::size_t j = 0; j < limit; ++j) prow[j] *= inv_z;
      }
      ConstMatMap<T> pm(p, lq, lk);
      MutStrided om(ov.data() + b * Lq * d + h * dh, lq, edh, stride);
      om.noalias() = pm * vm;
    }
  }
  if (weights) *weights = probs;

  if (auto* tape = recording<T>(q, k, v)) {
    auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
    tape->record({qn, kn, vn}, on,
                 [qn, kn, vn, on, B, H, Lq, Lk, d, dh, inv_sqrt, probs = std::move(probs)]() {
                   const auto lq = static_cast<Eigen::Index>(Lq), lk = static_cast<Eigen::Index>(Lk),
                              edh = static_cast<Eigen::Index>(dh);
                   const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
                   const bool gq = wants_grad(qn), gk = wants_grad(kn), gv = wants_grad(vn);
                   RowMat<T> dp(lq, lk);
                   for (std::size_t b = 0; b < B; ++b) {
                     for (std::size_t h = 0; h < H; ++h) {
                       const std::size_t qoff = b * Lq * d + h * dh, koff = b * Lk * d + h * dh;
                       ConstMatMap<T> pm(probs.data() + (b * H + h) * Lq * Lk, lq, lk);
                       Strided go(on->grad.data() + qoff, lq, edh, stride);
                       Strided vm(vn->data.data() + koff, lk, edh, stride);
                       if (gv) MutStrided(vn->grad.data() + koff, lk, edh, stride).noalias() += pm.transpose() * go;
                       if (!gq && !gk) continue;
                       dp.noalias() = go * vm.transpose();
                       // dS = P * (dP - rowsum(P * dP)), scaled.
                       // Plain loop: Eigen's vectorized row sums depend on buffer alignment,
                       // which would make training runs differ in the last bit.
                       Eigen::Array<T, Eigen::Dynamic, 1> row_dot(lq);
                       for (Eigen::Index i = 0; i < lq; ++i) {
                         T acc = 0;
                         for (Eigen::Index j = 0; j < lk; ++j) acc += dp(i, j) * pm(i, j);
                         row_dot(i) = acc;
                       }
                       dp = (pm.array() * (dp.array().colwise() - row_dot)) * inv_sqrt;
                       if (gq) {
                         Strided km(kn->data.data() + koff, lk, edh, stride);
                         MutStrided(qn->grad.data() + qoff, lq, edh, stride).noalias() += dp * km;
                       }
                       if (gk) {
                         Strided qm(qn->data.data() + qoff, lq, edh, stride);
                         MutStrided(kn->grad.data() + koff, lk, edh, stride).noalias() += dp.transpose() * qm;
                       }
                     }
                   }
                 });
  }
  return out;
}

#define MMT_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> dropout(const Tensor<T>&, double, std::uint64_t, bool);                     \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> cross_entropy_label_smoothed(const Tensor<T>&, std::span<const TokenId>,    \
                                                  double, TokenId);                              \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::int32_t>);               \
  template Tensor<T> segment_mean(const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> broadcast_cols(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                               const AttentionSpec&, std::vector<T>*);

MMT_INSTANTIATE_OPS(float)
MMT_INSTANTIATE_OPS(double)

}  // namespace mmt
