#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vmtt/masking.hpp"
#include "vmtt/rng.hpp"
#include "vmtt/tensor.hpp"

namespace vmtt {

/// Ordered, named collection of trainable parameters.
class ParamStore {
 public:
  Var add(std::string name, Tensor init) {
    for (const auto& [n, _] : entries_)
      if (n == name) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    Var v = Var::parameter(std::move(init));
    entries_.emplace_back(std::move(name), v);
    return v;
  }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  const Var* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return &e.second;
    return nullptr;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

inline Tensor xavier_uniform(Rng& rng, std::size_t in, std::size_t out) {
  Tensor t = Tensor::matrix(in, out);
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& v : t.storage()) v = rng.uniform(-a, a);
  return t;
}

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  static Linear create(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    return Linear{ps.add(name + ".weight", xavier_uniform(rng, in, out)), ps.add(name + ".bias", Tensor({1, out}, 0.0))};
  }

  Var operator()(const Var& x) const { return add_bias(matmul(x, weight), bias); }
  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }
};

struct LayerNorm {
  Var gain;
  Var bias;

  static LayerNorm create(ParamStore& ps, const std::string& name, std::size_t d) {
    return LayerNorm{ps.add(name + ".gain", Tensor({1, d}, 1.0)), ps.add(name + ".bias", Tensor({1, d}, 0.0))};
  }

  Var operator()(const Var& x) const { return layer_norm(x, gain, bias); }
};

/// Pre-norm position-wise feed-forward: Linear -> swish -> Linear.
struct FeedForward {
  LayerNorm norm;
  Linear up;
  Linear down;

  static FeedForward create(ParamStore& ps, const std::string& name, std::size_t d, std::size_t mult, Rng& rng) {
    return FeedForward{LayerNorm::create(ps, name + ".norm", d), Linear::create(ps, name + ".up", d, d * mult, rng),
                       Linear::create(ps, name + ".down", d * mult, d, rng)};
  }

  Var operator()(const Var& x) const { return down(swish(up(norm(x)))); }
};

/// Learned per-head bias indexed by the signed key-minus-query offset.
/// Offsets <= 0 use the past table (index -offset, clipped to window);
/// offsets > 0 use the future table (index offset-1, clipped). A causal
/// layer has no future table and positive offsets get zero bias (they are
/// masked anyway).
inline Var relative_bias(const Var& past_table, const Var* future_table, std::size_t head, std::size_t window,
                         std::size_t q_count, std::size_t k_count, std::ptrdiff_t q_begin, std::ptrdiff_t k_begin) {
  Tensor out = Tensor::matrix(q_count, k_count);
  auto index_of = [=](std::size_t i, std::size_t j, bool& future) -> std::size_t {
    const std::ptrdiff_t off = (k_begin + static_cast<std::ptrdiff_t>(j)) - (q_begin + static_cast<std::ptrdiff_t>(i));
    future = off > 0;
    const auto mag = static_cast<std::size_t>(off > 0 ? off : -off);
    return future ? std::min(mag, window) - 1 : std::min(mag, window);
  };
  for (std::size_t i = 0; i < q_count; ++i)
    for (std::size_t j = 0; j < k_count; ++j) {
      bool fut = false;
      const std::size_t idx = index_of(i, j, fut);
      if (!fut) out(i, j) = past_table.value()(head, idx);
      else if (future_table) out(i, j) = future_table->value()(head, idx);
    }
  std::vector<Var> parents{past_table};
  if (future_table) parents.push_back(*future_table);
  auto pn = past_table.node();
  std::shared_ptr<Node> fn = future_table ? future_table->node() : nullptr;
  return detail::make_result(std::move(out), parents, "relative_bias", [=](Node& self) {
    auto* gp = detail::grad_of(pn);
    Tensor* gf = fn ? detail::grad_of(fn) : nullptr;
    for (std::size_t i = 0; i < q_count; ++i)
      for (std::size_t j = 0; j < k_count; ++j) {
        bool fut = false;
        const std::size_t idx = index_of(i, j, fut);
        if (!fut) {
          if (gp) (*gp)(head, idx) += self.grad(i, j);
        } else if (gf) {
          (*gf)(head, idx) += self.grad(i, j);
        }
      }
  });
}

/// Multi-head self-attention with relative-position bias. Projections are
/// applied by the caller so cached keys/values can be reused in streaming.
struct MultiHeadAttention {
  std::size_t n_heads = 1;
  std::size_t window = 1;
  Linear query, key, value, output;
  Var past_bias;    // n_heads x (window + 1)
  Var future_bias;  // n_heads x window, undefined for causal layers

  static MultiHeadAttention create(ParamStore& ps, const std::string& name, std::size_t d, std::size_t n_heads,
                                   std::size_t window, bool has_future, Rng& rng) {
    if (n_heads == 0 || d % n_heads != 0) throw std::invalid_argument("attention: d_model must be divisible by n_heads");
    if (window < 1) throw std::invalid_argument("attention: relative position window must be >= 1");
    MultiHeadAttention a;
    a.n_heads = n_heads;
    a.window = window;
    a.query = Linear::create(ps, name + ".query", d, d, rng);
    a.key = Linear::create(ps, name + ".key", d, d, rng);
    a.value = Linear::create(ps, name + ".value", d, d, rng);
    a.output = Linear::create(ps, name + ".output", d, d, rng);
    a.past_bias = ps.add(name + ".rel_past", Tensor({n_heads, window + 1}, 0.0));
    if (has_future) a.future_bias = ps.add(name + ".rel_future", Tensor({n_heads, window}, 0.0));
    return a;
  }

  /// q: (Lq x d) projected queries at absolute positions q_begin..;
  /// k, v: (Lk x d) projected keys/values at k_begin..
  Var attend(const Var& q, const Var& k, const Var& v, const AttentionMask& mask, std::ptrdiff_t q_begin,
             std::ptrdiff_t k_begin) const {
    const std::size_t d = q.cols(), dh = d / n_heads;
    const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));
    const Var* fut = future_bias.defined() ? &future_bias : nullptr;
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
      Var qh = slice_cols(q, h * dh, (h + 1) * dh);
      Var kh = slice_cols(k, h * dh, (h + 1) * dh);
      Var vh = slice_cols(v, h * dh, (h + 1) * dh);
      Var scores = add(matmul(qh, transpose(kh)),
                       relative_bias(past_bias, fut, h, window, q.rows(), k.rows(), q_begin, k_begin));
      Var weights = softmax(apply_mask(scale(scores, alpha), mask));
      heads.push_back(matmul(weights, vh));
    }
    return output(n_heads == 1 ? heads.front() : concat_cols(heads));
  }

  /// Plain self-attention over z (offline path).
  Var operator()(const Var& z, const AttentionMask& mask) const {
    if (mask.rows() != z.rows() || mask.cols() != z.rows())
      throw std::invalid_argument("attention: mask shape does not match sequence length");
    for (std::size_t t = 0; t < mask.rows(); ++t)
      if (mask.row_count(t) == 0) throw std::invalid_argument("attention: row " + std::to_string(t) + " has no allowed key");
    return attend(query(z), key(z), value(z), mask, 0, 0);
  }
};

/// Keys/values (and convolution history) retained for frames already
/// processed by one layer.
struct LayerCache {
  Tensor keys;
  Tensor values;
  Tensor conv_history;

  std::size_t length() const { return keys.rows(); }

  void append_kv(const Tensor& k, const Tensor& v, std::optional<std::size_t> keep) {
    keys = vconcat(keys, k);
    values = vconcat(values, v);
    if (keep && keys.rows() > *keep) {
      const std::size_t drop = keys.rows() - *keep;
      keys = keys.slice_rows(drop, keys.rows());
      values = values.slice_rows(drop, values.rows());
    }
  }
};

}  // namespace vmtt
