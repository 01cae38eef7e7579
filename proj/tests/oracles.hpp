#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Deliberately naive: enumeration, scalar loops, direct predicates.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <set>
#include <vector>

#include "vmtt/masking.hpp"
#include "vmtt/rng.hpp"
#include "vmtt/tensor.hpp"

namespace oracle {

using vmtt::MaskConfig;
using vmtt::Rng;
using vmtt::Tensor;

// ---------------------------------------------------------------------------
// Masks

inline bool past_ok(const MaskConfig& c, std::size_t t, std::size_t s) {
  if (std::holds_alternative<vmtt::UnlimitedPast>(c.past)) return true;
  if (const auto* f = std::get_if<vmtt::FixedPast>(&c.past)) return t - s <= f->frames;
  const std::size_t n = std::get<vmtt::ChunkedPast>(c.past).chunks, w = *c.chunk_frames;
  return t / w - s / w <= n;
}

inline bool future_ok(const MaskConfig& c, std::size_t t, std::size_t s) {
  if (std::holds_alternative<vmtt::NoFuture>(c.future)) return s == t;
  if (const auto* f = std::get_if<vmtt::FixedFuture>(&c.future)) return s - t <= f->frames;
  const std::size_t w = *c.chunk_frames;
  return s / w == t / w;
}

/// Two-predicate rule: s <= t must pass the past rule, s >= t the future rule.
inline bool allows(const MaskConfig& c, std::size_t t, std::size_t s) {
  return (s > t || past_ok(c, t, s)) && (s < t || future_ok(c, t, s));
}

/// Every configuration used by the exhaustive mask checks.
inline std::vector<MaskConfig> mask_configs() {
  std::vector<vmtt::PastPolicy> pasts{vmtt::UnlimitedPast{}};
  for (std::size_t n = 0; n <= 4; ++n) pasts.push_back(vmtt::FixedPast{n});
  for (std::size_t n = 0; n <= 2; ++n) pasts.push_back(vmtt::ChunkedPast{n});
  std::vector<vmtt::FuturePolicy> futures{vmtt::NoFuture{}, vmtt::ChunkedFuture{}};
  for (std::size_t n = 0; n <= 3; ++n) futures.push_back(vmtt::FixedFuture{n});
  std::vector<MaskConfig> out;
  for (const auto& p : pasts)
    for (const auto& f : futures)
      for (std::size_t chunk = 1; chunk <= 5; ++chunk) {
        MaskConfig c{p, f, chunk};
        out.push_back(c);
      }
  return out;
}

/// Earliest/latest input frame reachable from output t through n_layers
/// copies of the mask graph.
inline vmtt::FrameRange reachable(const vmtt::AttentionMask& m, std::size_t n_layers, std::size_t t) {
  std::set<std::size_t> frontier{t};
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::set<std::size_t> next;
    for (std::size_t q : frontier)
      for (std::size_t s = 0; s < m.cols(); ++s)
        if (m(q, s)) next.insert(s);
    frontier = std::move(next);
  }
  return {*frontier.begin(), *frontier.rbegin()};
}

// ---------------------------------------------------------------------------
// Transducer lattices

/// Random normalized log-distributions, shape {T, U+1, V+1}.
inline Tensor random_logp(Rng& rng, std::size_t T, std::size_t U, std::size_t V, double scale = 2.0) {
  Tensor logits = Tensor::matrix(T * (U + 1), V + 1);
  for (auto& v : logits.storage()) v = scale * rng.normal();
  return vmtt::log_softmax(logits).reshaped({T, U + 1, V + 1});
}

inline std::vector<int> random_labels(Rng& rng, std::size_t U, std::size_t V) {
  std::vector<int> y;
  for (std::size_t i = 0; i < U; ++i) y.push_back(static_cast<int>(rng.range(1, V)));
  return y;
}

struct Transition {
  std::size_t t, u, k;
};

/// Every monotonic alignment as its list of transitions.
inline std::vector<std::vector<Transition>> alignments(std::size_t T, const std::vector<int>& y) {
  const std::size_t U = y.size();
  std::vector<std::vector<Transition>> out;
  std::vector<Transition> path;
  std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t t, std::size_t u) {
    if (u < U) {
      path.push_back({t, u, static_cast<std::size_t>(y[u])});
      walk(t, u + 1);
      path.pop_back();
    }
    path.push_back({t, u, 0});
    if (t + 1 < T) walk(t + 1, u);
    else if (u == U) out.push_back(path);
    path.pop_back();
  };
  walk(0, 0);
  return out;
}

inline double node_lp(const Tensor& logp, std::size_t U, const Transition& tr) {
  const std::size_t V1 = logp.shape()[2];
  return logp[(tr.t * (U + 1) + tr.u) * V1 + tr.k];
}

/// -log sum over alignments of the path probability.
inline double rnnt_loss(const Tensor& logp, const std::vector<int>& y) {
  const std::size_t T = logp.shape()[0];
  double total = 0.0;
  for (const auto& path : alignments(T, y)) {
    double lp = 0.0;
    for (const auto& tr : path) lp += node_lp(logp, y.size(), tr);
    total += std::exp(lp);
  }
  return -std::log(total);
}

/// Posterior probability of each label transition (t, u) -> (t, u+1),
/// indexed t*(U+1)+u, by enumeration.
inline std::vector<double> label_posteriors(const Tensor& logp, const std::vector<int>& y) {
  const std::size_t T = logp.shape()[0], U = y.size();
  std::vector<double> post(T * (U + 1), 0.0);
  double total = 0.0;
  for (const auto& path : alignments(T, y)) {
    double lp = 0.0;
    for (const auto& tr : path) lp += node_lp(logp, U, tr);
    const double p = std::exp(lp);
    total += p;
    for (const auto& tr : path)
      if (tr.k != 0) post[tr.t * (U + 1) + tr.u] += p;
  }
  for (auto& v : post) v /= total;
  return post;
}

/// FastEmit-regularized objective on logits (rows t*(U+1)+u):
///   -log P - lambda * sum_{t,u} c(t,u) log y(t,u)
/// with label-transition posteriors c frozen at `frozen` (enumerated).
inline double fastemit_objective(const Tensor& logits, std::size_t T, const std::vector<int>& y, double lambda,
                                 const std::vector<double>& frozen) {
  const std::size_t U = y.size();
  const Tensor logp = vmtt::log_softmax(logits).reshaped({T, U + 1, logits.cols()});
  double j = rnnt_loss(logp, y);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U; ++u)
      j -= lambda * frozen[t * (U + 1) + u] * node_lp(logp, U, {t, u, static_cast<std::size_t>(y[u])});
  return j;
}

// ---------------------------------------------------------------------------
// Edit distance: plain Wagner-Fischer on cost only, plus a brute-force
// search for the substitution-maximizing optimum.

template <class T>
std::size_t edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Maximum substitutions among minimum-cost alignments, by memoized recursion.
template <class T>
std::size_t max_substitutions(const std::vector<T>& a, const std::vector<T>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<long>> memo(n + 1, std::vector<long>(m + 1, -1));
  std::vector<std::vector<std::size_t>> cost(n + 1, std::vector<std::size_t>(m + 1));
  for (std::size_t i = 0; i <= n; ++i)
    for (std::size_t j = 0; j <= m; ++j)
      cost[i][j] = edit_distance(std::vector<T>(a.begin() + static_cast<long>(i), a.end()),
                                 std::vector<T>(b.begin() + static_cast<long>(j), b.end()));
  std::function<long(std::size_t, std::size_t)> best = [&](std::size_t i, std::size_t j) -> long {
    if (i == n || j == m) return 0;
    if (memo[i][j] >= 0) return memo[i][j];
    long r = -1;
    const std::size_t c = cost[i][j];
    const bool same = a[i] == b[j];
    if (cost[i + 1][j + 1] + (same ? 0 : 1) == c) r = std::max(r, best(i + 1, j + 1) + (same ? 0 : 1));
    if (cost[i + 1][j] + 1 == c) r = std::max(r, best(i + 1, j));
    if (cost[i][j + 1] + 1 == c) r = std::max(r, best(i, j + 1));
    return memo[i][j] = r;
  };
  return static_cast<std::size_t>(best(0, 0));
}

}  // namespace oracle
