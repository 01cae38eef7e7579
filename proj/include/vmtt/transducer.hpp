#pragma once

// RNN-T lattice, forward-backward loss with analytic logit gradients, and
// the FastEmit gradient adjustment.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vmtt/model.hpp"
#include "vmtt/tensor.hpp"

namespace vmtt {

struct LossConfig {
  double fastemit_lambda = 0.0;

  void validate() const {
    if (!(fastemit_lambda >= 0.0)) throw std::invalid_argument("LossConfig: fastemit_lambda must be >= 0");
  }
};

/// Output log-distributions over the (t, u) grid plus forward/backward
/// variables. logp has shape {T, U+1, V+1}; alpha/beta are T x (U+1).
struct Lattice {
  Tensor logp;
  std::vector<int> labels;
  Tensor alpha;
  Tensor beta;

  std::size_t frames() const { return logp.shape().at(0); }
  std::size_t label_count() const { return labels.size(); }
  std::size_t output_dim() const { return logp.shape().at(2); }

  double lp(std::size_t t, std::size_t u, std::size_t k) const {
    return logp[(t * (labels.size() + 1) + u) * output_dim() + k];
  }
  double blank(std::size_t t, std::size_t u) const { return lp(t, u, kBlank); }
  double emit(std::size_t t, std::size_t u) const { return lp(t, u, static_cast<std::size_t>(labels[u])); }
};

/// Validates shapes, label range and per-node normalization.
inline Lattice make_lattice(Tensor logp, std::vector<int> labels, double tolerance = 1e-8) {
  if (logp.rank() != 3) throw std::invalid_argument("lattice: logp must have shape {T, U+1, V+1}");
  const std::size_t T = logp.shape()[0], U1 = logp.shape()[1], V1 = logp.shape()[2];
  if (T == 0) throw std::invalid_argument("lattice: T must be >= 1");
  if (U1 != labels.size() + 1) throw std::invalid_argument("lattice: logp second dimension must be U+1");
  if (V1 < 2) throw std::invalid_argument("lattice: output dimension must include blank and >= 1 token");
  for (int y : labels)
    if (y < 1 || static_cast<std::size_t>(y) >= V1) throw std::out_of_range("lattice: label id out of range");
  for (std::size_t r = 0; r < T * U1; ++r) {
    const double lse = log_sum_exp(std::span<const double>(logp.data().data() + r * V1, V1));
    if (!(std::abs(lse) <= tolerance))
      throw std::invalid_argument("lattice: node " + std::to_string(r) + " is not normalized (logsumexp " +
                                  std::to_string(lse) + ")");
  }
  Lattice lat;
  lat.logp = std::move(logp);
  lat.labels = std::move(labels);
  return lat;
}

/// Builds a lattice from joint logits laid out as rows t*(U+1)+u.
inline Lattice lattice_from_logits(const Tensor& logits, std::size_t T, std::vector<int> labels) {
  const std::size_t U1 = labels.size() + 1;
  if (T == 0 && !labels.empty()) throw std::invalid_argument("lattice: U > 0 with T = 0");
  if (logits.rows() != T * U1) throw std::invalid_argument("lattice: logits rows must equal T*(U+1)");
  Tensor lp = log_softmax(logits);
  return make_lattice(lp.reshaped({T, U1, logits.cols()}), std::move(labels));
}

/// Forward variables; returns log P(y|x).
inline double compute_alpha(Lattice& lat) {
  const std::size_t T = lat.frames(), U = lat.label_count();
  lat.alpha = Tensor::matrix(T, U + 1, -INFINITY);
  auto& a = lat.alpha;
  a(0, 0) = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) continue;
      double v = -INFINITY;
      if (t > 0) v = a(t - 1, u) + lat.blank(t - 1, u);
      if (u > 0) v = log_add_exp(v, a(t, u - 1) + lat.emit(t, u - 1));
      a(t, u) = v;
    }
  return a(T - 1, U) + lat.blank(T - 1, U);
}

/// Backward variables (log-probability of completing from (t, u), including
/// the emission at (t, u)); returns log P(y|x).
inline double compute_beta(Lattice& lat) {
  const std::size_t T = lat.frames(), U = lat.label_count();
  lat.beta = Tensor::matrix(T, U + 1, -INFINITY);
  auto& b = lat.beta;
  b(T - 1, U) = lat.blank(T - 1, U);
  for (std::size_t ti = T; ti-- > 0;)
    for (std::size_t ui = U + 1; ui-- > 0;) {
      if (ti == T - 1 && ui == U) continue;
      double v = -INFINITY;
      if (ti + 1 < T) v = b(ti + 1, ui) + lat.blank(ti, ui);
      if (ui < U) v = log_add_exp(v, b(ti, ui + 1) + lat.emit(ti, ui));
      b(ti, ui) = v;
    }
  return b(0, 0);
}

/// Posterior probabilities of the blank and label transitions leaving each
/// node (requires alpha and beta).
struct TransitionPosteriors {
  Tensor blank;  // T x (U+1)
  Tensor label;  // T x (U+1), zero in the last column
};

inline TransitionPosteriors transition_posteriors(const Lattice& lat, double log_z) {
  const std::size_t T = lat.frames(), U = lat.label_count();
  TransitionPosteriors p{Tensor::matrix(T, U + 1), Tensor::matrix(T, U + 1)};
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      const double a = lat.alpha(t, u);
      if (t + 1 < T) p.blank(t, u) = std::exp(a + lat.blank(t, u) + lat.beta(t + 1, u) - log_z);
      else if (u == U) p.blank(t, u) = std::exp(a + lat.blank(t, u) - log_z);
      if (u < U) p.label(t, u) = std::exp(a + lat.emit(t, u) + lat.beta(t, u + 1) - log_z);
    }
  return p;
}

struct RnntResult {
  double loss = 0.0;
  Tensor dlogits;  // {T, U+1, V+1}
};

/// Negative log-likelihood and its gradient with respect to the logits that
/// produced lattice.logp through log_softmax. Fills alpha and beta.
inline RnntResult rnnt_loss(Lattice& lat) {
  const double log_z = compute_alpha(lat);
  compute_beta(lat);
  if (!std::isfinite(log_z)) throw std::domain_error("rnnt_loss: sequence has zero probability");
  const std::size_t T = lat.frames(), U = lat.label_count(), V1 = lat.output_dim();
  const auto post = transition_posteriors(lat, log_z);
  RnntResult r;
  r.loss = -log_z;
  r.dlogits = Tensor({T, U + 1, V1});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      const double occ = post.blank(t, u) + post.label(t, u);
      double* g = r.dlogits.data().data() + (t * (U + 1) + u) * V1;
      for (std::size_t k = 0; k < V1; ++k) g[k] = occ * std::exp(lat.lp(t, u, k));
      g[kBlank] -= post.blank(t, u);
      if (u < U) g[static_cast<std::size_t>(lat.labels[u])] -= post.label(t, u);
    }
  return r;
}

/// Scales the gradient flowing through every label (u-advancing) transition
/// by (1 + lambda); blank transitions are untouched. Requires alpha/beta.
inline Tensor fastemit_adjust(const Lattice& lat, const Tensor& grads, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("fastemit_adjust: lambda must be >= 0");
  if (lambda == 0.0) return grads;
  if (lat.alpha.empty() || lat.beta.empty()) throw std::logic_error("fastemit_adjust: lattice lacks alpha/beta");
  const std::size_t T = lat.frames(), U = lat.label_count(), V1 = lat.output_dim();
  if (grads.size() != T * (U + 1) * V1) throw std::invalid_argument("fastemit_adjust: gradient shape mismatch");
  const double log_z = lat.beta(0, 0);
  const auto post = transition_posteriors(lat, log_z);
  Tensor out = grads;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U; ++u) {
      const double extra = lambda * post.label(t, u);
      double* g = out.data().data() + (t * (U + 1) + u) * V1;
      for (std::size_t k = 0; k < V1; ++k) g[k] += extra * std::exp(lat.lp(t, u, k));
      g[static_cast<std::size_t>(lat.labels[u])] -= extra;
    }
  return out;
}

/// Best single alignment log-probability.
inline double viterbi_log_prob(const Lattice& lat) {
  const std::size_t T = lat.frames(), U = lat.label_count();
  Tensor a = Tensor::matrix(T, U + 1, -INFINITY);
  a(0, 0) = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) continue;
      double v = -INFINITY;
      if (t > 0) v = a(t - 1, u) + lat.blank(t - 1, u);
      if (u > 0) v = std::max(v, a(t, u - 1) + lat.emit(t, u - 1));
      a(t, u) = v;
    }
  return a(T - 1, U) + lat.blank(T - 1, U);
}

/// Differentiable RNN-T loss on joint logits (rows t*(U+1)+u). With
/// fastemit_lambda > 0 the backward pass uses the FastEmit gradient; the
/// forward value is always -log P(y|x).
inline Var rnnt_loss(const Var& logits, std::size_t T, std::span<const int> labels, const LossConfig& cfg = {}) {
  cfg.validate();
  Lattice lat = lattice_from_logits(logits.value(), T, std::vector<int>(labels.begin(), labels.end()));
  RnntResult r = rnnt_loss(lat);
  Tensor grad = fastemit_adjust(lat, r.dlogits, cfg.fastemit_lambda);
  auto ln = logits.node();
  return detail::make_result(Tensor({1, 1}, std::vector<double>{r.loss}), {logits}, "rnnt_loss",
                             [ln, grad = std::move(grad)](Node& self) {
                               if (auto* g = detail::grad_of(ln))
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0] * grad[i];
                             });
}

/// Encoders + joint + loss for one utterance.
inline Var utterance_loss(const TransducerModel& model, const Tensor& features, std::span<const int> tokens,
                          const MaskConfig& mask_cfg, const LossConfig& loss_cfg) {
  Var enc = model.acoustic_encode(Var::constant(features), mask_cfg);
  Var lab = model.label_encode(tokens);
  Var logits = model.joint().lattice(enc, lab);
  return rnnt_loss(logits, enc.rows(), tokens, loss_cfg);
}

}  // namespace vmtt
