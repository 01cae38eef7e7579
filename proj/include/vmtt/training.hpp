#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmtt/masking.hpp"
#include "vmtt/model.hpp"
#include "vmtt/rng.hpp"
#include "vmtt/transducer.hpp"
#include "vmtt/utterance.hpp"

namespace vmtt {

/// Thrown when a training step produces a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Plain SGD with an exponentially decaying learning rate; momentum and
/// global-norm clipping are off unless set.
struct OptimizerConfig {
  double learning_rate = 0.05;
  double lr_decay = 1.0;  // multiplier applied per step
  double momentum = 0.0;
  double grad_clip = 0.0;  // 0 disables

  double rate_at(std::size_t step) const { return learning_rate * std::pow(lr_decay, static_cast<double>(step)); }
};

struct OptimizerState {
  std::vector<Tensor> velocity;
  std::size_t step = 0;
};

struct StepResult {
  double mean_loss = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
  MaskConfig mask;
};

/// One update with a given mask configuration applied to every utterance
/// and every encoder layer. Loss is the mean over the batch.
inline StepResult training_step(std::span<const Utterance* const> batch, TransducerModel& model,
                                const MaskConfig& mask_cfg, const LossConfig& loss_cfg, const OptimizerConfig& opt,
                                OptimizerState& state) {
  if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
  auto& ps = model.params();
  ps.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const Utterance* utt : batch) {
    auto diverged = [&](const std::string& what) {
      std::ostringstream os;
      os << "training diverged at step " << state.step << " on utterance '" << utt->id << "' with mask "
         << mask_cfg.describe() << ": " << what;
      return DivergenceError(os.str());
    };
    Var loss;
    try {
      loss = utterance_loss(model, utt->features, utt->tokens, mask_cfg, loss_cfg);
    } catch (const std::domain_error& e) {
      throw diverged(e.what());
    }
    if (!std::isfinite(loss.item())) throw diverged("loss " + std::to_string(loss.item()));
    total += loss.item();
    backward(scale(loss, inv_b));
  }

  const auto vars = ps.vars();
  double sq = 0.0;
  for (const auto& v : vars)
    if (v.has_grad())
      for (double g : v.grad().data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    std::ostringstream os;
    os << "training diverged at step " << state.step << ": non-finite gradient norm with mask " << mask_cfg.describe();
    throw DivergenceError(os.str());
  }
  const double clip = (opt.grad_clip > 0.0 && norm > opt.grad_clip) ? opt.grad_clip / norm : 1.0;
  const double lr = opt.rate_at(state.step);

  if (state.velocity.size() != vars.size()) {
    state.velocity.clear();
    for (const auto& v : vars) state.velocity.emplace_back(v.shape(), 0.0);
  }
  for (std::size_t i = 0; i < vars.size(); ++i) {
    Var v = vars[i];
    if (!v.has_grad()) continue;
    auto& w = v.mutable_value();
    auto& vel = state.velocity[i];
    const auto& g = v.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double step = clip * g[j];
      if (opt.momentum > 0.0) {
        vel[j] = opt.momentum * vel[j] + step;
        w[j] -= lr * vel[j];
      } else {
        w[j] -= lr * step;
      }
    }
  }
  ++state.step;
  return StepResult{total * inv_b, norm, lr, mask_cfg};
}

/// Samples one configuration for the whole batch, then updates.
inline StepResult training_step(std::span<const Utterance* const> batch, TransducerModel& model,
                                const VariableMaskSet& mask_set, Rng& mask_rng, const LossConfig& loss_cfg,
                                const OptimizerConfig& opt, OptimizerState& state) {
  const MaskConfig cfg = sample_config(mask_set, mask_rng);
  return training_step(batch, model, cfg, loss_cfg, opt, state);
}

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  OptimizerConfig optimizer;
  LossConfig loss;
  std::uint64_t seed = 1;
};

/// Deterministic training loop: batches come from seeded epoch shuffles,
/// masks from an independent seeded stream.
class Trainer {
 public:
  Trainer(TransducerModel& model, std::span<const Utterance> data, VariableMaskSet mask_set, TrainConfig cfg)
      : model_(model),
        data_(data),
        mask_set_(std::move(mask_set)),
        cfg_(cfg),
        batch_rng_(Rng::derive(cfg.seed, 1)),
        mask_rng_(Rng::derive(cfg.seed, 2)) {
    if (data_.empty()) throw std::invalid_argument("Trainer: no training data");
    if (cfg_.batch_size == 0) throw std::invalid_argument("Trainer: batch_size must be >= 1");
    mask_set_.validate();
    cfg_.loss.validate();
  }

  StepResult step() {
    std::vector<const Utterance*> batch;
    batch.reserve(cfg_.batch_size);
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) batch.push_back(&data_[next_index()]);
    return training_step(std::span<const Utterance* const>(batch), model_, mask_set_, mask_rng_, cfg_.loss,
                         cfg_.optimizer, state_);
  }

  /// Runs cfg.steps updates; `on_step` sees (step index, result).
  std::vector<StepResult> run(const std::function<void(std::size_t, const StepResult&)>& on_step = {}) {
    std::vector<StepResult> out;
    out.reserve(cfg_.steps);
    for (std::size_t s = 0; s < cfg_.steps; ++s) {
      out.push_back(step());
      if (on_step) on_step(s, out.back());
    }
    return out;
  }

  const OptimizerState& optimizer_state() const { return state_; }

 private:
  std::size_t next_index() {
    if (cursor_ >= order_.size()) {
      order_.resize(data_.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[batch_rng_.index(i)]);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

  TransducerModel& model_;
  std::span<const Utterance> data_;
  VariableMaskSet mask_set_;
  TrainConfig cfg_;
  Rng batch_rng_;
  Rng mask_rng_;
  OptimizerState state_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace vmtt
