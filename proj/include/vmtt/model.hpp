#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>

#include "vmtt/encoders.hpp"
#include "vmtt/layers.hpp"
#include "vmtt/masking.hpp"
#include "vmtt/rng.hpp"

namespace vmtt {

/// Output index of the blank symbol; tokens occupy 1..vocab_size.
inline constexpr int kBlank = 0;

struct ModelConfig {
  EncoderConfig acoustic;
  LabelEncoderConfig label;
  LabelMaskConfig label_mask;
  std::size_t d_joint = 64;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  std::size_t vocab_size() const { return label.vocab_size; }
  std::size_t output_dim() const { return label.vocab_size + 1; }

  void validate() const {
    acoustic.validate();
    label.validate();
    if (acoustic.d_model != label.d_model) throw std::invalid_argument("ModelConfig: encoder widths differ");
    if (d_joint < 1) throw std::invalid_argument("ModelConfig: d_joint must be >= 1");
  }

  /// Desk-scale defaults: 2 Conformer blocks, d_model 64, 4 heads, 2-layer
  /// label encoder.
  static ModelConfig desk(std::size_t vocab_size, std::size_t input_dim) {
    ModelConfig c;
    c.acoustic.input_dim = input_dim;
    c.label.vocab_size = vocab_size;
    return c;
  }

  /// Very small shapes for finite-difference checks.
  static ModelConfig tiny(std::size_t vocab_size, std::size_t input_dim) {
    ModelConfig c;
    c.acoustic = EncoderConfig{input_dim, 2, 8, 2, 2, 3, 6, 3};
    c.label = LabelEncoderConfig{vocab_size, 2, 8, 2, 2, 3};
    c.d_joint = 6;
    return c;
  }
};

/// Joint = Linear(acoustic) + Linear(label); logits = Linear(tanh(Joint)).
struct JointNet {
  Linear acoustic_proj;
  Linear label_proj;
  Linear output;

  static JointNet create(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
    return JointNet{Linear::create(ps, "joint.acoustic", cfg.acoustic.d_model, cfg.d_joint, rng),
                    Linear::create(ps, "joint.label", cfg.label.d_model, cfg.d_joint, rng),
                    Linear::create(ps, "joint.output", cfg.d_joint, cfg.output_dim(), rng)};
  }

  /// Logits for one (acoustic row, label row) pair; both 1 x d_model.
  Var operator()(const Var& a_t, const Var& l_u) const {
    if (a_t.cols() != acoustic_proj.in_dim() || l_u.cols() != label_proj.in_dim())
      throw std::invalid_argument("joint: input width does not match projections");
    return output(tanh(add(acoustic_proj(a_t), label_proj(l_u))));
  }

  /// Logits for every (t, u) pair, row t*(U+1)+u: (T*(U+1)) x (V+1).
  Var lattice(const Var& acoustic, const Var& labels) const {
    return output(tanh(pairwise_add(acoustic_proj(acoustic), label_proj(labels))));
  }
};

/// Downsampler + acoustic encoder + label encoder + joint network.
/// Parameters live in the ParamStore; the model is neither copyable nor
/// movable because Vars alias store entries.
class TransducerModel {
 public:
  TransducerModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    acoustic_ = AcousticEncoder(params_, cfg_.acoustic, rng);
    label_ = LabelEncoder(params_, cfg_.label, rng);
    joint_ = JointNet::create(params_, cfg_, rng);
  }

  TransducerModel(const TransducerModel&) = delete;
  TransducerModel& operator=(const TransducerModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const AcousticEncoder& acoustic() const { return acoustic_; }
  const LabelEncoder& label() const { return label_; }
  const JointNet& joint() const { return joint_; }

  /// Offline masked acoustic encoding; counted for rescoring bookkeeping.
  Var acoustic_encode(const Var& features, const MaskConfig& cfg) const {
    acoustic_calls_.fetch_add(1, std::memory_order_relaxed);
    return acoustic_.encode(features, cfg);
  }

  Var label_encode(std::span<const int> tokens) const { return label_.encode(tokens, cfg_.label_mask); }

  std::size_t acoustic_encode_calls() const { return acoustic_calls_.load(std::memory_order_relaxed); }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  AcousticEncoder acoustic_;
  LabelEncoder label_;
  JointNet joint_;
  mutable std::atomic<std::size_t> acoustic_calls_{0};
};

}  // namespace vmtt
