#pragma once

// Second pass: re-encode the utterance once with a wider acoustic context
// and rescore each first-pass hypothesis, reusing its label-encoder rows.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>

#include "vmtt/decoder.hpp"
#include "vmtt/masking.hpp"
#include "vmtt/model.hpp"

namespace vmtt {

struct RescoreConfig {
  MaskConfig wide_cfg;
  bool reuse_label_cache = true;
  ScoreMode mode = ScoreMode::FullSum;
};

/// Chunk length in encoder frames for a duration in seconds (60 ms frames).
inline std::size_t seconds_to_frames(double seconds) {
  const double frames = seconds * 1000.0 / kFrameMs;
  const double rounded = std::round(frames);
  if (rounded < 1.0 || std::abs(frames - rounded) > 1e-9)
    throw std::invalid_argument("seconds_to_frames: duration is not a positive multiple of 60 ms");
  return static_cast<std::size_t>(rounded);
}

/// Wide chunk config used for rescoring: chunked future, same past policy.
inline MaskConfig widened(const MaskConfig& first_pass, std::size_t wide_chunk_frames) {
  MaskConfig w = first_pass;
  w.future = ChunkedFuture{};
  w.chunk_frames = wide_chunk_frames;
  return w;
}

/// True when the wide config sees at least as far ahead as the first pass
/// for every frame of an utterance of `seq_len` frames.
inline bool widens(const MaskConfig& first_pass, const MaskConfig& wide, std::size_t n_layers, std::size_t seq_len) {
  for (std::size_t t = 0; t < seq_len; ++t)
    if (receptive_field(wide, n_layers, t, seq_len).latest < receptive_field(first_pass, n_layers, t, seq_len).latest)
      return false;
  return true;
}

/// Score of `tokens` against precomputed acoustic encodings.
inline double score_hypothesis(const Tensor& acoustic, std::span<const int> tokens, const TransducerModel& model,
                               const Tensor* cached_labels = nullptr, ScoreMode mode = ScoreMode::FullSum) {
  if (cached_labels) {
    if (cached_labels->rows() != tokens.size() + 1)
      throw std::invalid_argument("score_hypothesis: cached label rows do not match hypothesis length");
    return sequence_log_prob(model, acoustic, *cached_labels, tokens, mode);
  }
  NoGradGuard ng;
  const Tensor labels = model.label_encode(tokens).value();
  return sequence_log_prob(model, acoustic, labels, tokens, mode);
}

/// Encodes `features` under `cfg` and scores `tokens`.
inline double score_hypothesis(const Tensor& features, std::span<const int> tokens, const TransducerModel& model,
                               const MaskConfig& cfg, const Tensor* cached_labels = nullptr,
                               ScoreMode mode = ScoreMode::FullSum) {
  NoGradGuard ng;
  const Tensor enc = model.acoustic_encode(Var::constant(features), cfg).value();
  return score_hypothesis(enc, tokens, model, cached_labels, mode);
}

/// Rescores every hypothesis against a single wide-context encoding and
/// re-sorts; first-pass scores and ranks are kept on each hypothesis.
inline NBestList rescore_nbest(const Tensor& features, const NBestList& nbest, const TransducerModel& model,
                               const RescoreConfig& rc) {
  if (nbest.hypotheses.empty()) throw std::invalid_argument("rescore_nbest: empty n-best list");
  NoGradGuard ng;
  const Tensor enc = model.acoustic_encode(Var::constant(features), rc.wide_cfg).value();
  NBestList out = nbest;
  for (std::size_t i = 0; i < out.hypotheses.size(); ++i) {
    auto& h = out.hypotheses[i];
    h.first_pass_score = h.score;
    h.first_pass_rank = i;
    const Tensor* cache = rc.reuse_label_cache && h.label_encoding ? &*h.label_encoding : nullptr;
    h.score = score_hypothesis(enc, h.tokens, model, cache, rc.mode);
  }
  sort_nbest(out);
  return out;
}

}  // namespace vmtt
