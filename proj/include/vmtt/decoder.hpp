#pragma once

// Frame-synchronous transducer decoding over streamed encoder output, with
// per-token emission times measured as audio consumed by the encoder.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "vmtt/masking.hpp"
#include "vmtt/model.hpp"
#include "vmtt/tensor.hpp"
#include "vmtt/transducer.hpp"

namespace vmtt {

struct TimedHypothesis {
  std::vector<int> tokens;
  double score = 0.0;
  std::vector<double> emit_audio_ms;
  std::optional<double> first_pass_score;
  std::optional<std::size_t> first_pass_rank;
  /// Label-encoder rows (U+1 x d_model) computed while decoding.
  std::optional<Tensor> label_encoding;
};

struct NBestList {
  std::vector<TimedHypothesis> hypotheses;
  std::size_t n = 0;
};

struct PartialSnapshot {
  double audio_consumed_ms = 0.0;
  std::vector<int> tokens;
  friend bool operator==(const PartialSnapshot&, const PartialSnapshot&) = default;
};

struct PartialTrace {
  std::vector<PartialSnapshot> snapshots;
};

/// Encoder frames as a streaming session would produce them.
struct StreamedEncoding {
  Tensor frames;                    // T x d_model
  std::vector<double> available_ms;  // audio consumed when frame t became available
  std::vector<std::size_t> step_frames;  // frames available after each processing step
  std::vector<double> step_audio_ms;     // audio consumed after each step
};

/// Runs the acoustic encoder incrementally. Chunked and strictly causal
/// configurations use the cached streaming path; bounded fixed look-ahead
/// re-encodes the received prefix each step and releases a frame once its
/// whole receptive field has arrived.
inline StreamedEncoding stream_encode(const TransducerModel& model, const Tensor& features, const MaskConfig& cfg) {
  cfg.validate();
  const auto& ecfg = model.config().acoustic;
  const std::size_t factor = ecfg.downsample_factor;
  const std::size_t total_in = features.rows();
  if (total_in == 0) throw std::invalid_argument("stream_encode: empty input");
  const std::size_t total_out = ecfg.output_frames(total_in);
  StreamedEncoding out;
  out.frames = Tensor::matrix(0, ecfg.d_model);

  const std::size_t step = cfg.chunk();
  const bool whole = step >= kFullContextChunk;
  const std::size_t step_in = whole ? total_in : step * factor;

  if (cfg.streamable()) {
    StreamState state = model.acoustic().start_stream();
    std::size_t pos = 0;
    while (pos < total_in) {
      const std::size_t len = std::min(step_in, total_in - pos);
      const bool final = pos + len >= total_in;
      Tensor enc = model.acoustic().encode_chunk(features.slice_rows(pos, pos + len), state, cfg, final);
      pos += len;
      const double ms = static_cast<double>(pos) * kInputFrameMs;
      out.frames = vconcat(out.frames, enc);
      out.available_ms.insert(out.available_ms.end(), enc.rows(), ms);
      out.step_frames.push_back(out.frames.rows());
      out.step_audio_ms.push_back(ms);
    }
    return out;
  }

  // Fixed look-ahead: recompute on the prefix.
  NoGradGuard no_grad;
  std::size_t pos = 0, released = 0;
  std::vector<std::size_t> latest(total_out);
  for (std::size_t t = 0; t < total_out; ++t) latest[t] = receptive_field(cfg, ecfg.n_layers, t, total_out).latest;
  while (pos < total_in) {
    pos = std::min(total_in, pos + step_in);
    const bool final = pos >= total_in;
    const std::size_t have = final ? total_out : pos / factor;
    std::size_t ready = released;
    while (ready < total_out && (final || latest[ready] < have)) ++ready;
    if (ready > released) {
      Var prefix = model.acoustic().encode(Var::constant(features.slice_rows(0, pos)), cfg);
      Tensor rows = prefix.value().slice_rows(released, ready);
      out.frames = vconcat(out.frames, rows);
      out.available_ms.insert(out.available_ms.end(), ready - released, static_cast<double>(pos) * kInputFrameMs);
      released = ready;
    }
    out.step_frames.push_back(released);
    out.step_audio_ms.push_back(static_cast<double>(pos) * kInputFrameMs);
  }
  return out;
}

/// Joint evaluation on plain tensors for search (no graph).
class JointScorer {
 public:
  explicit JointScorer(const TransducerModel& model) : model_(model) {}

  /// Acoustic projections for all frames (T x d_joint).
  Tensor project_acoustic(const Tensor& enc) const {
    NoGradGuard ng;
    return model_.joint().acoustic_proj(Var::constant(enc)).value();
  }

  Tensor project_label(const Tensor& label_row) const {
    NoGradGuard ng;
    return model_.joint().label_proj(Var::constant(label_row)).value();
  }

  /// log-softmax over the V+1 outputs for one (frame, label) pair.
  std::vector<double> log_probs(std::span<const double> acoustic_proj, const Tensor& label_proj) const {
    const auto& w = model_.joint().output.weight.value();
    const auto& b = model_.joint().output.bias.value();
    const std::size_t dj = w.rows(), V1 = w.cols();
    std::vector<double> h(dj);
    for (std::size_t j = 0; j < dj; ++j) h[j] = std::tanh(acoustic_proj[j] + label_proj[j]);
    std::vector<double> logits(b.data().begin(), b.data().end());
    for (std::size_t j = 0; j < dj; ++j) {
      const double hj = h[j];
      for (std::size_t k = 0; k < V1; ++k) logits[k] += hj * w(j, k);
    }
    const double lse = log_sum_exp(logits);
    for (auto& v : logits) v -= lse;
    return logits;
  }

 private:
  const TransducerModel& model_;
};

/// Full-sum (or best-path) log P(tokens | acoustic encodings) given the
/// label-encoder rows for those tokens.
enum class ScoreMode { FullSum, Viterbi };

inline double sequence_log_prob(const TransducerModel& model, const Tensor& acoustic, const Tensor& label_rows,
                                std::span<const int> tokens, ScoreMode mode = ScoreMode::FullSum) {
  if (label_rows.rows() != tokens.size() + 1)
    throw std::invalid_argument("sequence_log_prob: label rows do not match token count");
  NoGradGuard ng;
  Var logits = model.joint().lattice(Var::constant(acoustic), Var::constant(label_rows));
  Lattice lat = lattice_from_logits(logits.value(), acoustic.rows(), std::vector<int>(tokens.begin(), tokens.end()));
  return mode == ScoreMode::FullSum ? compute_alpha(lat) : viterbi_log_prob(lat);
}

namespace detail {
inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}
}  // namespace detail

struct GreedyOptions {
  std::size_t max_symbols_per_frame = 4;
};

/// Greedy search over encoder frames. `snapshot_after` lists frame counts
/// after which a partial result is recorded with the matching audio time.
inline TimedHypothesis greedy_search(const TransducerModel& model, const Tensor& enc, std::span<const double> frame_ms,
                                     const GreedyOptions& opt, PartialTrace* trace = nullptr,
                                     std::span<const std::size_t> snapshot_after = {},
                                     std::span<const double> snapshot_ms = {}) {
  const JointScorer scorer(model);
  const auto& le = model.label();
  const auto& lmask = model.config().label_mask;
  const Tensor pa = scorer.project_acoustic(enc);
  LabelState state = le.start();
  Tensor row = le.step(state, 0, lmask);
  Tensor rows = row;
  Tensor pl = scorer.project_label(row);
  TimedHypothesis hyp;
  std::size_t next_snap = 0;
  auto snap_upto = [&](std::size_t frames_done) {
    while (trace && next_snap < snapshot_after.size() && snapshot_after[next_snap] <= frames_done) {
      trace->snapshots.push_back(PartialSnapshot{snapshot_ms[next_snap], hyp.tokens});
      ++next_snap;
    }
  };
  snap_upto(0);
  for (std::size_t t = 0; t < enc.rows(); ++t) {
    for (std::size_t s = 0;; ++s) {
      const auto lp = scorer.log_probs(pa.row(t), pl);
      const std::size_t k = detail::argmax(lp);
      if (s == opt.max_symbols_per_frame || k == static_cast<std::size_t>(kBlank)) {
        hyp.score += lp[kBlank];
        break;
      }
      hyp.score += lp[k];
      hyp.tokens.push_back(static_cast<int>(k));
      hyp.emit_audio_ms.push_back(frame_ms.empty() ? 0.0 : frame_ms[t]);
      row = le.step(state, static_cast<int>(k), lmask);
      rows = vconcat(rows, row);
      pl = scorer.project_label(row);
    }
    snap_upto(t + 1);
  }
  hyp.label_encoding = std::move(rows);
  return hyp;
}

/// Greedy decoding as a streaming session sees it: one partial snapshot per
/// processing step.
inline std::pair<TimedHypothesis, PartialTrace> greedy_decode_streaming(const Tensor& features,
                                                                        const TransducerModel& model,
                                                                        const MaskConfig& cfg,
                                                                        std::size_t max_symbols_per_frame = 4) {
  const StreamedEncoding s = stream_encode(model, features, cfg);
  PartialTrace trace;
  TimedHypothesis hyp = greedy_search(model, s.frames, s.available_ms, GreedyOptions{max_symbols_per_frame}, &trace,
                                      s.step_frames, s.step_audio_ms);
  return {std::move(hyp), std::move(trace)};
}

/// Greedy decoding of the offline (whole-utterance) masked encoding.
inline TimedHypothesis greedy_decode_offline(const Tensor& features, const TransducerModel& model,
                                             const MaskConfig& cfg, std::size_t max_symbols_per_frame = 4) {
  NoGradGuard ng;
  const Tensor enc = model.acoustic().encode(Var::constant(features), cfg).value();
  std::vector<double> ms(enc.rows(), static_cast<double>(features.rows()) * kInputFrameMs);
  return greedy_search(model, enc, ms, GreedyOptions{max_symbols_per_frame});
}

// ---------------------------------------------------------------------------
// Beam search

struct BeamOptions {
  std::size_t beam = 4;
  std::size_t n_best = 4;
  std::size_t max_symbols_per_frame = 4;
  /// Hypotheses further than this (in nats) below the best are dropped.
  double score_gap = 20.0;
};

namespace detail {
struct BeamEntry {
  std::vector<int> tokens;
  double score = 0.0;
  std::vector<double> emit_ms;
  LabelState state;
  Tensor rows;  // label-encoder rows so far
  Tensor label_proj;
};

inline void merge_into(std::map<std::vector<int>, BeamEntry>& set, BeamEntry&& e, double score) {
  auto it = set.find(e.tokens);
  if (it == set.end()) {
    e.score = score;
    set.emplace(e.tokens, std::move(e));
    return;
  }
  BeamEntry& cur = it->second;
  if (score > cur.score) {
    // keep timing of the stronger contributor
    const double merged = log_add_exp(cur.score, score);
    cur.emit_ms = std::move(e.emit_ms);
    cur.score = merged;
  } else {
    cur.score = log_add_exp(cur.score, score);
  }
}

inline std::vector<BeamEntry> top_entries(std::map<std::vector<int>, BeamEntry>&& set, std::size_t beam,
                                          double gap) {
  std::vector<BeamEntry> v;
  v.reserve(set.size());
  for (auto& [_, e] : set) v.push_back(std::move(e));
  std::stable_sort(v.begin(), v.end(), [](const BeamEntry& a, const BeamEntry& b) { return a.score > b.score; });
  if (v.size() > beam) v.resize(beam);
  if (!v.empty()) {
    const double best = v.front().score;
    while (v.size() > 1 && v.back().score < best - gap) v.pop_back();
  }
  return v;
}
}  // namespace detail

/// Frame-synchronous beam search over already computed encoder frames.
/// Within a frame, blank (advance) and token (stay) extensions compete for
/// the same beam; hypotheses with identical token sequences are merged by
/// log-sum-exp. Returned scores are the search scores.
inline NBestList beam_search_frames(const TransducerModel& model, const Tensor& enc, std::span<const double> frame_ms,
                                    const BeamOptions& opt) {
  if (opt.beam < opt.n_best || opt.n_best < 1) throw std::invalid_argument("beam_search: need beam >= n >= 1");
  const JointScorer scorer(model);
  const auto& le = model.label();
  const auto& lmask = model.config().label_mask;
  const std::size_t V1 = model.config().output_dim();
  const Tensor pa = scorer.project_acoustic(enc);

  std::vector<detail::BeamEntry> active(1);
  {
    auto& e = active.front();
    e.state = le.start();
    e.rows = le.step(e.state, 0, lmask);
    e.label_proj = scorer.project_label(e.rows);
  }

  for (std::size_t t = 0; t < enc.rows(); ++t) {
    std::map<std::vector<int>, detail::BeamEntry> finished;
    std::vector<detail::BeamEntry> current = std::move(active);
    for (std::size_t s = 0; !current.empty(); ++s) {
      struct Cand {
        std::size_t parent;
        std::size_t symbol;
        double score;
      };
      std::vector<Cand> cands;
      for (std::size_t i = 0; i < current.size(); ++i) {
        const auto lp = scorer.log_probs(pa.row(t), current[i].label_proj);
        cands.push_back({i, static_cast<std::size_t>(kBlank), current[i].score + lp[kBlank]});
        if (s < opt.max_symbols_per_frame)
          for (std::size_t k = 1; k < V1; ++k) cands.push_back({i, k, current[i].score + lp[k]});
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
      if (cands.size() > opt.beam) cands.resize(opt.beam);
      const double best = cands.front().score;
      std::vector<detail::BeamEntry> next;
      for (const auto& c : cands) {
        if (c.score < best - opt.score_gap) break;
        const auto& parent = current[c.parent];
        if (c.symbol == static_cast<std::size_t>(kBlank)) {
          detail::BeamEntry e = parent;
          detail::merge_into(finished, std::move(e), c.score);
        } else {
          detail::BeamEntry e;
          e.tokens = parent.tokens;
          e.tokens.push_back(static_cast<int>(c.symbol));
          e.emit_ms = parent.emit_ms;
          e.emit_ms.push_back(frame_ms.empty() ? 0.0 : frame_ms[t]);
          e.state = parent.state;
          Tensor row = le.step(e.state, static_cast<int>(c.symbol), lmask);
          e.rows = vconcat(parent.rows, row);
          e.label_proj = scorer.project_label(row);
          e.score = c.score;
          next.push_back(std::move(e));
        }
      }
      // Extensions only lose probability; stop once the finished set is
      // full and beats every live extension.
      if (finished.size() >= opt.beam && !next.empty()) {
        std::vector<double> fs;
        for (const auto& [_, e] : finished) fs.push_back(e.score);
        std::nth_element(fs.begin(), fs.begin() + static_cast<std::ptrdiff_t>(opt.beam - 1), fs.end(),
                         std::greater<>());
        const double kth = fs[opt.beam - 1];
        std::erase_if(next, [&](const detail::BeamEntry& e) { return e.score < kth; });
      }
      current = std::move(next);
    }
    active = detail::top_entries(std::move(finished), opt.beam, opt.score_gap);
  }

  NBestList out;
  out.n = opt.n_best;
  for (auto& e : active) {
    if (out.hypotheses.size() == opt.n_best) break;
    TimedHypothesis h;
    h.tokens = std::move(e.tokens);
    h.score = e.score;
    h.emit_audio_ms = std::move(e.emit_ms);
    h.label_encoding = std::move(e.rows);
    out.hypotheses.push_back(std::move(h));
  }
  return out;
}

inline void sort_nbest(NBestList& list) {
  std::stable_sort(list.hypotheses.begin(), list.hypotheses.end(),
                   [](const TimedHypothesis& a, const TimedHypothesis& b) { return a.score > b.score; });
}

/// First-pass n-best: beam search over the streamed encoding, then every
/// surviving hypothesis is scored by its exact full-sum log-probability
/// under the offline encoding for `cfg` and the list re-sorted.
inline NBestList beam_search(const Tensor& features, const TransducerModel& model, const MaskConfig& cfg,
                             const BeamOptions& opt) {
  const StreamedEncoding s = stream_encode(model, features, cfg);
  NBestList list = beam_search_frames(model, s.frames, s.available_ms, opt);
  NoGradGuard ng;
  const Tensor enc = model.acoustic_encode(Var::constant(features), cfg).value();
  for (auto& h : list.hypotheses) h.score = sequence_log_prob(model, enc, *h.label_encoding, h.tokens);
  sort_nbest(list);
  return list;
}

}  // namespace vmtt
