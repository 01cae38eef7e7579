#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vmtt/decoder.hpp"
#include "vmtt/masking.hpp"
#include "vmtt/utterance.hpp"

namespace vmtt {

struct WerResult {
  double wer = 0.0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t ref_length = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
  friend bool operator==(const WerResult&, const WerResult&) = default;
};

enum class EditOp { Match, Substitute, Delete, Insert };

struct EditStep {
  EditOp op;
  std::size_t ref_index;  // valid unless Insert
  std::size_t hyp_index;  // valid unless Delete
};

/// Minimum-edit alignment. Among equal-cost alignments the one with the
/// most substitutions wins, so swapping ref and hyp swaps D and I exactly.
template <class T>
std::vector<EditStep> edit_alignment(std::span<const T> ref, std::span<const T> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  struct Cell {
    std::size_t cost;
    std::size_t subs;
  };
  auto better = [](Cell a, Cell b) { return a.cost < b.cost || (a.cost == b.cost && a.subs > b.subs); };
  std::vector<Cell> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> Cell& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = {i, 0};
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = {j, 0};
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const bool same = ref[i - 1] == hyp[j - 1];
      Cell best{at(i - 1, j - 1).cost + (same ? 0 : 1), at(i - 1, j - 1).subs + (same ? 0 : 1)};
      const Cell del{at(i - 1, j).cost + 1, at(i - 1, j).subs};
      const Cell ins{at(i, j - 1).cost + 1, at(i, j - 1).subs};
      if (better(del, best)) best = del;
      if (better(ins, best)) best = ins;
      at(i, j) = best;
    }
  std::vector<EditStep> steps;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const Cell cur = at(i, j);
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      const Cell diag = at(i - 1, j - 1);
      if (diag.cost + (same ? 0 : 1) == cur.cost && diag.subs + (same ? 0 : 1) == cur.subs) {
        steps.push_back({same ? EditOp::Match : EditOp::Substitute, i - 1, j - 1});
        --i, --j;
        continue;
      }
    }
    if (i > 0 && at(i - 1, j).cost + 1 == cur.cost && at(i - 1, j).subs == cur.subs) {
      steps.push_back({EditOp::Delete, i - 1, 0});
      --i;
    } else {
      steps.push_back({EditOp::Insert, 0, j - 1});
      --j;
    }
  }
  std::reverse(steps.begin(), steps.end());
  return steps;
}

/// Word error rate; an empty reference divides by 1.
template <class T>
WerResult wer(std::span<const T> ref, std::span<const T> hyp) {
  WerResult r;
  r.ref_length = ref.size();
  for (const auto& s : edit_alignment(ref, hyp)) {
    if (s.op == EditOp::Substitute) ++r.substitutions;
    else if (s.op == EditOp::Delete) ++r.deletions;
    else if (s.op == EditOp::Insert) ++r.insertions;
  }
  r.wer = static_cast<double>(r.errors()) / static_cast<double>(std::max<std::size_t>(ref.size(), 1));
  return r;
}

template <class T>
WerResult wer(const std::vector<T>& ref, const std::vector<T>& hyp) {
  return wer(std::span<const T>(ref), std::span<const T>(hyp));
}

/// Pools counts over utterances; WER is total errors over total reference length.
struct WerAccumulator {
  WerResult total;

  void add(const WerResult& r) {
    total.substitutions += r.substitutions;
    total.deletions += r.deletions;
    total.insertions += r.insertions;
    total.ref_length += r.ref_length;
    total.wer = static_cast<double>(total.errors()) / static_cast<double>(std::max<std::size_t>(total.ref_length, 1));
  }
};

struct AlignedWord {
  std::string text;
  double start_ms = 0.0;
  double end_ms = 0.0;
  friend bool operator==(const AlignedWord&, const AlignedWord&) = default;
};

using WordAlignment = std::vector<AlignedWord>;

/// One word per token in the synthetic task, timed from its frame span.
inline WordAlignment word_alignment(const Utterance& u) {
  WordAlignment a;
  for (std::size_t i = 0; i < u.tokens.size(); ++i)
    a.push_back(AlignedWord{std::to_string(u.tokens[i]), static_cast<double>(u.spans[i].start) * kInputFrameMs,
                            static_cast<double>(u.spans[i].end) * kInputFrameMs});
  return a;
}

inline void validate_alignment(const WordAlignment& a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].end_ms > a[i].start_ms)) throw std::invalid_argument("word alignment: empty interval");
    if (i > 0 && a[i].start_ms < a[i - 1].end_ms) throw std::invalid_argument("word alignment: overlapping intervals");
  }
}

inline std::vector<std::string> token_words(std::span<const int> tokens) {
  std::vector<std::string> w;
  w.reserve(tokens.size());
  for (int t : tokens) w.push_back(std::to_string(t));
  return w;
}

struct LatencyReport {
  double prwl_ms = 0.0;
  std::vector<std::optional<double>> word_delays_ms;  // nullopt for deleted words
  std::size_t matched_words = 0;
  std::size_t deleted_words = 0;
  std::size_t early_words = 0;  // hypothesized before the word ended
  double mean_emission_delay_ms = 0.0;
};

struct PrwlOptions {
  /// A word counts as seen only once it stays at its position in every
  /// later snapshot.
  bool stable = true;
};

/// Partial-result word latency. Reference words are matched to positions of
/// the final snapshot by edit alignment; unmatched words are deletions.
inline LatencyReport prwl(const WordAlignment& alignment, const PartialTrace& trace, const PrwlOptions& opt = {}) {
  if (trace.snapshots.empty()) throw std::invalid_argument("prwl: empty trace");
  validate_alignment(alignment);
  std::vector<std::string> ref;
  for (const auto& w : alignment) ref.push_back(w.text);
  const auto& snaps = trace.snapshots;
  const auto final_words = token_words(snaps.back().tokens);

  LatencyReport rep;
  rep.word_delays_ms.assign(ref.size(), std::nullopt);
  double sum = 0.0;
  for (const auto& step : edit_alignment(std::span<const std::string>(ref), std::span<const std::string>(final_words))) {
    if (step.op != EditOp::Match) continue;
    const std::size_t p = step.hyp_index;
    const int token = snaps.back().tokens[p];
    auto shows = [&](const PartialSnapshot& s) { return p < s.tokens.size() && s.tokens[p] == token; };
    std::size_t k = snaps.size() - 1;
    if (opt.stable) {
      while (k > 0 && shows(snaps[k - 1])) --k;
    } else {
      for (std::size_t j = 0; j < snaps.size(); ++j)
        if (shows(snaps[j])) {
          k = j;
          break;
        }
    }
    const double delay = snaps[k].audio_consumed_ms - alignment[step.ref_index].end_ms;
    rep.word_delays_ms[step.ref_index] = delay;
    if (delay < 0) ++rep.early_words;
    sum += delay;
    ++rep.matched_words;
  }
  rep.deleted_words = ref.size() - rep.matched_words;
  rep.prwl_ms = rep.matched_words ? sum / static_cast<double>(rep.matched_words) : 0.0;
  return rep;
}

struct EmissionDelay {
  std::vector<double> delays_ms;  // one per matched token
  double mean_ms = 0.0;
};

/// emit time minus ground-truth token end, over tokens matched by edit
/// alignment against the reference.
inline EmissionDelay emission_delay(const WordAlignment& alignment, const TimedHypothesis& hyp) {
  if (hyp.emit_audio_ms.size() != hyp.tokens.size())
    throw std::invalid_argument("emission_delay: timestamps do not match tokens");
  std::vector<std::string> ref;
  for (const auto& w : alignment) ref.push_back(w.text);
  const auto words = token_words(hyp.tokens);
  EmissionDelay out;
  for (const auto& s : edit_alignment(std::span<const std::string>(ref), std::span<const std::string>(words)))
    if (s.op == EditOp::Match) out.delays_ms.push_back(hyp.emit_audio_ms[s.hyp_index] - alignment[s.ref_index].end_ms);
  double sum = 0.0;
  for (double d : out.delays_ms) sum += d;
  out.mean_ms = out.delays_ms.empty() ? 0.0 : sum / static_cast<double>(out.delays_ms.size());
  return out;
}

}  // namespace vmtt
