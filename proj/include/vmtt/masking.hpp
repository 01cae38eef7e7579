#pragma once

// Attention masks over encoder frames: fixed, chunked and hybrid
// past/future rules, the variable-mask sampling set, and receptive-field
// reasoning across stacked layers.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "vmtt/rng.hpp"
#include "vmtt/tensor.hpp"

namespace vmtt {

/// Duration of one encoder frame (10 ms input frames, decimated 6x).
inline constexpr double kFrameMs = 60.0;
inline constexpr double kInputFrameMs = 10.0;

/// Chunk size standing for "the whole utterance is one chunk".
inline constexpr std::size_t kFullContextChunk = std::size_t{1} << 30;

struct FixedPast {
  std::size_t frames = 0;
  friend bool operator==(const FixedPast&, const FixedPast&) = default;
};
struct ChunkedPast {
  std::size_t chunks = 1;
  friend bool operator==(const ChunkedPast&, const ChunkedPast&) = default;
};
struct UnlimitedPast {
  friend bool operator==(const UnlimitedPast&, const UnlimitedPast&) = default;
};
using PastPolicy = std::variant<FixedPast, ChunkedPast, UnlimitedPast>;

struct FixedFuture {
  std::size_t frames = 0;
  friend bool operator==(const FixedFuture&, const FixedFuture&) = default;
};
struct ChunkedFuture {
  friend bool operator==(const ChunkedFuture&, const ChunkedFuture&) = default;
};
struct NoFuture {
  friend bool operator==(const NoFuture&, const NoFuture&) = default;
};
using FuturePolicy = std::variant<FixedFuture, ChunkedFuture, NoFuture>;

struct MaskConfig {
  PastPolicy past = UnlimitedPast{};
  FuturePolicy future = NoFuture{};
  /// Required when either policy is chunked; for fixed policies it is the
  /// streaming step size.
  std::optional<std::size_t> chunk_frames;

  friend bool operator==(const MaskConfig&, const MaskConfig&) = default;

  bool past_chunked() const { return std::holds_alternative<ChunkedPast>(past); }
  bool future_chunked() const { return std::holds_alternative<ChunkedFuture>(future); }

  void validate() const {
    if ((past_chunked() || future_chunked()) && !chunk_frames)
      throw std::invalid_argument("MaskConfig: chunked policy requires chunk_frames");
    if (chunk_frames && *chunk_frames < 1) throw std::invalid_argument("MaskConfig: chunk_frames must be >= 1");
  }

  std::size_t chunk() const { return chunk_frames.value_or(1); }

  /// Past rule for s <= t.
  bool past_allows(std::size_t t, std::size_t s) const {
    return std::visit(
        [&](const auto& p) -> bool {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, UnlimitedPast>) {
            return true;
          } else if constexpr (std::is_same_v<P, FixedPast>) {
            return t - s <= p.frames;
          } else {
            const std::size_t ct = t / *chunk_frames, cs = s / *chunk_frames;
            return cs + p.chunks >= ct;
          }
        },
        past);
  }

  /// Future rule for s > t.
  bool future_allows(std::size_t t, std::size_t s) const {
    return std::visit(
        [&](const auto& f) -> bool {
          using F = std::decay_t<decltype(f)>;
          if constexpr (std::is_same_v<F, NoFuture>) {
            return false;
          } else if constexpr (std::is_same_v<F, FixedFuture>) {
            return s - t <= f.frames;
          } else {
            return s / *chunk_frames == t / *chunk_frames;
          }
        },
        future);
  }

  /// Whether query frame t may attend to key frame s.
  bool allows(std::size_t t, std::size_t s) const {
    if (s == t) return true;
    return s < t ? past_allows(t, s) : future_allows(t, s);
  }

  /// Streaming without recomputation is possible when no frame depends on
  /// keys beyond its own chunk.
  bool streamable() const {
    if (future_chunked()) return true;
    if (std::holds_alternative<NoFuture>(future)) return true;
    return std::get<FixedFuture>(future).frames == 0;
  }

  /// Maximum number of frames before the current chunk (or frame) whose keys
  /// any later query may still need; nullopt for unlimited look-back.
  std::optional<std::size_t> max_lookback_frames() const {
    if (std::holds_alternative<UnlimitedPast>(past)) return std::nullopt;
    if (const auto* f = std::get_if<FixedPast>(&past)) return f->frames;
    const auto& c = std::get<ChunkedPast>(past);
    if (*chunk_frames >= kFullContextChunk) return std::nullopt;
    return c.chunks * *chunk_frames;
  }

  std::string describe() const {
    std::ostringstream os;
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, UnlimitedPast>) os << "past=unlimited";
          else if constexpr (std::is_same_v<P, FixedPast>) os << "past=fixed:" << p.frames;
          else os << "past=chunks:" << p.chunks;
        },
        past);
    std::visit(
        [&](const auto& f) {
          using F = std::decay_t<decltype(f)>;
          if constexpr (std::is_same_v<F, NoFuture>) os << ",future=none";
          else if constexpr (std::is_same_v<F, FixedFuture>) os << ",future=fixed:" << f.frames;
          else os << ",future=chunk";
        },
        future);
    if (chunk_frames) {
      if (*chunk_frames >= kFullContextChunk) os << ",chunk=full";
      else os << ",chunk=" << *chunk_frames;
    }
    return os.str();
  }
};

/// Parses the form produced by MaskConfig::describe().
inline MaskConfig parse_mask_config(const std::string& text) {
  MaskConfig cfg;
  std::istringstream is(text);
  std::string item;
  auto count = [&](const std::string& v) -> std::size_t {
    std::size_t pos = 0;
    const unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("mask config: bad count '" + v + "'");
    return static_cast<std::size_t>(n);
  };
  while (std::getline(is, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("mask config: expected key=value in '" + item + "'");
    const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
    if (key == "past") {
      if (val == "unlimited") cfg.past = UnlimitedPast{};
      else if (val.rfind("fixed:", 0) == 0) cfg.past = FixedPast{count(val.substr(6))};
      else if (val.rfind("chunks:", 0) == 0) cfg.past = ChunkedPast{count(val.substr(7))};
      else throw std::invalid_argument("mask config: unknown past policy '" + val + "'");
    } else if (key == "future") {
      if (val == "none") cfg.future = NoFuture{};
      else if (val == "chunk") cfg.future = ChunkedFuture{};
      else if (val.rfind("fixed:", 0) == 0) cfg.future = FixedFuture{count(val.substr(6))};
      else throw std::invalid_argument("mask config: unknown future policy '" + val + "'");
    } else if (key == "chunk") {
      cfg.chunk_frames = val == "full" ? kFullContextChunk : count(val);
    } else {
      throw std::invalid_argument("mask config: unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

/// Strictly causal label-encoder mask; nullopt look-back is unlimited.
struct LabelMaskConfig {
  std::optional<std::size_t> lookback_tokens;

  friend bool operator==(const LabelMaskConfig&, const LabelMaskConfig&) = default;

  bool allows(std::size_t t, std::size_t s) const {
    if (s > t) return false;
    return !lookback_tokens || t - s <= *lookback_tokens;
  }
};

/// Boolean attendability matrix, queries x keys.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), allow_(rows * cols, fill ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool operator()(std::size_t q, std::size_t k) const { return allow_[q * cols_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool v) { allow_[q * cols_ + k] = v ? 1 : 0; }

  std::size_t row_count(std::size_t q) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < cols_; ++k) n += allow_[q * cols_ + k];
    return n;
  }

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<unsigned char> allow_;
};

/// Mask block for queries at absolute frames [q_begin, q_begin+q_count) and
/// keys at [k_begin, k_begin+k_count).
template <class Rule>
AttentionMask build_mask_block(const Rule& rule, std::size_t q_begin, std::size_t q_count, std::size_t k_begin,
                               std::size_t k_count) {
  AttentionMask m(q_count, k_count);
  for (std::size_t i = 0; i < q_count; ++i)
    for (std::size_t j = 0; j < k_count; ++j) m.set(i, j, rule.allows(q_begin + i, k_begin + j));
  return m;
}

inline AttentionMask build_mask(std::size_t seq_len, const MaskConfig& cfg) {
  if (seq_len < 1) throw std::invalid_argument("build_mask: seq_len must be >= 1");
  cfg.validate();
  return build_mask_block(cfg, 0, seq_len, 0, seq_len);
}

inline AttentionMask build_label_mask(std::size_t seq_len, const LabelMaskConfig& cfg) {
  return build_mask_block(cfg, 0, seq_len, 0, seq_len);
}

/// Sets disallowed score entries to kMaskedScore; allowed entries pass
/// through (and receive gradient) unchanged.
inline Var apply_mask(const Var& scores, const AttentionMask& mask) {
  if (scores.rows() != mask.rows() || scores.cols() != mask.cols())
    throw std::invalid_argument("apply_mask: scores " + shape_str(scores.shape()) + " vs mask " +
                                std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  Tensor out = scores.value();
  for (std::size_t i = 0; i < mask.rows(); ++i)
    for (std::size_t j = 0; j < mask.cols(); ++j)
      if (!mask(i, j)) out(i, j) = kMaskedScore;
  auto sn = scores.node();
  return detail::make_result(std::move(out), {scores}, "apply_mask", [sn, mask](Node& self) {
    if (auto* g = detail::grad_of(sn))
      for (std::size_t i = 0; i < mask.rows(); ++i)
        for (std::size_t j = 0; j < mask.cols(); ++j)
          if (mask(i, j)) (*g)(i, j) += self.grad(i, j);
  });
}

// ---------------------------------------------------------------------------
// Receptive fields

struct FrameRange {
  std::size_t earliest = 0;
  std::size_t latest = 0;
  friend bool operator==(const FrameRange&, const FrameRange&) = default;
};

/// Allowed key interval of a single query row. Every rule here yields a
/// contiguous interval containing t whose endpoints are non-decreasing in t.
inline FrameRange allowed_interval(const MaskConfig& cfg, std::size_t t, std::size_t seq_len) {
  cfg.validate();
  const std::size_t last = seq_len - 1;
  FrameRange r{t, t};
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, UnlimitedPast>) r.earliest = 0;
        else if constexpr (std::is_same_v<P, FixedPast>) r.earliest = t > p.frames ? t - p.frames : 0;
        else {
          const std::size_t c = t / *cfg.chunk_frames;
          r.earliest = c > p.chunks ? (c - p.chunks) * *cfg.chunk_frames : 0;
        }
      },
      cfg.past);
  std::visit(
      [&](const auto& f) {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, NoFuture>) r.latest = t;
        else if constexpr (std::is_same_v<F, FixedFuture>) r.latest = std::min(last, t + f.frames);
        else {
          const std::size_t c = *cfg.chunk_frames;
          const std::size_t end = c >= kFullContextChunk ? last : (t / c) * c + c - 1;
          r.latest = std::min(last, end);
        }
      },
      cfg.future);
  return r;
}

/// Input frames that can influence output frame t after n_layers masked
/// attention layers (the closure of per-layer allowed intervals).
inline FrameRange receptive_field(const MaskConfig& cfg, std::size_t n_layers, std::size_t t, std::size_t seq_len) {
  if (t >= seq_len) throw std::out_of_range("receptive_field: t >= seq_len");
  if (n_layers < 1) throw std::invalid_argument("receptive_field: n_layers must be >= 1");
  FrameRange r{t, t};
  for (std::size_t l = 0; l < n_layers; ++l) {
    r.earliest = allowed_interval(cfg, r.earliest, seq_len).earliest;
    r.latest = allowed_interval(cfg, r.latest, seq_len).latest;
  }
  return r;
}

/// max_t (latest(t) - t) over an utterance of seq_len frames.
inline std::size_t max_future_reach(const MaskConfig& cfg, std::size_t n_layers, std::size_t seq_len) {
  std::size_t reach = 0;
  for (std::size_t t = 0; t < seq_len; ++t)
    reach = std::max(reach, receptive_field(cfg, n_layers, t, seq_len).latest - t);
  return reach;
}

// ---------------------------------------------------------------------------
// Variable masking

struct FutureOption {
  FuturePolicy policy = NoFuture{};
  std::optional<std::size_t> chunk_frames;
  friend bool operator==(const FutureOption&, const FutureOption&) = default;
};

/// The set of mask configurations sampled during training. Past and future
/// options are drawn independently; weights default to uniform.
struct VariableMaskSet {
  std::vector<PastPolicy> past_options;
  std::vector<FutureOption> future_options;
  std::vector<double> past_weights;
  std::vector<double> future_weights;

  static VariableMaskSet singleton(const MaskConfig& cfg) {
    return VariableMaskSet{{cfg.past}, {FutureOption{cfg.future, cfg.chunk_frames}}, {}, {}};
  }

  MaskConfig combine(std::size_t past_index, std::size_t future_index) const {
    const auto& f = future_options.at(future_index);
    return MaskConfig{past_options.at(past_index), f.policy, f.chunk_frames};
  }

  void validate() const {
    if (past_options.empty() || future_options.empty())
      throw std::invalid_argument("VariableMaskSet: option lists must be non-empty");
    if (!past_weights.empty() && past_weights.size() != past_options.size())
      throw std::invalid_argument("VariableMaskSet: past weight count mismatch");
    if (!future_weights.empty() && future_weights.size() != future_options.size())
      throw std::invalid_argument("VariableMaskSet: future weight count mismatch");
    for (std::size_t p = 0; p < past_options.size(); ++p)
      for (std::size_t f = 0; f < future_options.size(); ++f) combine(p, f).validate();
  }

  std::vector<MaskConfig> all_configs() const {
    std::vector<MaskConfig> out;
    for (std::size_t p = 0; p < past_options.size(); ++p)
      for (std::size_t f = 0; f < future_options.size(); ++f) out.push_back(combine(p, f));
    return out;
  }
};

namespace detail {
inline std::size_t weighted_index(Rng& rng, std::size_t n, const std::vector<double>& weights) {
  if (weights.empty()) return rng.index(n);
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("mask sampling weight must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("mask sampling weights sum to zero");
  const double u = rng.uniform01() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  return n - 1;
}
}  // namespace detail

/// Draws one past option and one future option independently.
inline MaskConfig sample_config(const VariableMaskSet& set, Rng& rng) {
  set.validate();
  const std::size_t p = detail::weighted_index(rng, set.past_options.size(), set.past_weights);
  const std::size_t f = detail::weighted_index(rng, set.future_options.size(), set.future_weights);
  return set.combine(p, f);
}

// ---------------------------------------------------------------------------
// Visualization

inline std::string mask_to_ascii(const AttentionMask& m) {
  std::string s;
  s.reserve(m.rows() * (m.cols() + 1));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) s.push_back(m(i, j) ? '#' : '.');
    s.push_back('\n');
  }
  return s;
}

/// Plain (P2) portable graymap; allowed cells white, masked cells black,
/// each cell drawn as a cell_px square.
inline std::string mask_to_pgm(const AttentionMask& m, std::size_t cell_px = 8) {
  std::ostringstream os;
  const std::size_t w = m.cols() * cell_px, h = m.rows() * cell_px;
  os << "P2\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) os << (x ? " " : "") << (m(y / cell_px, x / cell_px) ? 255 : 0);
    os << '\n';
  }
  return os.str();
}

}  // namespace vmtt
