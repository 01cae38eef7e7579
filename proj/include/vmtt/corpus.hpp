#pragma once

// Synthetic transcription task: every token is a fixed random embedding
// held for a random number of 10 ms frames, plus Gaussian noise. Token
// boundaries are known exactly and serve as ground-truth alignments.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmtt/rng.hpp"
#include "vmtt/tensor.hpp"
#include "vmtt/utterance.hpp"

namespace vmtt {

struct SyntheticTaskSpec {
  std::size_t vocab_size = 16;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 6;
  std::size_t min_token_frames = 12;  // feature frames (10 ms)
  std::size_t max_token_frames = 30;
  std::size_t feature_dim = 16;
  double noise = 0.5;
  std::size_t utterances = 200;
  std::uint64_t seed = 1;

  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("SyntheticTaskSpec: vocab_size must be >= 2");
    if (min_tokens < 1 || max_tokens < min_tokens) throw std::invalid_argument("SyntheticTaskSpec: bad token range");
    if (min_token_frames < 1 || max_token_frames < min_token_frames)
      throw std::invalid_argument("SyntheticTaskSpec: bad frames-per-token range");
    if (feature_dim < 1) throw std::invalid_argument("SyntheticTaskSpec: feature_dim must be >= 1");
    if (!(noise >= 0.0)) throw std::invalid_argument("SyntheticTaskSpec: noise must be >= 0");
  }
};

struct Corpus {
  SyntheticTaskSpec spec;
  Tensor embeddings;  // vocab_size x feature_dim, row k-1 renders token k
  std::vector<Utterance> utterances;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Deterministic given spec.seed. Consecutive tokens always differ, since
/// back-to-back repeats of a constant embedding would carry no boundary.
inline Corpus generate_corpus(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Corpus c;
  c.spec = spec;
  c.embeddings = Tensor::matrix(spec.vocab_size, spec.feature_dim);
  for (auto& v : c.embeddings.storage()) v = rng.normal();
  c.utterances.reserve(spec.utterances);
  for (std::size_t n = 0; n < spec.utterances; ++n) {
    Utterance u;
    u.id = "utt" + std::to_string(n);
    const std::size_t count = rng.range(spec.min_tokens, spec.max_tokens);
    std::size_t frames = 0;
    int prev = 0;
    for (std::size_t i = 0; i < count; ++i) {
      int tok = 0;
      do {
        tok = static_cast<int>(rng.range(1, spec.vocab_size));
      } while (tok == prev);
      prev = tok;
      const std::size_t len = rng.range(spec.min_token_frames, spec.max_token_frames);
      u.tokens.push_back(tok);
      u.spans.push_back(TokenSpan{frames, frames + len});
      frames += len;
    }
    u.features = Tensor::matrix(frames, spec.feature_dim);
    for (std::size_t i = 0; i < count; ++i) {
      const auto emb = c.embeddings.row(static_cast<std::size_t>(u.tokens[i] - 1));
      for (std::size_t f = u.spans[i].start; f < u.spans[i].end; ++f)
        for (std::size_t d = 0; d < spec.feature_dim; ++d) u.features(f, d) = emb[d] + spec.noise * rng.normal();
    }
    c.utterances.push_back(std::move(u));
  }
  return c;
}

/// Token whose embedding is closest (Euclidean) to the feature frame.
inline int nearest_centroid(const Corpus& c, std::span<const double> frame) {
  int best = 1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < c.embeddings.rows(); ++k) {
    double d = 0.0;
    const auto e = c.embeddings.row(k);
    for (std::size_t j = 0; j < e.size(); ++j) d += (frame[j] - e[j]) * (frame[j] - e[j]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k + 1);
    }
  }
  return best;
}

/// Splits off the last `n` utterances as a held-out set.
inline std::pair<std::vector<Utterance>, std::vector<Utterance>> split_holdout(const Corpus& c, std::size_t n) {
  if (n > c.utterances.size()) throw std::invalid_argument("split_holdout: not enough utterances");
  const auto cut = c.utterances.begin() + static_cast<std::ptrdiff_t>(c.utterances.size() - n);
  return {std::vector<Utterance>(c.utterances.begin(), cut), std::vector<Utterance>(cut, c.utterances.end())};
}

}  // namespace vmtt
