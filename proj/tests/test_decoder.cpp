#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <vector>

#include "vmtt/decoder.hpp"
#include "vmtt/experiment.hpp"

using namespace vmtt;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.storage()) v = scale * rng.normal();
  return t;
}

Tensor& output_bias(const TransducerModel& m) {
  Var b = m.joint().output.bias;
  return b.mutable_value();
}

/// Tiny model with large random weights so that decoding emits tokens.
std::unique_ptr<TransducerModel> noisy_model(std::size_t vocab, std::uint64_t seed, double scale = 1.0) {
  auto m = std::make_unique<TransducerModel>(ModelConfig::tiny(vocab, 4), seed);
  Rng rng(seed + 1);
  for (auto v : m->params().vars())
    for (auto& x : v.mutable_value().storage()) x += scale * 0.3 * rng.normal();
  output_bias(*m)[0] -= 1.5 * scale;  // bias away from blank
  return m;
}

std::vector<MaskConfig> streamable_configs() {
  auto out = default_mask_set().all_configs();
  out.push_back(MaskConfig{ChunkedPast{1}, ChunkedFuture{}, 3});
  out.push_back(MaskConfig{FixedPast{3}, NoFuture{}, std::nullopt});
  return out;
}

}  // namespace

TEST(Greedy, AllBlankModelGivesEmptyHypothesis) {
  TransducerModel m(ModelConfig::tiny(4, 4), 3);
  output_bias(m)[0] = 100.0;
  Rng rng(4);
  const Tensor x = random_matrix(rng, 42, 4);
  const MaskConfig c{UnlimitedPast{}, ChunkedFuture{}, 1};
  const auto [hyp, trace] = greedy_decode_streaming(x, m, c);
  EXPECT_TRUE(hyp.tokens.empty());
  ASSERT_EQ(trace.snapshots.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_TRUE(trace.snapshots[i].tokens.empty());
    EXPECT_EQ(trace.snapshots[i].audio_consumed_ms, 60.0 * static_cast<double>(i + 1));
  }
}

TEST(Greedy, SingleChunkStreamingEqualsOffline) {
  const auto m = noisy_model(5, 7);
  Rng rng(8);
  for (int rep = 0; rep < 5; ++rep) {
    const Tensor x = random_matrix(rng, 30 + 7 * rep, 4);
    const MaskConfig c{UnlimitedPast{}, ChunkedFuture{}, kFullContextChunk};
    const auto [streamed, trace] = greedy_decode_streaming(x, *m, c);
    const auto offline = greedy_decode_offline(x, *m, c);
    EXPECT_EQ(streamed.tokens, offline.tokens);
    EXPECT_EQ(streamed.emit_audio_ms, offline.emit_audio_ms);
    ASSERT_EQ(trace.snapshots.size(), 1u);
  }
}

TEST(Greedy, StreamingIsTokenExactAcrossConfigs) {
  const auto m = noisy_model(6, 9);
  Rng rng(10);
  std::size_t emitted = 0;
  for (const auto& c : streamable_configs())
    for (int rep = 0; rep < 4; ++rep) {
      const Tensor x = random_matrix(rng, 20 + 13 * rep, 4);
      const auto [streamed, trace] = greedy_decode_streaming(x, *m, c);
      const auto offline = greedy_decode_offline(x, *m, c);
      EXPECT_EQ(streamed.tokens, offline.tokens) << c.describe();
      EXPECT_NEAR(streamed.score, offline.score, 1e-9);
      EXPECT_EQ(trace.snapshots.back().tokens, streamed.tokens);
      emitted += streamed.tokens.size();
    }
  EXPECT_GT(emitted, 0u);
}

TEST(Greedy, TimestampsAreChunkQuantized) {
  const auto m = noisy_model(6, 11);
  Rng rng(12);
  for (std::size_t chunk : {1u, 2u, 4u}) {
    const MaskConfig c{FixedPast{12}, ChunkedFuture{}, chunk};
    for (int rep = 0; rep < 5; ++rep) {
      const std::size_t len = 25 + 11 * static_cast<std::size_t>(rep);
      const Tensor x = random_matrix(rng, len, 4);
      const auto [hyp, trace] = greedy_decode_streaming(x, *m, c);
      const double total = static_cast<double>(len) * kInputFrameMs, q = static_cast<double>(chunk) * kFrameMs;
      for (std::size_t i = 0; i < hyp.emit_audio_ms.size(); ++i) {
        const double ms = hyp.emit_audio_ms[i];
        EXPECT_TRUE(ms == total || std::fmod(ms, q) == 0.0) << ms;
        if (i > 0) {
          EXPECT_GE(ms, hyp.emit_audio_ms[i - 1]);
        }
      }
      for (std::size_t i = 1; i < trace.snapshots.size(); ++i)
        EXPECT_GT(trace.snapshots[i].audio_consumed_ms, trace.snapshots[i - 1].audio_consumed_ms);
    }
  }
}

TEST(Greedy, MaxSymbolsPerFrameCapsEmissions) {
  TransducerModel m(ModelConfig::tiny(3, 4), 13);
  output_bias(m)[1] = 100.0;  // token 1 always wins
  Rng rng(14);
  const Tensor x = random_matrix(rng, 24, 4);
  const auto hyp = greedy_decode_offline(x, m, MaskConfig{}, 2);
  EXPECT_EQ(hyp.tokens.size(), 8u);
}

TEST(StreamEncode, FixedLookaheadReleaseRule) {
  const auto m = noisy_model(4, 15);
  Rng rng(16);
  const Tensor x = random_matrix(rng, 60, 4);
  const MaskConfig c{UnlimitedPast{}, FixedFuture{1}, std::nullopt};
  const StreamedEncoding s = stream_encode(*m, x, c);
  const Tensor offline = m->acoustic().encode(Var::constant(x), c).value();
  EXPECT_LE(max_abs_diff(s.frames, offline), 1e-9);
  // two layers of one-frame look-ahead: frame t waits for frame t+2
  for (std::size_t t = 0; t < 10; ++t)
    EXPECT_EQ(s.available_ms[t], std::min(600.0, 60.0 * static_cast<double>(t + 3))) << t;
}

TEST(StreamEncode, ChunkedMatchesOfflineWithinTolerance) {
  const auto m = noisy_model(4, 17);
  Rng rng(18);
  for (const auto& c : streamable_configs())
    for (int rep = 0; rep < 3; ++rep) {
      const Tensor x = random_matrix(rng, 17 + 19 * rep, 4);
      EXPECT_LE(max_abs_diff(stream_encode(*m, x, c).frames, m->acoustic().encode(Var::constant(x), c).value()), 1e-9);
    }
}

TEST(Beam, WidthOneEqualsGreedy) {
  const auto m = noisy_model(6, 19);
  Rng rng(20);
  for (const auto& c : {MaskConfig{UnlimitedPast{}, ChunkedFuture{}, 2}, MaskConfig{FixedPast{12}, ChunkedFuture{}, 1}})
    for (int rep = 0; rep < 5; ++rep) {
      const Tensor x = random_matrix(rng, 30 + 5 * rep, 4);
      const auto s = stream_encode(*m, x, c);
      const auto g = greedy_search(*m, s.frames, s.available_ms, GreedyOptions{});
      const auto b = beam_search_frames(*m, s.frames, s.available_ms, BeamOptions{1, 1, 4, 20.0});
      ASSERT_EQ(b.hypotheses.size(), 1u);
      EXPECT_EQ(b.hypotheses[0].tokens, g.tokens);
      EXPECT_EQ(b.hypotheses[0].emit_audio_ms, g.emit_audio_ms);
      EXPECT_NEAR(b.hypotheses[0].score, g.score, 1e-9);
      EXPECT_EQ(beam_search(x, *m, c, BeamOptions{1, 1, 4, 20.0}).hypotheses[0].tokens, g.tokens);
    }
}

TEST(Beam, SortedDistinctAndFullSumScored) {
  const auto m = noisy_model(5, 21);
  Rng rng(22);
  const MaskConfig c{UnlimitedPast{}, ChunkedFuture{}, 2};
  const Tensor x = random_matrix(rng, 40, 4);
  const NBestList list = beam_search(x, *m, c, BeamOptions{8, 6, 4, 30.0});
  ASSERT_FALSE(list.hypotheses.empty());
  EXPECT_LE(list.hypotheses.size(), 6u);
  std::set<std::vector<int>> seen;
  const Tensor enc = m->acoustic().encode(Var::constant(x), c).value();
  for (std::size_t i = 0; i < list.hypotheses.size(); ++i) {
    const auto& h = list.hypotheses[i];
    EXPECT_TRUE(seen.insert(h.tokens).second);
    if (i > 0) {
      EXPECT_LE(h.score, list.hypotheses[i - 1].score);
    }
    EXPECT_EQ(h.emit_audio_ms.size(), h.tokens.size());
    EXPECT_NEAR(h.score, sequence_log_prob(*m, enc, m->label_encode(h.tokens).value(), h.tokens), 1e-9);
  }
  EXPECT_THROW(beam_search(x, *m, c, BeamOptions{2, 3, 4, 20.0}), std::invalid_argument);
}

TEST(Beam, ExhaustiveOracleOnThreeFrames) {
  // V = 2, 3 frames. With an unbounded beam and no gap, every token sequence
  // of length <= max_symbols_per_frame has all of its alignments explored,
  // so its search score is its exact full-sum probability.
  for (std::uint64_t seed = 30; seed < 36; ++seed) {
    const auto m = noisy_model(2, seed, 2.0);
    Rng rng(seed + 7);
    const Tensor x = random_matrix(rng, 18, 4);
    const MaskConfig c{};
    const Tensor enc = m->acoustic().encode(Var::constant(x), c).value();
    ASSERT_EQ(enc.rows(), 3u);
    const BeamOptions opt{4096, 4096, 2, 1e9};
    const NBestList list = beam_search_frames(*m, enc, {}, opt);

    std::vector<std::vector<int>> short_seqs{{}};
    for (int a = 1; a <= 2; ++a) {
      short_seqs.push_back({a});
      for (int b = 1; b <= 2; ++b) short_seqs.push_back({a, b});
    }
    double total = 0.0;
    for (const auto& h : list.hypotheses) total += std::exp(h.score);
    EXPECT_LE(total, 1.0 + 1e-9);
    for (const auto& y : short_seqs) {
      const double exact = sequence_log_prob(*m, enc, m->label_encode(y).value(), y);
      const auto it = std::find_if(list.hypotheses.begin(), list.hypotheses.end(),
                                   [&](const TimedHypothesis& h) { return h.tokens == y; });
      ASSERT_NE(it, list.hypotheses.end());
      EXPECT_NEAR(it->score, exact, 1e-9);
    }
  }
}
