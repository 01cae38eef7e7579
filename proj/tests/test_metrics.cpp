#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "vmtt/metrics.hpp"

using namespace vmtt;

namespace {

std::vector<std::string> words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

WordAlignment align_words(const std::vector<std::pair<int, double>>& tokens_and_end) {
  WordAlignment a;
  double start = 0.0;
  for (const auto& [tok, end] : tokens_and_end) {
    a.push_back(AlignedWord{std::to_string(tok), start, end});
    start = end;
  }
  return a;
}

/// Append-only trace: the final token sequence revealed a few tokens at a
/// time, one snapshot per 60 ms step.
PartialTrace growing_trace(Rng& rng, const std::vector<int>& final_tokens, std::size_t steps) {
  PartialTrace tr;
  std::size_t shown = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    if (s + 1 == steps) shown = final_tokens.size();
    else if (shown < final_tokens.size() && rng.uniform01() < 0.4) ++shown;
    tr.snapshots.push_back(PartialSnapshot{60.0 * static_cast<double>(s + 1),
                                           std::vector<int>(final_tokens.begin(), final_tokens.begin() + shown)});
  }
  return tr;
}

}  // namespace

TEST(Wer, Examples) {
  const auto same = words("a b c");
  EXPECT_EQ(wer(same, same).wer, 0.0);
  const auto r = wer(words("a b c"), words("a x c"));
  EXPECT_DOUBLE_EQ(r.wer, 1.0 / 3.0);
  EXPECT_EQ(r.substitutions, 1u);
  EXPECT_EQ(r.deletions + r.insertions, 0u);
  const auto del = wer(words("a b c"), words("a c"));
  EXPECT_EQ(del.deletions, 1u);
  const auto empty_ref = wer(std::vector<std::string>{}, words("a b"));
  EXPECT_EQ(empty_ref.insertions, 2u);
  EXPECT_EQ(empty_ref.wer, 2.0);
  EXPECT_EQ(wer(std::vector<std::string>{}, std::vector<std::string>{}).wer, 0.0);
}

TEST(Wer, TieBreakPrefersSubstitutions) {
  // "a b" -> "b c": two substitutions or one deletion plus one insertion
  const auto r = wer(words("a b"), words("b c"));
  EXPECT_EQ(r.errors(), 2u);
  EXPECT_EQ(r.substitutions, oracle::max_substitutions(words("a b"), words("b c")));
}

TEST(Wer, MatchesIndependentOracleOnRandomPairs) {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<int> a, b;
    const std::size_t na = rng.range(0, 9), nb = rng.range(0, 9);
    for (std::size_t i = 0; i < na; ++i) a.push_back(static_cast<int>(rng.range(1, 4)));
    for (std::size_t i = 0; i < nb; ++i) b.push_back(static_cast<int>(rng.range(1, 4)));
    const WerResult r = wer(a, b);
    ASSERT_EQ(r.errors(), oracle::edit_distance(a, b));
    ASSERT_EQ(r.substitutions, oracle::max_substitutions(a, b));
    ASSERT_EQ(r.deletions + nb, r.insertions + na);
  }
}

TEST(Wer, SwapExchangesDeletionsAndInsertions) {
  Rng rng(6);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<int> a, b;
    for (std::size_t i = 0, n = rng.range(0, 8); i < n; ++i) a.push_back(static_cast<int>(rng.range(1, 3)));
    for (std::size_t i = 0, n = rng.range(0, 8); i < n; ++i) b.push_back(static_cast<int>(rng.range(1, 3)));
    const WerResult ab = wer(a, b), ba = wer(b, a);
    EXPECT_EQ(ab.errors(), ba.errors());
    EXPECT_EQ(ab.substitutions, ba.substitutions);
    EXPECT_EQ(ab.deletions, ba.insertions);
    EXPECT_EQ(ab.insertions, ba.deletions);
  }
}

TEST(Wer, AccumulatorPoolsCounts) {
  WerAccumulator acc;
  acc.add(wer(words("a b c"), words("a x c")));
  acc.add(wer(words("d"), std::vector<std::string>{}));
  EXPECT_EQ(acc.total.ref_length, 4u);
  EXPECT_DOUBLE_EQ(acc.total.wer, 0.5);
}

TEST(Prwl, SingleWordDelay) {
  const WordAlignment a{{"7", 500.0, 1000.0}};
  PartialTrace tr;
  tr.snapshots = {{1000.0, {}}, {1500.0, {7}}, {2000.0, {7}}};
  const auto rep = prwl(a, tr);
  EXPECT_EQ(rep.prwl_ms, 500.0);
  EXPECT_EQ(rep.word_delays_ms[0], std::optional<double>{500.0});
}

TEST(Prwl, MeanOverWords) {
  const WordAlignment a{{"1", 0.0, 1000.0}, {"2", 1000.0, 1200.0}};
  PartialTrace tr;
  tr.snapshots = {{1500.0, {1, 2}}};
  const auto rep = prwl(a, tr);
  EXPECT_EQ(rep.word_delays_ms[0], std::optional<double>{500.0});
  EXPECT_EQ(rep.word_delays_ms[1], std::optional<double>{300.0});
  EXPECT_EQ(rep.prwl_ms, 400.0);
}

TEST(Prwl, StablePrefixIgnoresFlicker) {
  const WordAlignment a{{"3", 0.0, 100.0}};
  PartialTrace tr;
  tr.snapshots = {{60.0, {3}}, {120.0, {4}}, {180.0, {3}}};
  EXPECT_EQ(prwl(a, tr).prwl_ms, 80.0);
  EXPECT_EQ(prwl(a, tr, PrwlOptions{false}).prwl_ms, -40.0);
}

TEST(Prwl, DeletedWordsAreCountedNotAveraged) {
  const WordAlignment a{{"1", 0.0, 100.0}, {"2", 100.0, 200.0}, {"3", 200.0, 300.0}};
  PartialTrace tr;
  tr.snapshots = {{300.0, {1}}, {400.0, {1, 3}}};
  const auto rep = prwl(a, tr);
  EXPECT_EQ(rep.deleted_words, 1u);
  EXPECT_EQ(rep.matched_words, 2u);
  EXPECT_FALSE(rep.word_delays_ms[1].has_value());
  EXPECT_EQ(rep.prwl_ms, (200.0 + 100.0) / 2.0);
  EXPECT_THROW(prwl(a, PartialTrace{}), std::invalid_argument);
  EXPECT_THROW(prwl(WordAlignment{{"1", 100.0, 100.0}}, tr), std::invalid_argument);
}

TEST(Prwl, MonotoneUnderCoarsening) {
  Rng rng(7);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<std::pair<int, double>> spec;
    double end = 0.0;
    for (std::size_t i = 0, n = rng.range(1, 6); i < n; ++i) {
      end += 30.0 + 100.0 * rng.uniform01();
      spec.emplace_back(static_cast<int>(rng.range(1, 5)), end);
    }
    const WordAlignment a = align_words(spec);
    std::vector<int> final_tokens;
    for (const auto& [t, _] : spec) final_tokens.push_back(t);
    if (rng.uniform01() < 0.3) final_tokens.pop_back();
    const PartialTrace fine = growing_trace(rng, final_tokens, 12);
    PartialTrace coarse;
    for (std::size_t i = 0; i < fine.snapshots.size(); ++i)
      if (i + 1 == fine.snapshots.size() || rng.uniform01() < 0.5) coarse.snapshots.push_back(fine.snapshots[i]);
    const auto f = prwl(a, fine), c = prwl(a, coarse);
    ASSERT_EQ(f.matched_words, c.matched_words);
    for (std::size_t w = 0; w < a.size(); ++w)
      if (f.word_delays_ms[w]) {
        ASSERT_TRUE(c.word_delays_ms[w].has_value());
        EXPECT_GE(*c.word_delays_ms[w], *f.word_delays_ms[w]);
      }
    EXPECT_GE(c.prwl_ms, f.prwl_ms);
  }
}

TEST(Prwl, Deterministic) {
  Rng r1(8), r2(8);
  const WordAlignment a = align_words({{1, 100.0}, {2, 250.0}});
  const auto t1 = growing_trace(r1, {1, 2}, 8), t2 = growing_trace(r2, {1, 2}, 8);
  EXPECT_EQ(prwl(a, t1).word_delays_ms, prwl(a, t2).word_delays_ms);
}

TEST(EmissionDelay, PerfectOracleShowsOnlyQuantization) {
  const double q = 240.0;
  const WordAlignment a = align_words({{1, 130.0}, {2, 480.0}, {3, 610.0}});
  TimedHypothesis h;
  double expect = 0.0;
  for (const auto& w : a) {
    h.tokens.push_back(std::stoi(w.text));
    const double emit = std::ceil(w.end_ms / q) * q;
    h.emit_audio_ms.push_back(emit);
    expect += emit - w.end_ms;
  }
  const auto d = emission_delay(a, h);
  EXPECT_DOUBLE_EQ(d.mean_ms, expect / 3.0);
  EXPECT_DOUBLE_EQ(d.delays_ms[1], 0.0);
}

TEST(EmissionDelay, ShiftMovesMeanAndSkipsUnmatched) {
  const WordAlignment a = align_words({{1, 100.0}, {2, 200.0}});
  TimedHypothesis h{{1, 9, 2}, 0.0, {100.0, 150.0, 200.0}, {}, {}, {}};
  EXPECT_EQ(emission_delay(a, h).mean_ms, 0.0);
  for (auto& ms : h.emit_audio_ms) ms += 60.0;
  const auto d = emission_delay(a, h);
  EXPECT_EQ(d.delays_ms.size(), 2u);
  EXPECT_EQ(d.mean_ms, 60.0);
  h.emit_audio_ms.pop_back();
  EXPECT_THROW(emission_delay(a, h), std::invalid_argument);
}

TEST(WordAlignment, FromUtteranceSpans) {
  Utterance u;
  u.tokens = {4, 2};
  u.spans = {{0, 12}, {12, 30}};
  const WordAlignment a = word_alignment(u);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0], (AlignedWord{"4", 0.0, 120.0}));
  EXPECT_EQ(a[1], (AlignedWord{"2", 120.0, 300.0}));
}
