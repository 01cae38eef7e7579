#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "oracles.hpp"
#include "vmtt/encoders.hpp"
#include "vmtt/experiment.hpp"
#include "vmtt/grad_check.hpp"
#include "vmtt/model.hpp"
#include "vmtt/transducer.hpp"

using namespace vmtt;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.storage()) v = scale * rng.normal();
  return t;
}

void randomize(Var v, Rng& rng, double scale) {
  for (auto& x : v.mutable_value().storage()) x = scale * rng.normal();
}

/// Scalar-loop attention with relative bias, one head at a time.
Tensor naive_attention(const MultiHeadAttention& a, const Tensor& z, const AttentionMask& mask) {
  const Tensor q = matmul(z, a.query.weight.value()), k = matmul(z, a.key.weight.value()),
               v = matmul(z, a.value.weight.value());
  const std::size_t n = z.rows(), d = q.cols(), dh = d / a.n_heads;
  auto with_bias = [&](Tensor m, const Linear& lin) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += lin.bias.value()(0, j);
    return m;
  };
  const Tensor Q = with_bias(q, a.query), K = with_bias(k, a.key), Vv = with_bias(v, a.value);
  Tensor heads = Tensor::matrix(n, d);
  for (std::size_t h = 0; h < a.n_heads; ++h)
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> s(n, 0.0);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask(t, j)) continue;
        double dot = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += Q(t, c) * K(j, c);
        double bias = 0.0;
        if (j <= t) bias = a.past_bias.value()(h, std::min(t - j, a.window));
        else bias = a.future_bias.value()(h, std::min(j - t, a.window) - 1);
        s[j] = (dot + bias) / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z_sum = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (mask(t, j)) z_sum += std::exp(s[j] - mx);
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask(t, j)) continue;
        const double w = std::exp(s[j] - mx) / z_sum;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) heads(t, c) += w * Vv(j, c);
      }
    }
  return with_bias(matmul(heads, a.output.weight.value()), a.output);
}

struct AttentionFixture {
  ParamStore ps;
  MultiHeadAttention attn;
  explicit AttentionFixture(std::uint64_t seed, std::size_t d = 8, std::size_t heads = 2, std::size_t window = 3) {
    Rng rng(seed);
    attn = MultiHeadAttention::create(ps, "a", d, heads, window, true, rng);
    for (auto v : ps.vars()) randomize(v, rng, 0.5);
  }
};

EncoderConfig small_encoder() { return EncoderConfig{4, 2, 8, 2, 2, 3, 6, 4}; }

std::vector<MaskConfig> streaming_configs() {
  auto out = default_mask_set().all_configs();
  out.push_back(MaskConfig{FixedPast{4}, ChunkedFuture{}, 4});
  out.push_back(MaskConfig{ChunkedPast{1}, ChunkedFuture{}, 2});
  out.push_back(MaskConfig{FixedPast{3}, NoFuture{}, std::nullopt});
  out.push_back(MaskConfig{UnlimitedPast{}, FixedFuture{0}, std::nullopt});
  return out;
}

Tensor stream_all(const AcousticEncoder& enc, const Tensor& x, const MaskConfig& cfg, std::size_t* max_cache = nullptr) {
  StreamState st = enc.start_stream();
  const std::size_t step = cfg.chunk() >= kFullContextChunk ? x.rows() : cfg.chunk() * enc.config().downsample_factor;
  Tensor out = Tensor::matrix(0, enc.config().d_model);
  std::size_t pos = 0;
  do {
    const std::size_t end = std::min(x.rows(), pos + step);
    const bool final = end == x.rows() && (end - pos < step || cfg.chunk() >= kFullContextChunk);
    out = vconcat(out, enc.encode_chunk(x.slice_rows(pos, end), st, cfg, final));
    if (max_cache)
      for (const auto& l : st.layers) *max_cache = std::max(*max_cache, l.length());
    pos = end;
    if (end == x.rows() && !final) out = vconcat(out, enc.encode_chunk(Tensor::matrix(0, x.cols()), st, cfg, true));
  } while (pos < x.rows());
  return out;
}

/// Frames reachable from t through n_layers blocks, each an attention hop
/// under the mask followed by a causal conv hop of up to kernel-1 frames
/// that the past rule allows.
std::set<std::size_t> block_reach(const MaskConfig& c, std::size_t n_layers, std::size_t kernel, std::size_t t,
                                  std::size_t n) {
  std::set<std::size_t> frontier{t};
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::set<std::size_t> conv;
    for (std::size_t q : frontier)
      for (std::size_t lag = 0; lag < kernel && lag <= q; ++lag)
        if (oracle::allows(c, q, q - lag)) conv.insert(q - lag);
    std::set<std::size_t> next;
    for (std::size_t q : conv)
      for (std::size_t s = 0; s < n; ++s)
        if (oracle::allows(c, q, s)) next.insert(s);
    frontier = std::move(next);
  }
  return frontier;
}

}  // namespace

TEST(Attention, SingleFrameReturnsProjectedValue) {
  AttentionFixture f(1);
  Rng rng(2);
  const Var z = Var::constant(random_matrix(rng, 1, 8));
  const Tensor got = f.attn(z, AttentionMask(1, 1, true)).value();
  const Tensor want = f.attn.output(f.attn.value(z)).value();
  EXPECT_LE(max_abs_diff(got, want), 1e-12);
}

TEST(Attention, DiagonalMaskMakesFramesIndependent) {
  AttentionFixture f(3);
  Rng rng(4);
  Tensor z = random_matrix(rng, 5, 8);
  AttentionMask diag(5, 5);
  for (std::size_t t = 0; t < 5; ++t) diag.set(t, t, true);
  const Tensor base = f.attn(Var::constant(z), diag).value();
  for (std::size_t c = 0; c < 8; ++c) z(2, c) += 1.0;
  const Tensor moved = f.attn(Var::constant(z), diag).value();
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 8; ++c)
      if (t != 2) {
        EXPECT_EQ(base(t, c), moved(t, c));
      }
}

TEST(Attention, MatchesScalarLoopOracle) {
  for (std::uint64_t seed = 10; seed < 16; ++seed) {
    AttentionFixture f(seed);
    Rng rng(seed + 100);
    const Tensor z = random_matrix(rng, 7, 8);
    for (const MaskConfig& c : {MaskConfig{}, MaskConfig{FixedPast{2}, FixedFuture{1}, std::nullopt},
                                MaskConfig{UnlimitedPast{}, ChunkedFuture{}, 3}}) {
      const auto m = build_mask(7, c);
      EXPECT_LE(max_abs_diff(f.attn(Var::constant(z), m).value(), naive_attention(f.attn, z, m)), 1e-10);
    }
  }
}

TEST(Attention, RejectsBadMasks) {
  AttentionFixture f(5);
  const Var z = Var::constant(Tensor::matrix(3, 8));
  EXPECT_THROW(f.attn(z, AttentionMask(2, 2, true)), std::invalid_argument);
  EXPECT_THROW(f.attn(z, AttentionMask(3, 3, false)), std::invalid_argument);
}

TEST(Downsampler, OutputLengths) {
  ParamStore ps;
  Rng rng(6);
  const AcousticEncoder enc(ps, small_encoder(), rng);
  EXPECT_EQ(enc.downsample(Var::constant(Tensor::matrix(6, 4))).rows(), 1u);
  EXPECT_EQ(enc.downsample(Var::constant(Tensor::matrix(13, 4))).rows(), 3u);
  EXPECT_EQ(enc.downsample(Var::constant(Tensor::matrix(1, 4))).rows(), 1u);
  EXPECT_THROW(enc.downsample(Var::constant(Tensor::matrix(0, 4))), std::invalid_argument);
  EXPECT_THROW(enc.downsample(Var::constant(Tensor::matrix(6, 5))), std::invalid_argument);
}

TEST(Downsampler, ZeroInputZeroBiasGivesZero) {
  ParamStore ps;
  Rng rng(7);
  const AcousticEncoder enc(ps, small_encoder(), rng);
  const Tensor out = enc.downsample(Var::constant(Tensor::matrix(18, 4))).value();
  for (double v : out.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Downsampler, WindowCausality) {
  // Encoder frame i depends on input frames up to 6i+5 only.
  ParamStore ps;
  Rng rng(8);
  const AcousticEncoder enc(ps, small_encoder(), rng);
  Tensor x = random_matrix(rng, 24, 4);
  const Tensor base = enc.downsample(Var::constant(x)).value();
  for (std::size_t c = 0; c < 4; ++c) x(12, c) += 1.0;
  const Tensor moved = enc.downsample(Var::constant(x)).value();
  for (std::size_t i = 0; i < 4; ++i) {
    const bool changed = max_abs_diff(base.slice_rows(i, i + 1), moved.slice_rows(i, i + 1)) > 0;
    EXPECT_EQ(changed, i == 2) << i;
  }
}

TEST(AcousticEncoder, PerturbationStaysInsideReceptiveField) {
  ParamStore ps;
  Rng rng(9);
  const EncoderConfig ec = small_encoder();
  const AcousticEncoder enc(ps, ec, rng);
  const std::size_t frames = 10, factor = ec.downsample_factor;
  for (const auto& c : {MaskConfig{FixedPast{1}, FixedFuture{1}, std::nullopt}, MaskConfig{ChunkedPast{0}, ChunkedFuture{}, 2},
                        MaskConfig{ChunkedPast{1}, ChunkedFuture{}, 3}, MaskConfig{UnlimitedPast{}, FixedFuture{2}, std::nullopt},
                        MaskConfig{FixedPast{2}, NoFuture{}, std::nullopt}}) {
    for (std::size_t s : {1u, 5u, 8u}) {
      Tensor x = random_matrix(rng, frames * factor, 4);
      const Tensor base = enc.encode(Var::constant(x), c).value();
      for (std::size_t r = s * factor; r < (s + 1) * factor; ++r)
        for (std::size_t k = 0; k < 4; ++k) x(r, k) += 0.7;
      const Tensor moved = enc.encode(Var::constant(x), c).value();
      for (std::size_t t = 0; t < frames; ++t) {
        const FrameRange rf = receptive_field(c, ec.n_layers, t, frames);
        const auto reach = block_reach(c, ec.n_layers, ec.conv_kernel, t, frames);
        // the future side is exactly the mask receptive field; the conv hop
        // only widens the past side, and not at all for unlimited or
        // chunk-local pasts
        EXPECT_EQ(*reach.rbegin(), rf.latest);
        const auto* chunks = std::get_if<ChunkedPast>(&c.past);
        if (std::holds_alternative<UnlimitedPast>(c.past) || (chunks && chunks->chunks == 0)) {
          EXPECT_EQ(*reach.begin(), rf.earliest) << c.describe();
        }
        // input window s also feeds encoder window s+1 through one frame of left context
        const bool inside = reach.count(s) || reach.count(s + 1);
        const bool changed = max_abs_diff(base.slice_rows(t, t + 1), moved.slice_rows(t, t + 1)) > 0;
        if (!inside) {
          EXPECT_FALSE(changed) << c.describe() << " s=" << s << " t=" << t;
        }
        if (s == t) {
          EXPECT_TRUE(changed);
        }
      }
    }
  }
}

TEST(AcousticEncoder, StrictlyCausalPrefixProperty) {
  ParamStore ps;
  Rng rng(10);
  const AcousticEncoder enc(ps, small_encoder(), rng);
  const MaskConfig c{UnlimitedPast{}, FixedFuture{0}, std::nullopt};
  const Tensor x = random_matrix(rng, 48, 4);
  const Tensor full = enc.encode(Var::constant(x), c).value();
  for (std::size_t n = 1; n < 8; ++n) {
    const Tensor prefix = enc.encode(Var::constant(x.slice_rows(0, n * 6)), c).value();
    EXPECT_LE(max_abs_diff(prefix, full.slice_rows(0, n)), 1e-12);
  }
}

TEST(AcousticEncoder, Deterministic) {
  const ModelConfig mc = ModelConfig::tiny(5, 4);
  const TransducerModel a(mc, 42), b(mc, 42);
  Rng rng(11);
  const Tensor x = random_matrix(rng, 30, 4);
  const MaskConfig c{UnlimitedPast{}, ChunkedFuture{}, 2};
  EXPECT_EQ(a.acoustic_encode(Var::constant(x), c).value(), b.acoustic_encode(Var::constant(x), c).value());
  EXPECT_EQ(a.acoustic_encode(Var::constant(x), c).value(), a.acoustic_encode(Var::constant(x), c).value());
}

TEST(AcousticEncoder, StreamingMatchesOffline) {
  ParamStore ps;
  Rng rng(12);
  const AcousticEncoder enc(ps, small_encoder(), rng);
  for (auto v : ps.vars()) randomize(v, rng, 0.3);
  for (const auto& c : streaming_configs()) {
    for (std::size_t len : {72u, 70u, 5u, 43u}) {  // 3 chunks of 4 frames; ragged tails
      const Tensor x = random_matrix(rng, len, 4);
      const Tensor offline = enc.encode(Var::constant(x), c).value();
      const Tensor streamed = stream_all(enc, x, c);
      ASSERT_EQ(streamed.rows(), offline.rows()) << c.describe();
      EXPECT_LE(max_abs_diff(streamed, offline), 1e-9) << c.describe() << " len=" << len;
    }
  }
}

TEST(AcousticEncoder, FixedPastCacheIsBounded) {
  ParamStore ps;
  Rng rng(13);
  const AcousticEncoder enc(ps, small_encoder(), rng);
  const MaskConfig c{FixedPast{4}, ChunkedFuture{}, 1};
  std::size_t max_cache = 0;
  stream_all(enc, random_matrix(rng, 120, 4), c, &max_cache);
  EXPECT_LE(max_cache, 4u);
  EXPECT_GT(max_cache, 0u);
}

TEST(AcousticEncoder, StreamingRejectsMisuse) {
  ParamStore ps;
  Rng rng(14);
  const AcousticEncoder enc(ps, small_encoder(), rng);
  const MaskConfig chunked{UnlimitedPast{}, ChunkedFuture{}, 2};
  StreamState st = enc.start_stream();
  EXPECT_THROW(enc.encode_chunk(Tensor::matrix(6, 4), st, chunked, false), std::invalid_argument);
  EXPECT_THROW(enc.encode_chunk(Tensor::matrix(12, 4), st, MaskConfig{UnlimitedPast{}, FixedFuture{2}, std::nullopt}, false),
               std::invalid_argument);
  enc.encode_chunk(Tensor::matrix(3, 4), st, chunked, true);
  EXPECT_THROW(enc.encode_chunk(Tensor::matrix(0, 4), st, chunked, true), std::logic_error);
}

TEST(LabelEncoder, EmptySequenceGivesStartRow) {
  const TransducerModel m(ModelConfig::tiny(5, 4), 1);
  EXPECT_EQ(m.label_encode(std::vector<int>{}).rows(), 1u);
  EXPECT_EQ(m.label_encode(std::vector<int>{1, 2, 3}).rows(), 4u);
  EXPECT_THROW(m.label_encode(std::vector<int>{0}), std::out_of_range);
  EXPECT_THROW(m.label_encode(std::vector<int>{6}), std::out_of_range);
}

TEST(LabelEncoder, Causal) {
  const TransducerModel m(ModelConfig::tiny(5, 4), 2);
  const Tensor a = m.label_encode(std::vector<int>{1, 2, 3, 4}).value();
  const Tensor b = m.label_encode(std::vector<int>{1, 2, 5, 5}).value();
  EXPECT_EQ(a.slice_rows(0, 3), b.slice_rows(0, 3));
  EXPECT_GT(max_abs_diff(a.slice_rows(3, 5), b.slice_rows(3, 5)), 0.0);
}

TEST(LabelEncoder, IncrementalMatchesBatch) {
  Rng rng(15);
  for (const LabelMaskConfig& lm : {LabelMaskConfig{}, LabelMaskConfig{2}}) {
    ParamStore ps;
    const LabelEncoder enc(ps, LabelEncoderConfig{6, 2, 8, 2, 2, 3}, rng);
    for (auto v : ps.vars()) randomize(v, rng, 0.4);
    const std::vector<int> y = oracle::random_labels(rng, 9, 6);
    const Tensor batch = enc.encode(y, lm).value();
    LabelState st = enc.start();
    Tensor inc = enc.step(st, 0, lm);
    for (int t : y) inc = vconcat(inc, enc.step(st, t, lm));
    EXPECT_LE(max_abs_diff(inc, batch), 1e-9);
    if (lm.lookback_tokens) {
      for (const auto& l : st.layers) EXPECT_LE(l.length(), *lm.lookback_tokens);
    }
  }
}

TEST(LabelEncoder, LookbackClipsDistantHistory) {
  Rng rng(16);
  ParamStore ps;
  const LabelEncoder enc(ps, LabelEncoderConfig{6, 1, 8, 2, 2, 3}, rng);
  const LabelMaskConfig lm{1};
  // one layer, look-back 1: row u sees only rows u-1 and u
  const Tensor a = enc.encode(std::vector<int>{1, 2, 3, 4}, lm).value();
  const Tensor b = enc.encode(std::vector<int>{5, 6, 3, 4}, lm).value();
  EXPECT_EQ(a.slice_rows(4, 5), b.slice_rows(4, 5));
  LabelState st = enc.start();
  EXPECT_THROW(enc.step(st, 1, lm), std::invalid_argument);
}

TEST(Model, CompositeGradientCheck) {
  TransducerModel m(ModelConfig::tiny(3, 4), 17);
  Rng rng(18);
  for (auto v : m.params().vars()) randomize(v, rng, 0.3);
  const Tensor x = random_matrix(rng, 14, 4);
  const std::vector<int> y{1, 3};
  const MaskConfig c{FixedPast{1}, ChunkedFuture{}, 2};
  const auto rep = grad_check_report(
      [&] { return utterance_loss(m, x, y, c, LossConfig{}); }, m.params().vars(), 1e-5, 3);
  EXPECT_LE(rep.max_rel_err, 1e-4) << "param " << rep.worst_param << " idx " << rep.worst_index << " a=" << rep.analytic
                                   << " n=" << rep.numeric;
  EXPECT_GT(rep.coordinates, 100u);
}
