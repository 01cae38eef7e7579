#pragma once

// Acoustic encoder (decimating front-end + layer-normalized causal Conformer
// blocks under a configurable attention mask) and causal transformer label
// encoder, each with an offline path and a cached incremental path.

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmtt/layers.hpp"
#include "vmtt/masking.hpp"
#include "vmtt/tensor.hpp"

namespace vmtt {

struct EncoderConfig {
  std::size_t input_dim = 16;
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ff_mult = 4;
  std::size_t conv_kernel = 3;
  std::size_t downsample_factor = 6;
  std::size_t rel_pos_window = 16;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;

  void validate() const {
    if (n_layers < 1) throw std::invalid_argument("EncoderConfig: n_layers must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("EncoderConfig: d_model must be divisible by n_heads");
    if (d_model < 2) throw std::invalid_argument("EncoderConfig: d_model must be >= 2");
    if (conv_kernel % 2 == 0) throw std::invalid_argument("EncoderConfig: conv_kernel must be odd");
    if (downsample_factor < 1) throw std::invalid_argument("EncoderConfig: downsample_factor must be >= 1");
    if (ff_mult < 1 || input_dim < 1 || rel_pos_window < 1)
      throw std::invalid_argument("EncoderConfig: ff_mult, input_dim and rel_pos_window must be >= 1");
  }

  /// Stride of the front-end convolution and number of its output frames
  /// concatenated per encoder frame (stride * group == downsample_factor).
  std::size_t conv_stride() const { return downsample_factor % 2 == 0 ? 2 : 1; }
  std::size_t concat_group() const { return downsample_factor / conv_stride(); }
  std::size_t output_frames(std::size_t input_frames) const {
    return (input_frames + downsample_factor - 1) / downsample_factor;
  }
};

// ---------------------------------------------------------------------------
// Front-end

/// Strided convolution (kernel 3, causal at the decimation-window level)
/// followed by concatenation of consecutive conv frames and a projection.
struct Downsampler {
  static constexpr std::size_t kKernel = 3;
  std::size_t stride = 2;
  std::size_t group = 3;
  Linear conv;
  Linear project;

  static Downsampler create(ParamStore& ps, const EncoderConfig& cfg, Rng& rng) {
    Downsampler d;
    d.stride = cfg.conv_stride();
    d.group = cfg.concat_group();
    d.conv = Linear::create(ps, "downsample.conv", kKernel * cfg.input_dim, cfg.d_model, rng);
    d.project = Linear::create(ps, "downsample.project", d.group * cfg.d_model, cfg.d_model, rng);
    return d;
  }

  std::size_t history() const { return kKernel - stride; }
  std::size_t factor() const { return stride * group; }

  /// `x` holds `lead` rows of left context followed by whole decimation
  /// windows (the caller zero-pads a trailing partial window). Rows before
  /// the buffer read as zero.
  Var forward(const Var& x, std::size_t lead, std::size_t n_out) const {
    const std::ptrdiff_t offset = static_cast<std::ptrdiff_t>(lead) - static_cast<std::ptrdiff_t>(history());
    Var c = swish(conv(frame_stack(x, kKernel, stride, offset, n_out * group)));
    return project(frame_stack(c, group, group, 0, n_out));
  }
};

// ---------------------------------------------------------------------------
// Conformer block

/// Pointwise conv + GLU, causal depthwise conv, layer norm (in place of batch
/// norm), swish, pointwise conv.
struct ConvModule {
  LayerNorm norm;
  Linear pointwise_in;  // d -> 2d
  Var depthwise_kernel;  // K x d
  Var depthwise_bias;    // 1 x d
  LayerNorm conv_norm;
  Linear pointwise_out;

  static ConvModule create(ParamStore& ps, const std::string& name, std::size_t d, std::size_t kernel, Rng& rng) {
    ConvModule m;
    m.norm = LayerNorm::create(ps, name + ".norm", d);
    m.pointwise_in = Linear::create(ps, name + ".pointwise_in", d, 2 * d, rng);
    m.depthwise_kernel = ps.add(name + ".depthwise.kernel", xavier_uniform(rng, kernel, d));
    m.depthwise_bias = ps.add(name + ".depthwise.bias", Tensor({1, d}, 0.0));
    m.conv_norm = LayerNorm::create(ps, name + ".conv_norm", d);
    m.pointwise_out = Linear::create(ps, name + ".pointwise_out", d, d, rng);
    return m;
  }

  /// GLU output feeding the depthwise convolution (cached in streaming).
  Var gated(const Var& x) const {
    Var h = pointwise_in(norm(x));
    const std::size_t d = x.cols();
    return mul(slice_cols(h, 0, d), sigmoid(slice_cols(h, d, 2 * d)));
  }

  /// Frames the mask's past rule excludes are also cut from the conv taps,
  /// so the block's reach never exceeds the attention receptive field.
  Var finish(const Var& gated_with_history, std::size_t history_rows, const MaskConfig& cfg, std::size_t q_begin) const {
    const std::size_t K = depthwise_kernel.rows(), n = gated_with_history.rows() - history_rows;
    std::vector<std::size_t> max_lag(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t t = q_begin + i;
      while (max_lag[i] + 1 < K && max_lag[i] + 1 <= t && cfg.past_allows(t, t - max_lag[i] - 1)) ++max_lag[i];
    }
    Var c = depthwise_conv1d_causal(gated_with_history, depthwise_kernel, depthwise_bias, history_rows, max_lag);
    return pointwise_out(swish(conv_norm(c)));
  }
};

struct ConformerBlock {
  FeedForward ff_in;
  LayerNorm attn_norm;
  MultiHeadAttention attn;
  ConvModule conv;
  FeedForward ff_out;
  LayerNorm out_norm;

  static ConformerBlock create(ParamStore& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng) {
    ConformerBlock b;
    b.ff_in = FeedForward::create(ps, name + ".ff_in", cfg.d_model, cfg.ff_mult, rng);
    b.attn_norm = LayerNorm::create(ps, name + ".attn_norm", cfg.d_model);
    b.attn = MultiHeadAttention::create(ps, name + ".attn", cfg.d_model, cfg.n_heads, cfg.rel_pos_window, true, rng);
    b.conv = ConvModule::create(ps, name + ".conv", cfg.d_model, cfg.conv_kernel, rng);
    b.ff_out = FeedForward::create(ps, name + ".ff_out", cfg.d_model, cfg.ff_mult, rng);
    b.out_norm = LayerNorm::create(ps, name + ".out_norm", cfg.d_model);
    return b;
  }

  /// Processes frames at absolute positions [q_begin, q_begin + x.rows()).
  /// With a cache, keys/values and conv history of earlier frames come from
  /// it and it is updated afterwards; without, x is the whole sequence.
  Var forward(const Var& x, const MaskConfig& cfg, std::size_t q_begin, LayerCache* cache,
              std::size_t conv_kernel) const {
    const std::size_t n = x.rows();
    Var h = add(x, scale(ff_in(x), 0.5));

    Var z = attn_norm(h);
    Var q = attn.query(z), k = attn.key(z), v = attn.value(z);
    std::size_t k_begin = q_begin;
    if (cache && cache->length() > 0) {
      k_begin = q_begin - cache->length();
      k = concat_rows({Var::constant(cache->keys), k});
      v = concat_rows({Var::constant(cache->values), v});
    }
    const AttentionMask mask = build_mask_block(cfg, q_begin, n, k_begin, k.rows());
    for (std::size_t t = 0; t < n; ++t)
      if (mask.row_count(t) == 0) throw std::invalid_argument("attention: row with no allowed key");
    h = add(h, attn.attend(q, k, v, mask, static_cast<std::ptrdiff_t>(q_begin), static_cast<std::ptrdiff_t>(k_begin)));

    Var g = conv.gated(h);
    std::size_t hist = 0;
    Var g_in = g;
    if (cache && cache->conv_history.rows() > 0) {
      hist = cache->conv_history.rows();
      g_in = concat_rows({Var::constant(cache->conv_history), g});
    }
    h = add(h, conv.finish(g_in, hist, cfg, q_begin));
    h = add(h, scale(ff_out(h), 0.5));
    Var out = out_norm(h);

    if (cache) {
      const std::size_t n_k = k.rows();
      std::size_t drop = 0;
      if (auto keep = cfg.max_lookback_frames(); keep && n_k > *keep) drop = n_k - *keep;
      cache->keys = k.value().slice_rows(drop, n_k);
      cache->values = v.value().slice_rows(drop, n_k);
      const Tensor& all = g_in.value();
      const std::size_t keep_conv = conv_kernel - 1;
      cache->conv_history = all.rows() > keep_conv ? all.slice_rows(all.rows() - keep_conv, all.rows()) : all;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Acoustic encoder

/// Per-session state for chunked streaming encoding.
struct StreamState {
  std::vector<LayerCache> layers;
  std::size_t frames_consumed = 0;        // encoder frames emitted
  std::size_t input_frames_consumed = 0;  // feature frames received
  Tensor residue;                         // feature frames not yet forming a window
  Tensor history;                         // trailing feature rows of the last window
  bool finished = false;
};

class AcousticEncoder {
 public:
  AcousticEncoder() = default;
  AcousticEncoder(ParamStore& ps, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    downsampler_ = Downsampler::create(ps, cfg_, rng);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l)
      blocks_.push_back(ConformerBlock::create(ps, "acoustic.block" + std::to_string(l), cfg_, rng));
  }

  const EncoderConfig& config() const { return cfg_; }

  /// features (T_in x input_dim) -> (ceil(T_in / factor) x d_model).
  Var downsample(const Var& features) const {
    if (features.rows() < 1) throw std::invalid_argument("downsample: empty input");
    if (features.cols() != cfg_.input_dim) throw std::invalid_argument("downsample: feature dimension mismatch");
    return downsampler_.forward(features, 0, cfg_.output_frames(features.rows()));
  }

  Var encode(const Var& features, const MaskConfig& mask_cfg) const {
    mask_cfg.validate();
    Var x = downsample(features);
    for (const auto& b : blocks_) x = b.forward(x, mask_cfg, 0, nullptr, cfg_.conv_kernel);
    return x;
  }

  StreamState start_stream() const {
    StreamState s;
    s.layers.resize(blocks_.size());
    s.history = Tensor::matrix(downsampler_.history(), cfg_.input_dim);
    s.residue = Tensor::matrix(0, cfg_.input_dim);
    return s;
  }

  /// Consumes one chunk of feature frames and returns the encodings of the
  /// encoder frames it completes. Non-final chunks must carry exactly
  /// chunk_frames * factor feature frames.
  Tensor encode_chunk(const Tensor& chunk, StreamState& state, const MaskConfig& mask_cfg, bool final) const {
    mask_cfg.validate();
    if (!mask_cfg.streamable())
      throw std::invalid_argument("streaming encode requires a chunked or strictly causal future policy");
    if (state.finished) throw std::logic_error("streaming encode: stream already finished");
    if (chunk.rows() > 0 && chunk.cols() != cfg_.input_dim)
      throw std::invalid_argument("streaming encode: feature dimension mismatch");
    const std::size_t factor = cfg_.downsample_factor;
    const std::size_t step = mask_cfg.chunk();
    if (!final && (step >= kFullContextChunk || chunk.rows() != step * factor))
      throw std::invalid_argument("streaming encode: chunk of " + std::to_string(chunk.rows()) +
                                  " feature frames does not match chunk_frames=" + std::to_string(step));
    if (final && step < kFullContextChunk && chunk.rows() > step * factor)
      throw std::invalid_argument("streaming encode: final chunk longer than chunk_frames");

    NoGradGuard no_grad;
    Tensor buf = vconcat(state.residue, chunk);
    state.input_frames_consumed += chunk.rows();
    std::size_t n_out = buf.rows() / factor;
    const std::size_t used = n_out * factor;
    if (final && buf.rows() > used) ++n_out;
    state.finished = final;
    if (n_out == 0) {
      state.residue = buf;
      return Tensor::matrix(0, cfg_.d_model);
    }
    Tensor windows = Tensor::matrix(n_out * factor, cfg_.input_dim);
    std::copy(buf.storage().begin(), buf.storage().end(), windows.storage().begin());
    state.residue = final ? Tensor::matrix(0, cfg_.input_dim) : buf.slice_rows(used, buf.rows());

    const std::size_t lead = downsampler_.history();
    Tensor with_hist = vconcat(state.history, windows);
    Var x = downsampler_.forward(Var::constant(with_hist), lead, n_out);
    state.history = with_hist.slice_rows(with_hist.rows() - lead, with_hist.rows());

    for (std::size_t l = 0; l < blocks_.size(); ++l)
      x = blocks_[l].forward(x, mask_cfg, state.frames_consumed, &state.layers[l], cfg_.conv_kernel);
    state.frames_consumed += n_out;
    return x.value();
  }

  const std::vector<ConformerBlock>& blocks() const { return blocks_; }

 private:
  EncoderConfig cfg_;
  Downsampler downsampler_;
  std::vector<ConformerBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Label encoder

struct LabelEncoderConfig {
  std::size_t vocab_size = 16;  // tokens 1..vocab_size; id 0 is the start symbol
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ff_mult = 4;
  std::size_t rel_pos_window = 16;

  friend bool operator==(const LabelEncoderConfig&, const LabelEncoderConfig&) = default;

  void validate() const {
    if (vocab_size < 1) throw std::invalid_argument("LabelEncoderConfig: vocab_size must be >= 1");
    if (n_layers < 1) throw std::invalid_argument("LabelEncoderConfig: n_layers must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("LabelEncoderConfig: d_model must be divisible by n_heads");
  }
};

struct TransformerBlock {
  LayerNorm attn_norm;
  MultiHeadAttention attn;
  FeedForward ff;

  static TransformerBlock create(ParamStore& ps, const std::string& name, const LabelEncoderConfig& cfg, Rng& rng) {
    TransformerBlock b;
    b.attn_norm = LayerNorm::create(ps, name + ".attn_norm", cfg.d_model);
    b.attn = MultiHeadAttention::create(ps, name + ".attn", cfg.d_model, cfg.n_heads, cfg.rel_pos_window, false, rng);
    b.ff = FeedForward::create(ps, name + ".ff", cfg.d_model, cfg.ff_mult, rng);
    return b;
  }

  Var forward(const Var& x, const LabelMaskConfig& cfg, std::size_t q_begin, LayerCache* cache) const {
    const std::size_t n = x.rows();
    Var z = attn_norm(x);
    Var q = attn.query(z), k = attn.key(z), v = attn.value(z);
    std::size_t k_begin = q_begin;
    if (cache && cache->length() > 0) {
      k_begin = q_begin - cache->length();
      k = concat_rows({Var::constant(cache->keys), k});
      v = concat_rows({Var::constant(cache->values), v});
    }
    const AttentionMask mask = build_mask_block(cfg, q_begin, n, k_begin, k.rows());
    Var h = add(x, attn.attend(q, k, v, mask, static_cast<std::ptrdiff_t>(q_begin), static_cast<std::ptrdiff_t>(k_begin)));
    h = add(h, ff(h));
    if (cache) {
      const std::size_t n_k = k.rows();
      std::size_t drop = 0;
      if (cfg.lookback_tokens && n_k > *cfg.lookback_tokens) drop = n_k - *cfg.lookback_tokens;
      cache->keys = k.value().slice_rows(drop, n_k);
      cache->values = v.value().slice_rows(drop, n_k);
    }
    return h;
  }
};

/// Incremental label-encoder state: caches for positions 0..position-1.
struct LabelState {
  std::vector<LayerCache> layers;
  std::size_t position = 0;
};

class LabelEncoder {
 public:
  LabelEncoder() = default;
  LabelEncoder(ParamStore& ps, const LabelEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    Tensor table = Tensor::matrix(cfg_.vocab_size + 1, cfg_.d_model);
    for (auto& v : table.storage()) v = rng.normal();
    embedding_ = ps.add("label.embedding", std::move(table));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l)
      blocks_.push_back(TransformerBlock::create(ps, "label.block" + std::to_string(l), cfg_, rng));
    final_norm_ = LayerNorm::create(ps, "label.final_norm", cfg_.d_model);
  }

  const LabelEncoderConfig& config() const { return cfg_; }

  void check_tokens(std::span<const int> tokens) const {
    for (int t : tokens)
      if (t < 1 || static_cast<std::size_t>(t) > cfg_.vocab_size)
        throw std::out_of_range("label encoder: token id " + std::to_string(t) + " outside vocabulary 1.." +
                                std::to_string(cfg_.vocab_size));
  }

  /// Row u encodes y_{1:u}; row 0 is the start-symbol encoding.
  Var encode(std::span<const int> tokens, const LabelMaskConfig& mask_cfg) const {
    check_tokens(tokens);
    std::vector<int> ids;
    ids.reserve(tokens.size() + 1);
    ids.push_back(0);
    ids.insert(ids.end(), tokens.begin(), tokens.end());
    Var x = embedding(embedding_, ids);
    for (const auto& b : blocks_) x = b.forward(x, mask_cfg, 0, nullptr);
    return final_norm_(x);
  }

  LabelState start() const {
    LabelState s;
    s.layers.resize(blocks_.size());
    return s;
  }

  /// Feeds the start symbol (first call, id 0) or the next token and returns
  /// the encoding row for the prefix so far.
  Tensor step(LabelState& state, int symbol, const LabelMaskConfig& mask_cfg) const {
    if (state.position == 0) {
      if (symbol != 0) throw std::invalid_argument("label encoder: first step must feed the start symbol 0");
    } else {
      check_tokens(std::span<const int>(&symbol, 1));
    }
    NoGradGuard no_grad;
    const int id = symbol;
    Var x = embedding(embedding_, std::span<const int>(&id, 1));
    for (std::size_t l = 0; l < blocks_.size(); ++l) x = blocks_[l].forward(x, mask_cfg, state.position, &state.layers[l]);
    ++state.position;
    return final_norm_(x).value();
  }

 private:
  LabelEncoderConfig cfg_;
  Var embedding_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
};

}  // namespace vmtt
