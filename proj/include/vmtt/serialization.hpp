#pragma once

// JSON forms of configs, corpora and decode records. Time-valued fields
// carry their unit in the key: `_frames` (60 ms encoder frames) or `_ms`
// (must be a multiple of 60).

#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vmtt/corpus.hpp"
#include "vmtt/decoder.hpp"
#include "vmtt/masking.hpp"
#include "vmtt/model.hpp"
#include "vmtt/training.hpp"

namespace vmtt {

using json = nlohmann::json;

namespace detail {
inline std::optional<std::size_t> frames_field(const json& j, const std::string& base) {
  const bool has_frames = j.contains(base + "_frames"), has_ms = j.contains(base + "_ms");
  if (has_frames && has_ms) throw std::invalid_argument("config: both " + base + "_frames and " + base + "_ms given");
  if (has_frames) return j.at(base + "_frames").get<std::size_t>();
  if (has_ms) {
    const double ms = j.at(base + "_ms").get<double>();
    const double frames = ms / kFrameMs;
    if (ms < 0 || std::abs(frames - std::round(frames)) > 1e-9)
      throw std::invalid_argument("config: " + base + "_ms must be a non-negative multiple of 60");
    return static_cast<std::size_t>(std::round(frames));
  }
  return std::nullopt;
}

inline std::size_t required_frames(const json& j, const std::string& base) {
  auto v = frames_field(j, base);
  if (!v) throw std::invalid_argument("config: missing " + base + "_frames or " + base + "_ms");
  return *v;
}
}  // namespace detail

inline json to_json(const PastPolicy& p) {
  if (std::holds_alternative<UnlimitedPast>(p)) return {{"policy", "unlimited"}};
  if (const auto* f = std::get_if<FixedPast>(&p)) return {{"policy", "fixed"}, {"lookback_frames", f->frames}};
  return {{"policy", "chunked"}, {"lookback_chunks", std::get<ChunkedPast>(p).chunks}};
}

inline PastPolicy past_from_json(const json& j) {
  const auto policy = j.at("policy").get<std::string>();
  if (policy == "unlimited") return UnlimitedPast{};
  if (policy == "fixed") return FixedPast{detail::required_frames(j, "lookback")};
  if (policy == "chunked") return ChunkedPast{j.at("lookback_chunks").get<std::size_t>()};
  throw std::invalid_argument("config: unknown past policy '" + policy + "'");
}

inline json to_json(const FutureOption& f) {
  json j;
  if (std::holds_alternative<NoFuture>(f.policy)) j["policy"] = "none";
  else if (const auto* x = std::get_if<FixedFuture>(&f.policy)) j = {{"policy", "fixed"}, {"lookahead_frames", x->frames}};
  else j["policy"] = "chunked";
  if (f.chunk_frames) {
    if (*f.chunk_frames >= kFullContextChunk) j["chunk"] = "full";
    else j["chunk_frames"] = *f.chunk_frames;
  }
  return j;
}

inline FutureOption future_from_json(const json& j) {
  FutureOption f;
  const auto policy = j.at("policy").get<std::string>();
  if (policy == "none") f.policy = NoFuture{};
  else if (policy == "fixed") f.policy = FixedFuture{detail::required_frames(j, "lookahead")};
  else if (policy == "chunked") f.policy = ChunkedFuture{};
  else throw std::invalid_argument("config: unknown future policy '" + policy + "'");
  if (j.contains("chunk")) {
    if (j.at("chunk") != "full") throw std::invalid_argument("config: chunk must be \"full\" or use chunk_frames/chunk_ms");
    f.chunk_frames = kFullContextChunk;
  } else {
    f.chunk_frames = detail::frames_field(j, "chunk");
  }
  return f;
}

inline json to_json(const MaskConfig& c) {
  return {{"past", to_json(c.past)}, {"future", to_json(FutureOption{c.future, c.chunk_frames})}};
}

inline MaskConfig mask_config_from_json(const json& j) {
  const FutureOption f = future_from_json(j.at("future"));
  MaskConfig c{past_from_json(j.at("past")), f.policy, f.chunk_frames};
  c.validate();
  return c;
}

inline json to_json(const VariableMaskSet& s) {
  json j{{"past_options", json::array()}, {"future_options", json::array()}};
  for (const auto& p : s.past_options) j["past_options"].push_back(to_json(p));
  for (const auto& f : s.future_options) j["future_options"].push_back(to_json(f));
  if (!s.past_weights.empty()) j["past_weights"] = s.past_weights;
  if (!s.future_weights.empty()) j["future_weights"] = s.future_weights;
  return j;
}

inline VariableMaskSet mask_set_from_json(const json& j) {
  VariableMaskSet s;
  for (const auto& p : j.at("past_options")) s.past_options.push_back(past_from_json(p));
  for (const auto& f : j.at("future_options")) s.future_options.push_back(future_from_json(f));
  if (j.contains("past_weights")) s.past_weights = j.at("past_weights").get<std::vector<double>>();
  if (j.contains("future_weights")) s.future_weights = j.at("future_weights").get<std::vector<double>>();
  s.validate();
  return s;
}

inline json to_json(const ModelConfig& c) {
  const auto& a = c.acoustic;
  const auto& l = c.label;
  json j{{"acoustic",
          {{"input_dim", a.input_dim},
           {"n_layers", a.n_layers},
           {"d_model", a.d_model},
           {"n_heads", a.n_heads},
           {"ff_mult", a.ff_mult},
           {"conv_kernel", a.conv_kernel},
           {"downsample_factor", a.downsample_factor},
           {"rel_pos_window_frames", a.rel_pos_window}}},
         {"label",
          {{"vocab_size", l.vocab_size},
           {"n_layers", l.n_layers},
           {"d_model", l.d_model},
           {"n_heads", l.n_heads},
           {"ff_mult", l.ff_mult},
           {"rel_pos_window_tokens", l.rel_pos_window}}},
         {"d_joint", c.d_joint},
         {"blank_index", kBlank}};
  j["label"]["lookback_tokens"] = c.label_mask.lookback_tokens ? json(*c.label_mask.lookback_tokens) : json(nullptr);
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  if (j.contains("blank_index") && j.at("blank_index").get<int>() != kBlank)
    throw std::invalid_argument("model config: unsupported blank index");
  ModelConfig c;
  const auto& a = j.at("acoustic");
  c.acoustic = EncoderConfig{a.at("input_dim"),   a.at("n_layers"),          a.at("d_model"),
                             a.at("n_heads"),     a.at("ff_mult"),           a.at("conv_kernel"),
                             a.at("downsample_factor"), a.at("rel_pos_window_frames")};
  const auto& l = j.at("label");
  c.label = LabelEncoderConfig{l.at("vocab_size"), l.at("n_layers"), l.at("d_model"),
                               l.at("n_heads"),    l.at("ff_mult"),  l.at("rel_pos_window_tokens")};
  if (l.contains("lookback_tokens") && !l.at("lookback_tokens").is_null())
    c.label_mask.lookback_tokens = l.at("lookback_tokens").get<std::size_t>();
  c.d_joint = j.at("d_joint");
  c.validate();
  return c;
}

inline json to_json(const SyntheticTaskSpec& s) {
  return {{"vocab_size", s.vocab_size},
          {"min_tokens", s.min_tokens},
          {"max_tokens", s.max_tokens},
          {"min_token_input_frames", s.min_token_frames},
          {"max_token_input_frames", s.max_token_frames},
          {"feature_dim", s.feature_dim},
          {"noise", s.noise},
          {"utterances", s.utterances},
          {"seed", s.seed}};
}

/// Keys missing from `j` keep their value in `base`.
inline SyntheticTaskSpec task_spec_from_json(const json& j, const SyntheticTaskSpec& base = {}) {
  SyntheticTaskSpec s = base;
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.min_tokens = j.value("min_tokens", s.min_tokens);
  s.max_tokens = j.value("max_tokens", s.max_tokens);
  s.min_token_frames = j.value("min_token_input_frames", s.min_token_frames);
  s.max_token_frames = j.value("max_token_input_frames", s.max_token_frames);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.noise = j.value("noise", s.noise);
  s.utterances = j.value("utterances", s.utterances);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

inline json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.optimizer.learning_rate},
          {"lr_decay_per_step", c.optimizer.lr_decay},
          {"momentum", c.optimizer.momentum},
          {"grad_clip", c.optimizer.grad_clip},
          {"fastemit_lambda", c.loss.fastemit_lambda},
          {"seed", c.seed}};
}

/// Keys missing from `j` keep their value in `base`.
inline TrainConfig train_config_from_json(const json& j, const TrainConfig& base = {}) {
  TrainConfig c = base;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
  c.optimizer.lr_decay = j.value("lr_decay_per_step", c.optimizer.lr_decay);
  c.optimizer.momentum = j.value("momentum", c.optimizer.momentum);
  c.optimizer.grad_clip = j.value("grad_clip", c.optimizer.grad_clip);
  c.loss.fastemit_lambda = j.value("fastemit_lambda", c.loss.fastemit_lambda);
  c.seed = j.value("seed", c.seed);
  c.loss.validate();
  return c;
}

inline json tensor_rows(const Tensor& t) {
  json rows = json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto row = t.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

inline Tensor tensor_from_rows(const json& rows, std::size_t cols) {
  Tensor t = Tensor::matrix(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) throw std::invalid_argument("tensor rows: ragged row");
    for (std::size_t c = 0; c < cols; ++c) t(r, c) = rows[r][c].get<double>();
  }
  return t;
}

inline json to_json(const Corpus& c) {
  json j{{"spec", to_json(c.spec)}, {"embeddings", tensor_rows(c.embeddings)}, {"utterances", json::array()}};
  for (const auto& u : c.utterances) {
    json spans = json::array();
    for (const auto& s : u.spans) spans.push_back({s.start, s.end});
    j["utterances"].push_back(
        {{"id", u.id}, {"tokens", u.tokens}, {"spans_input_frames", spans}, {"features", tensor_rows(u.features)}});
  }
  return j;
}

inline Corpus corpus_from_json(const json& j) {
  Corpus c;
  c.spec = task_spec_from_json(j.at("spec"));
  c.embeddings = tensor_from_rows(j.at("embeddings"), c.spec.feature_dim);
  for (const auto& ju : j.at("utterances")) {
    Utterance u;
    u.id = ju.at("id").get<std::string>();
    u.tokens = ju.at("tokens").get<std::vector<int>>();
    for (const auto& s : ju.at("spans_input_frames")) u.spans.push_back(TokenSpan{s.at(0), s.at(1)});
    u.features = tensor_from_rows(ju.at("features"), c.spec.feature_dim);
    if (u.spans.size() != u.tokens.size()) throw std::invalid_argument("corpus: span count does not match tokens");
    c.utterances.push_back(std::move(u));
  }
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return json::parse(in);
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Decode records: one JSON object per line.

inline json hypothesis_record(const std::string& utt, const std::string& cfg, std::size_t rank,
                              const TimedHypothesis& h) {
  json j{{"type", "hyp"},  {"utterance", utt},   {"config", cfg},          {"rank", rank},
         {"tokens", h.tokens}, {"score", h.score}, {"emit_ms", h.emit_audio_ms}};
  if (h.first_pass_score) j["first_pass_score"] = *h.first_pass_score;
  if (h.first_pass_rank) j["first_pass_rank"] = *h.first_pass_rank;
  return j;
}

inline TimedHypothesis hypothesis_from_record(const json& j) {
  TimedHypothesis h;
  h.tokens = j.at("tokens").get<std::vector<int>>();
  h.score = j.at("score").get<double>();
  h.emit_audio_ms = j.at("emit_ms").get<std::vector<double>>();
  if (j.contains("first_pass_score")) h.first_pass_score = j.at("first_pass_score").get<double>();
  if (j.contains("first_pass_rank")) h.first_pass_rank = j.at("first_pass_rank").get<std::size_t>();
  return h;
}

inline json partial_record(const std::string& utt, const std::string& cfg, const PartialSnapshot& s) {
  return {{"type", "partial"}, {"utterance", utt}, {"config", cfg}, {"audio_ms", s.audio_consumed_ms}, {"tokens", s.tokens}};
}

inline PartialSnapshot partial_from_record(const json& j) {
  return PartialSnapshot{j.at("audio_ms").get<double>(), j.at("tokens").get<std::vector<int>>()};
}

}  // namespace vmtt
