#pragma once

// Sweep orchestration: train one variable-mask model, decode it under every
// configuration of interest, and tabulate WER, latency and rescoring.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vmtt/corpus.hpp"
#include "vmtt/csv.hpp"
#include "vmtt/decoder.hpp"
#include "vmtt/metrics.hpp"
#include "vmtt/model.hpp"
#include "vmtt/rescoring.hpp"
#include "vmtt/serialization.hpp"
#include "vmtt/training.hpp"

namespace vmtt {

struct RescoreSweep {
  std::vector<std::size_t> first_pass_chunks{1, 4};
  /// 0.36, 1.8, 3.6 and 30 s
  std::vector<std::size_t> wide_chunks{6, 30, 60, 500};
  std::size_t beam = 10;
  std::size_t n_best = 10;
};

/// Chunk sizes {1, 2, 4, 8, full} crossed with look-back {12 frames, unlimited}.
inline VariableMaskSet default_mask_set() {
  VariableMaskSet s;
  s.past_options = {FixedPast{12}, UnlimitedPast{}};
  for (std::size_t c : {std::size_t{1}, std::size_t{2}, std::size_t{4}, std::size_t{8}, kFullContextChunk})
    s.future_options.push_back(FutureOption{ChunkedFuture{}, c});
  return s;
}

inline TrainConfig default_train_config() {
  TrainConfig t;
  t.steps = 400;
  t.batch_size = 8;
  t.optimizer.learning_rate = 0.05;
  t.optimizer.lr_decay = 0.997;
  t.optimizer.momentum = 0.9;
  t.optimizer.grad_clip = 5.0;
  return t;
}

struct ExperimentSpec {
  SyntheticTaskSpec task{16, 3, 6, 12, 30, 16, 0.5, 250, 1};
  std::size_t holdout = 50;
  ModelConfig model = ModelConfig::desk(16, 16);
  VariableMaskSet mask_set = default_mask_set();
  TrainConfig train = default_train_config();
  /// Empty means every configuration of the training set.
  std::vector<MaskConfig> decode_configs;
  RescoreSweep rescore;
  std::string output_dir;

  std::vector<MaskConfig> decode_grid() const { return decode_configs.empty() ? mask_set.all_configs() : decode_configs; }

  void validate() const {
    task.validate();
    model.validate();
    mask_set.validate();
    if (model.vocab_size() != task.vocab_size || model.acoustic.input_dim != task.feature_dim)
      throw std::invalid_argument("ExperimentSpec: model shape does not match task");
    if (holdout == 0 || holdout >= task.utterances)
      throw std::invalid_argument("ExperimentSpec: holdout must leave training data");
    if (rescore.beam < rescore.n_best || rescore.n_best == 0)
      throw std::invalid_argument("ExperimentSpec: need beam >= n_best >= 1");
  }
};

inline json to_json(const ExperimentSpec& e) {
  json j{{"task", to_json(e.task)},
         {"holdout_utterances", e.holdout},
         {"model", to_json(e.model)},
         {"mask_set", to_json(e.mask_set)},
         {"train", to_json(e.train)},
         {"decode_configs", json::array()},
         {"rescore",
          {{"first_pass_chunk_frames", e.rescore.first_pass_chunks},
           {"wide_chunk_frames", e.rescore.wide_chunks},
           {"beam", e.rescore.beam},
           {"n_best", e.rescore.n_best}}},
         {"output_dir", e.output_dir}};
  for (const auto& c : e.decode_configs) j["decode_configs"].push_back(to_json(c));
  return j;
}

inline ExperimentSpec experiment_from_json(const json& j) {
  ExperimentSpec e;
  if (j.contains("task")) e.task = task_spec_from_json(j.at("task"), e.task);
  e.holdout = j.value("holdout_utterances", e.holdout);
  if (j.contains("model")) e.model = model_config_from_json(j.at("model"));
  else e.model = ModelConfig::desk(e.task.vocab_size, e.task.feature_dim);
  if (j.contains("mask_set")) e.mask_set = mask_set_from_json(j.at("mask_set"));
  if (j.contains("train")) e.train = train_config_from_json(j.at("train"), e.train);
  if (j.contains("decode_configs"))
    for (const auto& c : j.at("decode_configs")) e.decode_configs.push_back(mask_config_from_json(c));
  if (j.contains("rescore")) {
    const auto& r = j.at("rescore");
    if (r.contains("first_pass_chunk_frames"))
      e.rescore.first_pass_chunks = r.at("first_pass_chunk_frames").get<std::vector<std::size_t>>();
    if (r.contains("wide_chunk_frames")) e.rescore.wide_chunks = r.at("wide_chunk_frames").get<std::vector<std::size_t>>();
    if (r.contains("wide_chunk_ms")) {
      e.rescore.wide_chunks.clear();
      for (double ms : r.at("wide_chunk_ms").get<std::vector<double>>()) e.rescore.wide_chunks.push_back(seconds_to_frames(ms / 1000.0));
    }
    e.rescore.beam = r.value("beam", e.rescore.beam);
    e.rescore.n_best = r.value("n_best", e.rescore.n_best);
  }
  e.output_dir = j.value("output_dir", e.output_dir);
  e.validate();
  return e;
}

// ---------------------------------------------------------------------------
// Result rows

inline std::string past_label(const PastPolicy& p) {
  if (std::holds_alternative<UnlimitedPast>(p)) return "unlimited";
  if (const auto* f = std::get_if<FixedPast>(&p)) return "fixed:" + std::to_string(f->frames);
  return "chunks:" + std::to_string(std::get<ChunkedPast>(p).chunks);
}

inline std::string future_label(const MaskConfig& c) {
  if (std::holds_alternative<NoFuture>(c.future)) return "none";
  if (const auto* f = std::get_if<FixedFuture>(&c.future)) return "fixed:" + std::to_string(f->frames);
  return c.chunk() >= kFullContextChunk ? "chunk:full" : "chunk:" + std::to_string(c.chunk());
}

struct WerRow {
  std::string config;
  std::string past;
  std::string future;
  double wer = 0.0;
  std::size_t substitutions = 0, deletions = 0, insertions = 0, ref_words = 0;
  bool extrapolated = false;
  friend bool operator==(const WerRow&, const WerRow&) = default;
};

struct LatencyRow {
  std::string config;
  double prwl_ms = 0.0;
  double mean_emission_delay_ms = 0.0;
  double wer = 0.0;
  std::size_t matched_words = 0, deleted_words = 0;
  friend bool operator==(const LatencyRow&, const LatencyRow&) = default;
};

struct RescoreRow {
  std::string first_pass;
  std::string wide;
  double first_pass_wer = 0.0;
  double second_pass_wer = 0.0;
  std::size_t first_pass_errors = 0, second_pass_errors = 0;
  double oracle_rank_kept_fraction = 0.0;  // oracle-best rank improved or unchanged
  std::size_t utterances = 0;
  friend bool operator==(const RescoreRow&, const RescoreRow&) = default;
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
  std::string mask;
  friend bool operator==(const TrainLogRow&, const TrainLogRow&) = default;
};

inline CsvTable to_table(const std::vector<WerRow>& rows) {
  CsvTable t{{"config", "past", "future", "wer", "substitutions", "deletions", "insertions", "ref_words", "extrapolated"},
             {}};
  for (const auto& r : rows)
    t.rows.push_back({r.config, r.past, r.future, format_double(r.wer), std::to_string(r.substitutions),
                      std::to_string(r.deletions), std::to_string(r.insertions), std::to_string(r.ref_words),
                      r.extrapolated ? "1" : "0"});
  return t;
}

inline std::vector<WerRow> wer_rows_from_table(const CsvTable& t) {
  std::vector<WerRow> out;
  for (const auto& f : t.rows)
    out.push_back(WerRow{f[0], f[1], f[2], parse_double(f[3]), parse_count(f[4]), parse_count(f[5]), parse_count(f[6]),
                         parse_count(f[7]), f[8] == "1"});
  return out;
}

inline CsvTable to_table(const std::vector<LatencyRow>& rows) {
  CsvTable t{{"config", "prwl_ms", "mean_emission_delay_ms", "wer", "matched_words", "deleted_words"}, {}};
  for (const auto& r : rows)
    t.rows.push_back({r.config, format_double(r.prwl_ms), format_double(r.mean_emission_delay_ms), format_double(r.wer),
                      std::to_string(r.matched_words), std::to_string(r.deleted_words)});
  return t;
}

inline std::vector<LatencyRow> latency_rows_from_table(const CsvTable& t) {
  std::vector<LatencyRow> out;
  for (const auto& f : t.rows)
    out.push_back(LatencyRow{f[0], parse_double(f[1]), parse_double(f[2]), parse_double(f[3]), parse_count(f[4]),
                             parse_count(f[5])});
  return out;
}

inline CsvTable to_table(const std::vector<RescoreRow>& rows) {
  CsvTable t{{"first_pass", "wide", "first_pass_wer", "second_pass_wer", "first_pass_errors", "second_pass_errors",
              "oracle_rank_kept_fraction", "utterances"},
             {}};
  for (const auto& r : rows)
    t.rows.push_back({r.first_pass, r.wide, format_double(r.first_pass_wer), format_double(r.second_pass_wer),
                      std::to_string(r.first_pass_errors), std::to_string(r.second_pass_errors),
                      format_double(r.oracle_rank_kept_fraction), std::to_string(r.utterances)});
  return t;
}

inline std::vector<RescoreRow> rescore_rows_from_table(const CsvTable& t) {
  std::vector<RescoreRow> out;
  for (const auto& f : t.rows)
    out.push_back(RescoreRow{f[0], f[1], parse_double(f[2]), parse_double(f[3]), parse_count(f[4]), parse_count(f[5]),
                             parse_double(f[6]), parse_count(f[7])});
  return out;
}

inline CsvTable to_table(const std::vector<TrainLogRow>& rows) {
  CsvTable t{{"step", "loss", "grad_norm", "learning_rate", "mask"}, {}};
  for (const auto& r : rows)
    t.rows.push_back({std::to_string(r.step), format_double(r.loss), format_double(r.grad_norm),
                      format_double(r.learning_rate), r.mask});
  return t;
}

inline std::vector<TrainLogRow> train_log_from_table(const CsvTable& t) {
  std::vector<TrainLogRow> out;
  for (const auto& f : t.rows)
    out.push_back(TrainLogRow{parse_count(f[0]), parse_double(f[1]), parse_double(f[2]), parse_double(f[3]), f[4]});
  return out;
}

struct SweepResults {
  std::vector<TrainLogRow> train_log;
  std::vector<WerRow> wer_grid;
  std::vector<LatencyRow> latency;
  std::vector<RescoreRow> rescore;
  std::size_t past_options = 0, future_options = 0;
  bool identity_rescore_noop = true;
  std::vector<std::string> warnings;

  friend bool operator==(const SweepResults&, const SweepResults&) = default;
};

// ---------------------------------------------------------------------------
// Pipeline

struct TrainedModel {
  std::unique_ptr<TransducerModel> model;
  std::vector<TrainLogRow> log;
};

inline TrainedModel train_model(const ModelConfig& mcfg, std::span<const Utterance> data, const VariableMaskSet& set,
                                const TrainConfig& tcfg,
                                const std::function<void(std::size_t, const StepResult&)>& on_step = {}) {
  TrainedModel out{std::make_unique<TransducerModel>(mcfg, tcfg.seed), {}};
  Trainer trainer(*out.model, data, set, tcfg);
  trainer.run([&](std::size_t s, const StepResult& r) {
    out.log.push_back(TrainLogRow{s, r.mean_loss, r.grad_norm, r.learning_rate, r.mask.describe()});
    if (on_step) on_step(s, r);
  });
  return out;
}

inline bool is_trained_config(const VariableMaskSet& set, const MaskConfig& cfg) {
  const auto all = set.all_configs();
  return std::find(all.begin(), all.end(), cfg) != all.end();
}

/// Pooled WER of streaming greedy decoding plus latency statistics.
struct DecodeSummary {
  WerResult wer;
  LatencyReport latency;  // pooled: prwl over all matched words
  double mean_emission_delay_ms = 0.0;
};

inline DecodeSummary evaluate_streaming(const TransducerModel& model, std::span<const Utterance> test,
                                        const MaskConfig& cfg) {
  DecodeSummary s;
  WerAccumulator acc;
  double prwl_sum = 0.0, delay_sum = 0.0;
  std::size_t delay_n = 0;
  for (const auto& u : test) {
    auto [hyp, trace] = greedy_decode_streaming(u.features, model, cfg);
    acc.add(wer(u.tokens, hyp.tokens));
    const auto align = word_alignment(u);
    const auto rep = prwl(align, trace);
    prwl_sum += rep.prwl_ms * static_cast<double>(rep.matched_words);
    s.latency.matched_words += rep.matched_words;
    s.latency.deleted_words += rep.deleted_words;
    s.latency.early_words += rep.early_words;
    const auto d = emission_delay(align, hyp);
    for (double x : d.delays_ms) delay_sum += x;
    delay_n += d.delays_ms.size();
  }
  s.wer = acc.total;
  s.latency.prwl_ms = s.latency.matched_words ? prwl_sum / static_cast<double>(s.latency.matched_words) : 0.0;
  s.mean_emission_delay_ms = delay_n ? delay_sum / static_cast<double>(delay_n) : 0.0;
  s.latency.mean_emission_delay_ms = s.mean_emission_delay_ms;
  return s;
}

/// Index of the hypothesis with the fewest errors against `ref`; the
/// earliest one on ties.
inline std::size_t oracle_index(const NBestList& list, const std::vector<int>& ref) {
  std::size_t best = 0, best_err = std::numeric_limits<std::size_t>::max();
  for (std::size_t i = 0; i < list.hypotheses.size(); ++i) {
    const std::size_t e = wer(ref, list.hypotheses[i].tokens).errors();
    if (e < best_err) best = i, best_err = e;
  }
  return best;
}

struct RescoreOutcome {
  std::vector<RescoreRow> rows;
  bool identity_noop = true;
};

inline RescoreOutcome evaluate_rescoring(const TransducerModel& model, std::span<const Utterance> test,
                                         const PastPolicy& past, const RescoreSweep& rs) {
  RescoreOutcome out;
  BeamOptions bo;
  bo.beam = rs.beam;
  bo.n_best = rs.n_best;
  for (std::size_t fc : rs.first_pass_chunks) {
    const MaskConfig first{past, ChunkedFuture{}, fc};
    std::vector<NBestList> lists;
    WerAccumulator first_acc;
    for (const auto& u : test) {
      lists.push_back(beam_search(u.features, model, first, bo));
      first_acc.add(wer(u.tokens, lists.back().hypotheses.front().tokens));
      const NBestList same = rescore_nbest(u.features, lists.back(), model, RescoreConfig{first});
      for (std::size_t i = 0; i < same.hypotheses.size(); ++i)
        if (same.hypotheses[i].tokens != lists.back().hypotheses[i].tokens ||
            same.hypotheses[i].score != lists.back().hypotheses[i].score)
          out.identity_noop = false;
    }
    for (std::size_t wc : rs.wide_chunks) {
      const MaskConfig wide = widened(first, wc);
      WerAccumulator second_acc;
      std::size_t kept = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        const NBestList second = rescore_nbest(test[i].features, lists[i], model, RescoreConfig{wide});
        second_acc.add(wer(test[i].tokens, second.hypotheses.front().tokens));
        const std::size_t before = oracle_index(lists[i], test[i].tokens);
        const auto& oracle_tokens = lists[i].hypotheses[before].tokens;
        std::size_t after = 0;
        while (second.hypotheses[after].tokens != oracle_tokens) ++after;
        if (after <= before) ++kept;
      }
      out.rows.push_back(RescoreRow{first.describe(), wide.describe(), first_acc.total.wer, second_acc.total.wer,
                                    first_acc.total.errors(), second_acc.total.errors(),
                                    static_cast<double>(kept) / static_cast<double>(std::max<std::size_t>(test.size(), 1)),
                                    test.size()});
    }
  }
  return out;
}

/// Decodes a trained model under the spec's grid and rescoring configs.
inline SweepResults evaluate_sweep(const ExperimentSpec& spec, const TransducerModel& model,
                                   std::span<const Utterance> test) {
  SweepResults res;
  const auto grid = spec.decode_grid();
  res.past_options = spec.mask_set.past_options.size();
  res.future_options = spec.mask_set.future_options.size();
  for (const auto& cfg : grid) {
    const bool extrapolated = !is_trained_config(spec.mask_set, cfg);
    if (extrapolated) res.warnings.push_back("decode config " + cfg.describe() + " is outside the training mask set");
    const DecodeSummary s = evaluate_streaming(model, test, cfg);
    res.wer_grid.push_back(WerRow{cfg.describe(), past_label(cfg.past), future_label(cfg), s.wer.wer,
                                  s.wer.substitutions, s.wer.deletions, s.wer.insertions, s.wer.ref_length,
                                  extrapolated});
    res.latency.push_back(LatencyRow{cfg.describe(), s.latency.prwl_ms, s.mean_emission_delay_ms, s.wer.wer,
                                     s.latency.matched_words, s.latency.deleted_words});
  }
  if (!spec.rescore.first_pass_chunks.empty()) {
    const PastPolicy past = spec.mask_set.past_options.back();
    auto rs = evaluate_rescoring(model, test, past, spec.rescore);
    res.rescore = std::move(rs.rows);
    res.identity_rescore_noop = rs.identity_noop;
  }
  return res;
}

/// Full pipeline: corpus, training, decoding. Pure function of the spec.
inline SweepResults run_sweep(const ExperimentSpec& spec,
                              const std::function<void(std::size_t, const StepResult&)>& on_step = {}) {
  spec.validate();
  const Corpus corpus = generate_corpus(spec.task);
  const auto [train, test] = split_holdout(corpus, spec.holdout);
  TrainedModel tm = train_model(spec.model, train, spec.mask_set, spec.train, on_step);
  SweepResults res = evaluate_sweep(spec, *tm.model, test);
  res.train_log = std::move(tm.log);
  return res;
}

inline std::string summarize(const SweepResults& r) {
  std::ostringstream os;
  os << "WER grid (" << r.past_options << " look-back x " << r.future_options << " chunk options)\n";
  for (const auto& w : r.wer_grid)
    os << "  " << w.past << " / " << w.future << ": WER " << 100.0 * w.wer << "%" << (w.extrapolated ? " (extrapolated)" : "")
       << '\n';
  os << "\nSystem, PRWL [ms], WER [%]\n";
  for (const auto& l : r.latency) os << "  " << l.config << ", " << l.prwl_ms << ", " << 100.0 * l.wer << '\n';
  if (!r.rescore.empty()) {
    os << "\nRescoring (first pass -> wide): WER [%]\n";
    for (const auto& x : r.rescore)
      os << "  " << x.first_pass << " -> " << x.wide << ": " << 100.0 * x.first_pass_wer << " -> "
         << 100.0 * x.second_pass_wer << '\n';
    os << "  identity rescoring keeps ranking: " << (r.identity_rescore_noop ? "yes" : "NO") << '\n';
  }
  for (const auto& w : r.warnings) os << "warning: " << w << '\n';
  return os.str();
}

inline void write_table(const std::filesystem::path& path, const CsvTable& t) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  write_csv(os, t);
}

inline CsvTable read_table(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return parse_csv(is);
}

inline void write_results(const SweepResults& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_table(dir / "train_log.csv", to_table(r.train_log));
  write_table(dir / "wer_grid.csv", to_table(r.wer_grid));
  write_table(dir / "latency.csv", to_table(r.latency));
  write_table(dir / "rescore.csv", to_table(r.rescore));
  std::ofstream(dir / "summary.txt") << summarize(r);
}

/// Reads back the tables written by write_results (summary fields that are
/// not tabulated are left default).
inline SweepResults read_results(const std::filesystem::path& dir) {
  SweepResults r;
  r.train_log = train_log_from_table(read_table(dir / "train_log.csv"));
  r.wer_grid = wer_rows_from_table(read_table(dir / "wer_grid.csv"));
  r.latency = latency_rows_from_table(read_table(dir / "latency.csv"));
  r.rescore = rescore_rows_from_table(read_table(dir / "rescore.csv"));
  return r;
}

}  // namespace vmtt
