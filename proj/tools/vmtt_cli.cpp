// vmtt: command-line front end for data generation, training, decoding,
// rescoring, latency reports, sweeps and mask plots.
//
// Relative output paths resolve against $VMTT_OUTPUT_DIR when it is set.
// Every subcommand runs a cheap self-check of its own output and exits
// nonzero if it fails.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vmtt.hpp"

using namespace vmtt;
namespace fs = std::filesystem;

namespace {

struct SelfCheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(bool ok, const std::string& what) {
  if (!ok) throw SelfCheckFailure("self-check failed: " + what);
}

fs::path out_path(const std::string& p) {
  const fs::path path(p);
  const char* env = std::getenv("VMTT_OUTPUT_DIR");
  if (path.is_absolute() || !env || !*env) return path;
  return fs::path(env) / path;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  return os;
}

std::vector<json> read_json_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<json> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

std::size_t ms_to_frames(double ms, const std::string& flag) {
  const double f = ms / kFrameMs;
  if (ms <= 0 || std::abs(f - std::round(f)) > 1e-9) throw std::invalid_argument(flag + " must be a positive multiple of 60");
  return static_cast<std::size_t>(std::round(f));
}

std::size_t chunk_value(const std::string& v) {
  if (v == "full") return kFullContextChunk;
  return static_cast<std::size_t>(std::stoull(v));
}

// ---------------------------------------------------------------------------
// Single mask configuration from flags

struct MaskFlags {
  std::string spec;
  std::string chunk_frames;
  double chunk_ms = 0;
  std::string lookback_frames;
  double lookback_ms = 0;
  std::size_t lookback_chunks = 0;
  std::optional<std::size_t> lookahead_frames;

  void add(CLI::App* app) {
    app->add_option("--mask", spec, "Mask in describe form, e.g. past=fixed:12,future=chunk,chunk=4");
    app->add_option("--chunk-frames", chunk_frames, "Chunk size in 60 ms frames, or 'full'");
    app->add_option("--chunk-ms", chunk_ms, "Chunk size in ms (multiple of 60)");
    app->add_option("--lookback-frames", lookback_frames, "Look-back in frames, or 'unlimited'");
    app->add_option("--lookback-ms", lookback_ms, "Look-back in ms (multiple of 60)");
    app->add_option("--lookback-chunks", lookback_chunks, "Look-back in whole chunks");
    app->add_option("--lookahead-frames", lookahead_frames, "Fixed per-layer look-ahead in frames");
  }

  MaskConfig get() const {
    if (!spec.empty()) return parse_mask_config(spec);
    MaskConfig c;
    if (lookback_chunks) c.past = ChunkedPast{lookback_chunks};
    else if (lookback_ms > 0) c.past = FixedPast{ms_to_frames(lookback_ms, "--lookback-ms")};
    else if (!lookback_frames.empty() && lookback_frames != "unlimited") c.past = FixedPast{std::stoull(lookback_frames)};
    else c.past = UnlimitedPast{};
    if (lookahead_frames) {
      c.future = FixedFuture{*lookahead_frames};
    } else {
      c.future = ChunkedFuture{};
      if (chunk_ms > 0) c.chunk_frames = ms_to_frames(chunk_ms, "--chunk-ms");
      else if (!chunk_frames.empty()) c.chunk_frames = chunk_value(chunk_frames);
      else c.chunk_frames = kFullContextChunk;
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Subcommands

struct GenData {
  SyntheticTaskSpec spec;
  std::string out = "corpus.json";

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("gen-data", "Generate the synthetic token corpus");
    c->add_option("--seed", spec.seed);
    c->add_option("--utterances", spec.utterances);
    c->add_option("--vocab", spec.vocab_size);
    c->add_option("--feature-dim", spec.feature_dim);
    c->add_option("--noise", spec.noise, "Feature noise sigma");
    c->add_option("--min-tokens", spec.min_tokens);
    c->add_option("--max-tokens", spec.max_tokens);
    c->add_option("-o,--out", out);
    c->callback([this] { run(); });
  }

  void run() {
    const Corpus c = generate_corpus(spec);
    check(generate_corpus(spec) == c, "corpus generation is deterministic");
    const fs::path p = out_path(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_json_file(p.string(), to_json(c));
    check(corpus_from_json(read_json_file(p.string())) == c, "corpus file round-trips");
    std::cout << "wrote " << c.utterances.size() << " utterances to " << p.string() << '\n';
  }
};

struct Train {
  std::string data, checkpoint = "model.ckpt", init, log = "train_log.csv", mask_set_file;
  std::string lookbacks = "12,unlimited", chunks = "1,2,4,8,full";
  std::size_t holdout = 50;
  TrainConfig tc = default_train_config();
  std::string model_size = "desk";

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("train", "Train a transducer with variable masking");
    c->add_option("--data", data, "Corpus JSON")->required();
    c->add_option("--holdout", holdout, "Trailing utterances excluded from training");
    c->add_option("--lookbacks", lookbacks, "Comma list of look-backs in frames or 'unlimited'");
    c->add_option("--chunks", chunks, "Comma list of chunk sizes in frames or 'full'");
    c->add_option("--mask-set", mask_set_file, "Mask-set JSON (overrides --lookbacks/--chunks)");
    c->add_option("--fastemit-lambda", tc.loss.fastemit_lambda);
    c->add_option("--steps", tc.steps);
    c->add_option("--batch", tc.batch_size);
    c->add_option("--lr", tc.optimizer.learning_rate);
    c->add_option("--seed", tc.seed);
    c->add_option("--model", model_size, "desk or tiny")->check(CLI::IsMember({"desk", "tiny"}));
    c->add_option("--init-checkpoint", init, "Start from this checkpoint");
    c->add_option("--checkpoint", checkpoint, "Output checkpoint");
    c->add_option("--log", log, "Per-step loss log (CSV)");
    c->callback([this] { run(); });
  }

  VariableMaskSet mask_set() const {
    if (!mask_set_file.empty()) return mask_set_from_json(read_json_file(mask_set_file));
    VariableMaskSet s;
    std::string item;
    std::istringstream lb(lookbacks), ch(chunks);
    while (std::getline(lb, item, ','))
      s.past_options.push_back(item == "unlimited" ? PastPolicy{UnlimitedPast{}} : PastPolicy{FixedPast{std::stoull(item)}});
    while (std::getline(ch, item, ',')) s.future_options.push_back(FutureOption{ChunkedFuture{}, chunk_value(item)});
    s.validate();
    return s;
  }

  void run() {
    const Corpus corpus = corpus_from_json(read_json_file(data));
    const auto [train, test] = split_holdout(corpus, holdout);
    const VariableMaskSet set = mask_set();
    std::unique_ptr<TransducerModel> model;
    if (!init.empty()) model = load_checkpoint(init);
    else if (model_size == "tiny") model = std::make_unique<TransducerModel>(ModelConfig::tiny(corpus.spec.vocab_size, corpus.spec.feature_dim), tc.seed);
    else model = std::make_unique<TransducerModel>(ModelConfig::desk(corpus.spec.vocab_size, corpus.spec.feature_dim), tc.seed);
    std::vector<TrainLogRow> rows;
    Trainer trainer(*model, train, set, tc);
    trainer.run([&](std::size_t s, const StepResult& r) {
      rows.push_back(TrainLogRow{s, r.mean_loss, r.grad_norm, r.learning_rate, r.mask.describe()});
      if ((s + 1) % 50 == 0 || s + 1 == tc.steps) std::cerr << "step " << s + 1 << " loss " << r.mean_loss << '\n';
    });
    const fs::path lp = out_path(log), cp = out_path(checkpoint);
    open_out(lp) << to_csv_string(to_table(rows));
    if (cp.has_parent_path()) fs::create_directories(cp.parent_path());
    save_checkpoint(*model, cp.string());
    const auto reloaded = load_checkpoint(cp.string());
    const auto a = model->params().vars(), b = reloaded->params().vars();
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i) same = a[i].value() == b[i].value();
    check(same, "checkpoint reload reproduces every parameter");
    std::cout << "trained " << tc.steps << " steps; checkpoint " << cp.string() << ", log " << lp.string() << '\n';
  }
};

struct Decode {
  std::string data, checkpoint, out = "decode.jsonl";
  std::size_t holdout = 50, beam = 1, n_best = 1;
  MaskFlags mask;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("decode", "Streaming decode of held-out utterances");
    c->add_option("--data", data, "Corpus JSON")->required();
    c->add_option("--checkpoint", checkpoint)->required();
    c->add_option("--holdout", holdout, "Decode this many trailing utterances (0 = all)");
    c->add_option("--beam", beam, "Beam width (1 = greedy)");
    c->add_option("--n-best", n_best);
    c->add_option("-o,--out", out, "JSON-lines output");
    mask.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    const Corpus corpus = corpus_from_json(read_json_file(data));
    const auto model = load_checkpoint(checkpoint);
    const MaskConfig cfg = mask.get();
    const std::vector<Utterance> utts = holdout ? split_holdout(corpus, holdout).second : corpus.utterances;
    const fs::path p = out_path(out);
    auto os = open_out(p);
    const std::string name = cfg.describe();
    for (const auto& u : utts) {
      const auto [hyp, trace] = greedy_decode_streaming(u.features, *model, cfg);
      check(hyp.tokens == greedy_decode_offline(u.features, *model, cfg).tokens,
            "streaming greedy matches offline greedy on " + u.id);
      for (const auto& s : trace.snapshots) os << partial_record(u.id, name, s).dump() << '\n';
      if (beam <= 1) {
        os << hypothesis_record(u.id, name, 0, hyp).dump() << '\n';
      } else {
        const NBestList nb = beam_search(u.features, *model, cfg, BeamOptions{beam, std::min(n_best, beam), 4, 30.0});
        for (std::size_t r = 0; r < nb.hypotheses.size(); ++r)
          os << hypothesis_record(u.id, name, r, nb.hypotheses[r]).dump() << '\n';
      }
    }
    std::cout << "decoded " << utts.size() << " utterances under " << name << " into " << p.string() << '\n';
  }
};

struct Rescore {
  std::string decode, data, checkpoint, out = "rescore.jsonl";
  double wide_seconds = 0;
  std::string wide_frames;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("rescore", "Rescore n-best lists with a wider chunk");
    c->add_option("--decode", decode, "Decode JSON-lines file")->required();
    c->add_option("--data", data, "Corpus JSON holding the features")->required();
    c->add_option("--checkpoint", checkpoint)->required();
    c->add_option("--wide-chunk-seconds", wide_seconds, "Wide chunk in seconds, e.g. 0.36 1.8 3.6 30");
    c->add_option("--wide-chunk-frames", wide_frames, "Wide chunk in frames or 'full'");
    c->add_option("-o,--out", out);
    c->callback([this] { run(); });
  }

  void run() {
    if ((wide_seconds > 0) == !wide_frames.empty())
      throw CLI::ValidationError("rescore", "give exactly one of --wide-chunk-seconds / --wide-chunk-frames");
    const std::size_t wide_chunk = wide_seconds > 0 ? seconds_to_frames(wide_seconds) : chunk_value(wide_frames);
    const Corpus corpus = corpus_from_json(read_json_file(data));
    std::map<std::string, const Utterance*> by_id;
    for (const auto& u : corpus.utterances) by_id[u.id] = &u;
    const auto model = load_checkpoint(checkpoint);

    // group hypotheses by (utterance, config), keeping file order
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, NBestList> lists;
    for (const auto& j : read_json_lines(decode)) {
      if (j.at("type") != "hyp") continue;
      const auto key = std::make_pair(j.at("utterance").get<std::string>(), j.at("config").get<std::string>());
      auto [it, fresh] = lists.try_emplace(key);
      if (fresh) order.push_back(key);
      it->second.hypotheses.push_back(hypothesis_from_record(j));
      it->second.n = it->second.hypotheses.size();
    }
    const fs::path p = out_path(out);
    auto os = open_out(p);
    for (const auto& key : order) {
      const auto u = by_id.find(key.first);
      if (u == by_id.end()) throw std::runtime_error("utterance '" + key.first + "' not in corpus");
      const MaskConfig first = parse_mask_config(key.second), wide = widened(first, wide_chunk);
      const NBestList& nb = lists.at(key);
      const NBestList same = rescore_nbest(u->second->features, nb, *model, RescoreConfig{first});
      for (std::size_t i = 0; i < nb.hypotheses.size(); ++i)
        check(same.hypotheses[i].tokens == nb.hypotheses[i].tokens, "identity rescoring keeps the ranking of " + key.first);
      const NBestList out_list = rescore_nbest(u->second->features, nb, *model, RescoreConfig{wide});
      for (std::size_t r = 0; r < out_list.hypotheses.size(); ++r) {
        json rec = hypothesis_record(key.first, wide.describe(), r, out_list.hypotheses[r]);
        rec["rank_delta"] = static_cast<long long>(*out_list.hypotheses[r].first_pass_rank) - static_cast<long long>(r);
        os << rec.dump() << '\n';
      }
    }
    std::cout << "rescored " << order.size() << " lists with chunk " << wide_chunk << " frames into " << p.string() << '\n';
  }
};

struct Latency {
  std::string decode, data, out = "latency.csv", system;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("latency", "PRWL and WER report from decode traces");
    c->add_option("--decode", decode, "Decode JSON-lines file")->required();
    c->add_option("--data", data, "Corpus JSON with token alignments")->required();
    c->add_option("--system", system, "System label for the summary (default: mask config)");
    c->add_option("-o,--out", out, "Per-utterance CSV");
    c->callback([this] { run(); });
  }

  void run() {
    const Corpus corpus = corpus_from_json(read_json_file(data));
    std::map<std::string, const Utterance*> by_id;
    for (const auto& u : corpus.utterances) by_id[u.id] = &u;
    struct Entry {
      PartialTrace trace;
      std::optional<TimedHypothesis> best;
    };
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, Entry> entries;
    for (const auto& j : read_json_lines(decode)) {
      const auto key = std::make_pair(j.at("config").get<std::string>(), j.at("utterance").get<std::string>());
      auto [it, fresh] = entries.try_emplace(key);
      if (fresh) order.push_back(key);
      if (j.at("type") == "partial") it->second.trace.snapshots.push_back(partial_from_record(j));
      else if (j.at("rank") == 0) it->second.best = hypothesis_from_record(j);
    }
    CsvTable t;
    t.header = {"system", "utterance", "prwl_ms", "matched_words", "deleted_words", "emission_delay_ms", "errors", "ref_words"};
    struct Pool {
      WerAccumulator wer;
      double prwl_sum = 0;
      std::size_t matched = 0;
    };
    std::vector<std::string> systems;
    std::map<std::string, Pool> pools;
    for (const auto& key : order) {
      const auto& e = entries.at(key);
      const auto u = by_id.find(key.second);
      if (u == by_id.end()) throw std::runtime_error("utterance '" + key.second + "' not in corpus");
      if (!e.best) throw std::runtime_error("no rank-0 hypothesis for " + key.second);
      const auto align = word_alignment(*u->second);
      const auto rep = prwl(align, e.trace);
      const auto d = emission_delay(align, *e.best);
      const auto w = wer(u->second->tokens, e.best->tokens);
      const std::string sys = system.empty() ? key.first : system;
      if (!pools.count(sys)) systems.push_back(sys);
      auto& pool = pools[sys];
      pool.wer.add(w);
      pool.prwl_sum += rep.prwl_ms * static_cast<double>(rep.matched_words);
      pool.matched += rep.matched_words;
      t.rows.push_back({sys, key.second, format_double(rep.prwl_ms), std::to_string(rep.matched_words),
                        std::to_string(rep.deleted_words), format_double(d.mean_ms), std::to_string(w.errors()),
                        std::to_string(w.ref_length)});
    }
    const fs::path p = out_path(out);
    const std::string csv = to_csv_string(t);
    open_out(p) << csv;
    check(to_csv_string(parse_csv(csv)) == csv, "latency CSV round-trips");
    std::cout << "System, PRWL [ms], WER [%]\n";
    for (const auto& s : systems) {
      const auto& pool = pools.at(s);
      const double prwl_ms = pool.matched ? pool.prwl_sum / static_cast<double>(pool.matched) : 0.0;
      std::cout << s << ", " << prwl_ms << ", " << 100.0 * pool.wer.total.wer << '\n';
    }
  }
};

struct Sweep {
  std::string config, out = "sweep";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("sweep", "Train once and decode the WER, latency and rescoring grids");
    c->add_option("--config", config, "Experiment JSON (defaults built in)");
    c->add_option("--seed", seed, "Overrides task and training seeds");
    c->add_option("--steps", steps, "Overrides training steps");
    c->add_option("-o,--out", out, "Result directory");
    c->callback([this] { run(); });
  }

  void run() {
    ExperimentSpec spec = config.empty() ? ExperimentSpec{} : experiment_from_json(read_json_file(config));
    if (seed) spec.task.seed = spec.train.seed = *seed;
    if (steps) spec.train.steps = *steps;
    spec.validate();
    const fs::path dir = out_path(spec.output_dir.empty() || out != "sweep" ? out : spec.output_dir);
    const Corpus corpus = generate_corpus(spec.task);
    const auto [train, test] = split_holdout(corpus, spec.holdout);
    TrainedModel tm = train_model(spec.model, train, spec.mask_set, spec.train, [&](std::size_t s, const StepResult& r) {
      if ((s + 1) % 50 == 0) std::cerr << "step " << s + 1 << " loss " << r.mean_loss << '\n';
    });
    SweepResults res = evaluate_sweep(spec, *tm.model, test);
    res.train_log = std::move(tm.log);
    write_results(res, dir);
    save_checkpoint(*tm.model, (dir / "model.ckpt").string());
    write_json_file((dir / "experiment.json").string(), to_json(spec));
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << summarize(res);

    check(res.wer_grid.size() == spec.decode_grid().size(), "one WER row per decode config");
    check(res.identity_rescore_noop, "identity rescoring is a no-op");
    SweepResults back = read_results(dir);
    check(back.train_log == res.train_log && back.wer_grid == res.wer_grid && back.latency == res.latency &&
              back.rescore == res.rescore,
          "result files round-trip");
    std::cout << "results in " << dir.string() << '\n';
  }
};

struct MaskViz {
  std::size_t seq_len = 16, cell_px = 8;
  std::string pgm;
  MaskFlags mask;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("maskviz", "Print an attention mask ('#' allowed, '.' masked)");
    c->add_option("--seq-len", seq_len)->check(CLI::Range(1, 4096));
    c->add_option("--pgm", pgm, "Also write a portable graymap here");
    c->add_option("--cell-px", cell_px)->check(CLI::Range(1, 64));
    mask.add(c);
    c->callback([this] { run(); });
  }

  void run() {
    const MaskConfig cfg = mask.get();
    const AttentionMask m = build_mask(seq_len, cfg);
    for (std::size_t t = 0; t < seq_len; ++t) check(m(t, t), "every frame attends to itself");
    std::cout << cfg.describe() << '\n' << mask_to_ascii(m);
    if (!pgm.empty()) {
      const fs::path p = out_path(pgm);
      open_out(p) << mask_to_pgm(m, cell_px);
      std::cout << "wrote " << p.string() << '\n';
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variable-mask transducer toolkit"};
  app.require_subcommand(1);
  GenData gen;
  Train train;
  Decode decode;
  Rescore rescore;
  Latency latency;
  Sweep sweep;
  MaskViz maskviz;
  gen.add(app);
  train.add(app);
  decode.add(app);
  rescore.add(app);
  latency.add(app);
  sweep.add(app);
  maskviz.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const SelfCheckFailure& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
