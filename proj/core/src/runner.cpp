#include "kest/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "kest/decode.hpp"
#include "kest/error.hpp"
#include "kest/plot.hpp"

namespace kest {

namespace fs = std::filesystem;

fs::path default_output_root() {
  if (const char* env = std::getenv("KEST_OUT_ROOT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log(const RunnerOptions& o, const std::string& msg) {
  if (o.verbose) std::cerr << "[kest] " << msg << std::endl;
}

fs::path resolve_out(const ExperimentConfig& config, const RunnerOptions& options) {
  if (!options.out.empty()) return options.out;
  if (!config.output_dir.empty()) return config.output_dir;
  return default_output_root();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IntegrityError("cannot write " + path.string());
  out << text;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

std::string short_hash(const std::string& h) { return h.substr(0, 8); }

std::string base_cache_key(const ExperimentContext& ctx, std::uint64_t seed) {
  const auto& st = ctx.config.selftrain;
  nlohmann::json j{{"corpus", corpus_hash(ctx.config.corpus, ctx.model_config.max_len)},
                   {"split", ctx.config.split},
                   {"model", ctx.model_config},
                   {"p_m_base", st.p_m_base},
                   {"weights_base", st.weights_base},
                   {"base_epochs", st.base_epochs},
                   {"batch_size", st.batch_size},
                   {"lr_base", st.lr_base},
                   {"weight_decay", st.weight_decay},
                   {"seed", seed}};
  return fnv1a_hex(j.dump());
}

std::string evaluator_cache_key(const ExperimentConfig& config, const ModelConfig& mc) {
  nlohmann::json full = config;
  nlohmann::json j{{"corpus", corpus_hash(config.corpus, mc.max_len)}, {"model", mc}, {"evaluator", full["evaluator"]}};
  return fnv1a_hex(j.dump());
}

void write_soft_array(const fs::path& path, const std::vector<PseudoTextItem>& items) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IntegrityError("cannot write " + path.string());
  out.write("KESTSOFT", 8);
  const auto n = static_cast<std::uint64_t>(items.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  for (const auto& item : items) {
    const auto& m = item.soft->matrix;
    const std::uint64_t dims[3] = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols()),
                                   static_cast<std::uint64_t>(item.soft->length)};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    // Row-major on disk.
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(sizeof(float) * rm.size()));
  }
}

void write_epoch_artifacts(const fs::path& dir, const SyntheticCorpus& corpus, const DatasetBundle& bundle,
                           const ModelF& model) {
  fs::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", model);
  write_records(dir / "d_pl.jsonl", to_records(bundle.pseudo_labeled, corpus));
  std::vector<LabeledExample> pt;
  std::string masks;
  bool soft = !bundle.pseudo_text.empty();
  for (const auto& item : bundle.pseudo_text) {
    pt.push_back({item.hard_tokens, item.label, item.source_example_id});
    masks += item.mask.to_string() + "\n";
    soft = soft && item.soft.has_value();
  }
  write_records(dir / "d_pt.jsonl", to_records(pt, corpus));
  write_text(dir / "d_pt.mask", masks);
  if (soft) write_soft_array(dir / "d_pt_soft.bin", bundle.pseudo_text);
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

// --- records ----------------------------------------------------------------

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},
                     {"mode", to_string(r.mode)},
                     {"ce_loss", r.ce_loss},
                     {"mmd_loss", r.mmd_loss},
                     {"pl_accuracy", r.pl_accuracy ? nlohmann::json(*r.pl_accuracy) : nlohmann::json(nullptr)},
                     {"wall_clock_s", r.wall_clock_s},
                     {"forward_passes_ag", r.forward_passes_ag},
                     {"forward_passes_nag", r.forward_passes_nag},
                     {"snapshot_checksum", r.snapshot_checksum},
                     {"end_checksum", r.end_checksum},
                     {"embedding_checksum", r.embedding_checksum},
                     {"pool_size", r.pool_size},
                     {"pseudo_labeled", r.pseudo_labeled},
                     {"pseudo_text", r.pseudo_text},
                     {"mmd_groups", r.mmd_groups},
                     {"dropped_singletons", r.dropped_singletons}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.mode = parse_mode(j.at("mode").get<std::string>());
  r.ce_loss = j.at("ce_loss").get<double>();
  r.mmd_loss = j.at("mmd_loss").get<double>();
  if (!j.at("pl_accuracy").is_null()) r.pl_accuracy = j.at("pl_accuracy").get<double>();
  r.wall_clock_s = j.at("wall_clock_s").get<double>();
  r.forward_passes_ag = j.at("forward_passes_ag").get<std::uint64_t>();
  r.forward_passes_nag = j.at("forward_passes_nag").get<std::uint64_t>();
  r.snapshot_checksum = j.value("snapshot_checksum", std::uint64_t{0});
  r.end_checksum = j.value("end_checksum", std::uint64_t{0});
  r.embedding_checksum = j.value("embedding_checksum", std::uint64_t{0});
  r.pool_size = j.value("pool_size", std::size_t{0});
  r.pseudo_labeled = j.value("pseudo_labeled", std::size_t{0});
  r.pseudo_text = j.value("pseudo_text", std::size_t{0});
  r.mmd_groups = j.value("mmd_groups", std::size_t{0});
  r.dropped_singletons = j.value("dropped_singletons", std::size_t{0});
}

void to_json(nlohmann::json& j, const RunRecord& r) {
  j = nlohmann::json{{"name", r.name},
                     {"config_hash", r.config_hash},
                     {"corpus_hash", r.corpus_hash},
                     {"mode", to_string(r.mode)},
                     {"seed", r.seed},
                     {"history", r.history},
                     {"metrics", r.metrics},
                     {"verifier_status", r.verifier_status},
                     {"evaluator_f1", r.evaluator_f1},
                     {"reference_ppl", r.reference_ppl},
                     {"final_checksum", r.final_checksum},
                     {"timing",
                      {{"forward_passes_ag", r.timing.forward_passes_ag},
                       {"forward_passes_nag", r.timing.forward_passes_nag},
                       {"base_seconds", r.timing.base_seconds},
                       {"selftrain_seconds", r.timing.selftrain_seconds},
                       {"eval_seconds", r.timing.eval_seconds}}}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  r.name = j.at("name").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.corpus_hash = j.at("corpus_hash").get<std::string>();
  r.mode = parse_mode(j.at("mode").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.history = j.at("history").get<std::vector<EpochRecord>>();
  r.metrics = j.at("metrics").get<MetricsReport>();
  r.verifier_status = j.at("verifier_status").get<std::string>();
  r.evaluator_f1 = j.at("evaluator_f1").get<double>();
  r.reference_ppl = j.at("reference_ppl").get<double>();
  r.final_checksum = j.at("final_checksum").get<std::uint64_t>();
  const auto& t = j.at("timing");
  r.timing.forward_passes_ag = t.at("forward_passes_ag").get<std::uint64_t>();
  r.timing.forward_passes_nag = t.at("forward_passes_nag").get<std::uint64_t>();
  r.timing.base_seconds = t.at("base_seconds").get<double>();
  r.timing.selftrain_seconds = t.at("selftrain_seconds").get<double>();
  r.timing.eval_seconds = t.at("eval_seconds").get<double>();
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void write_metrics_csv(const fs::path& path, const std::string& config_hash, const std::string& run,
                       const MetricsReport& metrics) {
  std::ostringstream os;
  os << "# config_hash=" << config_hash << "\nrun,epoch";
  for (const auto& c : metrics_columns()) os << ',' << c;
  os << ",dist_x100,self_bleu_x100\n" << run << ",final";
  for (double v : metrics_values(metrics)) os << ',' << format_double(v);
  os << ',' << format_double(100 * metrics.dist) << ',' << format_double(100 * metrics.self_bleu) << '\n';
  write_text(path, os.str());
}

// --- experiment plumbing ----------------------------------------------------

ExperimentContext prepare_experiment(const ExperimentConfig& config, const RunnerOptions& options) {
  config.validate();
  ExperimentConfig cfg = config;
  cfg.selftrain.threads = options.threads;
  cfg.eval.threads = options.threads;
  if (options.seed) cfg.seeds = {*options.seed};
  const fs::path out_root = resolve_out(config, options);
  SyntheticCorpus corpus = generate_corpus(config.corpus, config.model.max_len);
  ModelConfig mc = config.model;
  mc.vocab_size = corpus.vocab.size();
  mc.num_labels = config.corpus.num_attributes;
  mc.validate();

  const fs::path cache = out_root / "cache" / ("evaluators-" + evaluator_cache_key(config, mc));
  auto evaluators = [&] {
    if (options.use_cache && fs::exists(cache / "classifier.ckpt") && fs::exists(cache / "reference_lm.ckpt")) {
      log(options, "loaded evaluators from " + cache.string());
      return load_evaluators(cache);
    }
    log(options, "training evaluator classifier and reference LM");
    auto built = build_evaluators(corpus, mc, config.evaluator);
    if (options.use_cache) save_evaluators(cache, built);
    return built;
  }();
  log(options, "evaluator test macro-F1 " + format_double(evaluators.classifier_test_f1) + ", reference LM test PPL " +
                   format_double(evaluators.reference_test_ppl));
  return ExperimentContext{std::move(cfg), std::move(corpus), mc, std::move(evaluators), out_root};
}

DatasetBundle make_split(const ExperimentContext& ctx, std::uint64_t seed) {
  const auto& s = ctx.config.split;
  auto bundle = split_semi_supervised(ctx.corpus.examples, s.labeled_fraction, s.unlabeled_ratio, seed,
                                      s.validation_count);
  bundle.check_ratios(s.unlabeled_ratio, ctx.config.selftrain.ratio_pt);
  return bundle;
}

BaseResult base_model(const ExperimentContext& ctx, std::uint64_t seed, const RunnerOptions& options) {
  const fs::path path = ctx.out_root / "cache" / ("base-" + base_cache_key(ctx, seed) + ".ckpt");
  if (options.use_cache && fs::exists(path)) {
    nlohmann::json meta;
    auto model = load_checkpoint(path, ctx.model_config, &meta);
    return base_result_from_json(meta, std::move(model));
  }
  STConfig st = ctx.config.selftrain;
  st.seed = seed;
  auto base = train_base(make_split(ctx, seed), ctx.model_config, st);
  if (options.use_cache) save_checkpoint(path, base.model, base);
  return base;
}

RunRecord run_seed(const ExperimentContext& ctx, std::uint64_t seed, const fs::path& dir,
                   const RunnerOptions& options) {
  const auto& cfg = ctx.config;
  fs::create_directories(dir);
  const std::string hash = config_hash(cfg);
  RunRecord rec;
  rec.name = cfg.name;
  rec.config_hash = hash;
  rec.corpus_hash = corpus_hash(cfg.corpus, ctx.model_config.max_len);
  rec.mode = cfg.selftrain.mode;
  rec.seed = seed;
  rec.evaluator_f1 = ctx.evaluators.classifier_test_f1;
  rec.reference_ppl = ctx.evaluators.reference_test_ppl;
  {
    auto quick = verify_lemma1(seed, 20);
    quick.append(verify_mmd_identity(seed, 20));
    rec.verifier_status = quick.passed() ? "PASS" : "FAIL";
  }

  const auto bundle = make_split(ctx, seed);
  log(options, cfg.name + " seed " + std::to_string(seed) + ": base phase");
  auto t0 = std::chrono::steady_clock::now();
  const BaseResult base = base_model(ctx, seed, options);
  rec.timing.base_seconds = seconds_since(t0);

  STConfig st = cfg.selftrain;
  st.seed = seed;
  STHooks hooks;
  if (cfg.save_epoch_artifacts) {
    hooks.on_epoch = [&](int epoch, const DatasetBundle& b, const ModelF& m) {
      write_epoch_artifacts(dir / ("epoch_" + std::to_string(epoch)), ctx.corpus, b, m);
    };
  }
  log(options, cfg.name + " seed " + std::to_string(seed) + ": " + to_string(st.mode) + " for " +
                   std::to_string(st.max_epochs) + " epochs");
  t0 = std::chrono::steady_clock::now();
  RunResult result = run(bundle, ctx.model_config, st, &base, hooks);
  rec.timing.selftrain_seconds = seconds_since(t0);
  rec.history = result.history;
  rec.final_checksum = result.model.checksum();
  for (const auto& h : rec.history) {
    rec.timing.forward_passes_ag += h.forward_passes_ag;
    rec.timing.forward_passes_nag += h.forward_passes_nag;
  }

  t0 = std::chrono::steady_clock::now();
  std::vector<Generation> generations;
  rec.metrics = evaluate(result.model, ctx.evaluators, ctx.corpus, bundle.test, cfg.eval,
                         derive_seed(seed, "evaluation"), &generations);
  rec.timing.eval_seconds = seconds_since(t0);

  write_history_csv(dir / "history.csv", rec.history, hash, false);
  write_metrics_csv(dir / "metrics.csv", hash, cfg.name + "/seed_" + std::to_string(seed), rec.metrics);
  save_checkpoint(dir / "final.ckpt", result.model, {{"config_hash", hash}, {"seed", seed}});
  ctx.corpus.vocab.save(dir / "vocab.txt");
  std::string labels;
  for (const auto& l : ctx.corpus.label_names) labels += l + "\n";
  write_text(dir / "labels.txt", labels);
  std::string samples = "# config_hash=" + hash + "\n";
  for (const auto& g : generations) {
    samples += ctx.corpus.label_names.at(static_cast<std::size_t>(g.label)) + "\t" + decode(g.tokens, ctx.corpus.vocab) + "\n";
  }
  write_text(dir / "generations.txt", samples);
  write_text(dir / "run.json", nlohmann::json(rec).dump(2) + "\n");
  log(options, cfg.name + " seed " + std::to_string(seed) + ": oracle accuracy " +
                   format_double(rec.metrics.oracle_control_acc) + ", macro-F1 " + format_double(rec.metrics.macro_f1) +
                   ", Self-BLEU " + format_double(rec.metrics.self_bleu));
  return rec;
}

fs::path cmd_train(const ExperimentConfig& config, const RunnerOptions& options, std::vector<RunRecord>* records) {
  const ExperimentContext ctx = prepare_experiment(config, options);
  const fs::path dir = ctx.out_root / (ctx.config.name + "-" + short_hash(config_hash(ctx.config)));
  fs::create_directories(dir);
  write_text(dir / "config.json", nlohmann::json(ctx.config).dump(2) + "\n");
  for (std::uint64_t seed : ctx.config.seeds) {
    auto rec = run_seed(ctx, seed, dir / ("seed_" + std::to_string(seed)), options);
    if (records) records->push_back(std::move(rec));
  }
  return dir;
}

// --- sweeps -----------------------------------------------------------------

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "p_m") return SweepAxis::kMaskRatio;
  if (name == "ratio_pt") return SweepAxis::kPseudoTextRatio;
  throw ConfigError("unknown sweep axis '" + name + "' (expected p_m or ratio_pt)");
}

std::string to_string(SweepAxis axis) { return axis == SweepAxis::kMaskRatio ? "p_m" : "ratio_pt"; }

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<double>& values,
                                const RunnerOptions& options, fs::path* out_dir) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const ExperimentContext base_ctx = prepare_experiment(config, options);
  const std::string axis_name = to_string(axis);
  const fs::path dir =
      base_ctx.out_root / (config.name + "-sweep-" + axis_name + "-" + short_hash(config_hash(base_ctx.config)));
  fs::create_directories(dir);
  write_text(dir / "config.json", nlohmann::json(base_ctx.config).dump(2) + "\n");

  std::vector<SweepRow> rows;
  for (double value : values) {
    ExperimentContext ctx = base_ctx;
    if (axis == SweepAxis::kMaskRatio) {
      ctx.config.selftrain.p_m_st = value;
    } else {
      ctx.config.selftrain.ratio_pt = value;
    }
    ctx.config.name = config.name + "-" + axis_name + "=" + format_double(value);
    ctx.config.validate();
    for (std::uint64_t seed : ctx.config.seeds) {
      const auto rec =
          run_seed(ctx, seed, dir / (axis_name + "=" + format_double(value)) / ("seed_" + std::to_string(seed)), options);
      rows.push_back({value, seed, rec.metrics});
    }
  }

  const auto columns = metrics_columns();
  const std::string hash = config_hash(base_ctx.config);
  std::ostringstream summary, per_seed;
  summary << "# config_hash=" << hash << "\n" << axis_name << ",seeds";
  per_seed << "# config_hash=" << hash << "\n" << axis_name << ",seed";
  for (const auto& c : columns) {
    summary << ',' << c << "_mean," << c << "_std";
    per_seed << ',' << c;
  }
  summary << '\n';
  per_seed << '\n';
  std::vector<std::vector<double>> means(columns.size()), stds(columns.size());
  for (double value : values) {
    std::vector<std::vector<double>> samples(columns.size());
    for (const auto& r : rows) {
      if (r.value != value) continue;
      const auto v = metrics_values(r.metrics);
      per_seed << format_double(value) << ',' << r.seed;
      for (std::size_t c = 0; c < columns.size(); ++c) {
        samples[c].push_back(v[c]);
        per_seed << ',' << format_double(v[c]);
      }
      per_seed << '\n';
    }
    summary << format_double(value) << ',' << samples[0].size();
    for (std::size_t c = 0; c < columns.size(); ++c) {
      means[c].push_back(mean_of(samples[c]));
      stds[c].push_back(sample_stddev(samples[c]));
      summary << ',' << format_double(means[c].back()) << ',' << format_double(stds[c].back());
    }
    summary << '\n';
  }
  write_text(dir / ("sweep_" + axis_name + ".csv"), summary.str());
  write_text(dir / ("sweep_" + axis_name + "_per_seed.csv"), per_seed.str());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    PlotSpec plot{columns[c] + " vs " + axis_name, axis_name, columns[c],
                  {{to_string(config.selftrain.mode), values, means[c], stds[c]}}};
    write_line_plot(dir / ("sweep_" + axis_name + "_" + columns[c] + ".svg"), plot);
  }
  if (out_dir) *out_dir = dir;
  return rows;
}

// --- timing -----------------------------------------------------------------

std::vector<TimingRow> cmd_timing(const ExperimentConfig& config, const std::vector<int>& lengths,
                                  const RunnerOptions& options, const std::optional<fs::path>& checkpoint,
                                  fs::path* out_dir) {
  if (lengths.empty()) throw ConfigError("timing needs at least one length");
  RunnerOptions quiet = options;
  const ExperimentContext ctx = prepare_experiment(config, quiet);
  const std::uint64_t seed = ctx.config.seeds.front();
  ModelF model = checkpoint ? load_checkpoint(*checkpoint, ctx.model_config) : base_model(ctx, seed, options).model;
  const auto bundle = make_split(ctx, seed);
  const std::size_t items = bundle.labeled.size();
  const int k = ctx.model_config.num_labels;

  std::vector<TimingRow> rows;
  for (int length : lengths) {
    if (length < 3 || length > ctx.model_config.max_len) {
      throw ConfigError("timing length " + std::to_string(length) + " outside [3, " +
                        std::to_string(ctx.model_config.max_len) + "]");
    }
    const int content = length - 2;
    TimingRow row;
    row.length = length;
    row.items = items;

    DecodeConfig dc = ctx.config.selftrain.pt_decode;
    dc.min_len = content;
    dc.max_len = content;
    dc.no_repeat_ngram = 0;
    model.reset_counters();
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < items; ++i) {
      Rng rng = make_rng(seed, "timing-ag", i);
      generate_ag(model, static_cast<int>(i % static_cast<std::size_t>(k)), {}, dc, rng);
    }
    row.ag_seconds = seconds_since(t0);
    row.ag_passes_per_item = static_cast<double>(model.ag_passes()) / static_cast<double>(items);

    // NAG input: the D_l item's content tiled to the target length.
    std::vector<PseudoTextItem> sink;
    std::vector<TokenSequence> inputs;
    std::vector<MaskVector> masks;
    for (std::size_t i = 0; i < items; ++i) {
      const auto src = bundle.labeled[i].tokens.content();
      std::vector<TokenId> tiled;
      while (static_cast<int>(tiled.size()) < content) tiled.push_back(src[tiled.size() % src.size()]);
      inputs.push_back(TokenSequence::from_content(tiled, ctx.model_config.max_len));
      Rng mrng = make_rng(seed, "timing-mask", i);
      masks.push_back(sample_mask(content, ctx.config.selftrain.p_m_st, mrng));
    }
    model.reset_counters();
    t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < items; ++i) {
      Rng rng = make_rng(seed, "timing-nag", i);
      sink.push_back(generate_nag(model, inputs[i], masks[i], bundle.labeled[i].label, rng, true));
    }
    row.nag_seconds = seconds_since(t0);
    row.nag_passes_per_item = static_cast<double>(model.nag_passes()) / static_cast<double>(items);
    rows.push_back(row);
    log(options, "timing L=" + std::to_string(length) + ": AG " + format_double(row.ag_seconds) + " s, NAG " +
                     format_double(row.nag_seconds) + " s");
  }

  const fs::path dir = ctx.out_root / (config.name + "-timing-" + short_hash(config_hash(ctx.config)));
  std::ostringstream os;
  os << "# config_hash=" << config_hash(ctx.config) << "\n"
     << "length,items,ag_passes_per_item,nag_passes_per_item,ag_seconds,nag_seconds,speedup\n";
  PlotSeries ag{"AG", {}, {}, {}}, nag{"NAG", {}, {}, {}};
  for (const auto& r : rows) {
    os << r.length << ',' << r.items << ',' << format_double(r.ag_passes_per_item) << ','
       << format_double(r.nag_passes_per_item) << ',' << format_double(r.ag_seconds) << ','
       << format_double(r.nag_seconds) << ',' << format_double(r.ag_seconds / std::max(r.nag_seconds, 1e-12)) << '\n';
    ag.x.push_back(r.length);
    ag.y.push_back(r.ag_seconds);
    nag.x.push_back(r.length);
    nag.y.push_back(r.nag_seconds);
  }
  write_text(dir / "timing.csv", os.str());
  write_line_plot(dir / "timing.svg", {"pseudo-text generation time", "sequence length", "seconds", {ag, nag}});
  if (out_dir) *out_dir = dir;
  return rows;
}

// --- verification -----------------------------------------------------------

VerifyReport cmd_verify(const RunnerOptions& options, fs::path* report_path) {
  const fs::path root = options.out.empty() ? default_output_root() : options.out;
  const VerifyReport report = verify_all(options.seed.value_or(1));
  const fs::path path = root / "verify_report.txt";
  write_text(path, report.to_text());
  if (report_path) *report_path = path;
  return report;
}

// --- reports ----------------------------------------------------------------

std::vector<RunRecord> collect_runs(const std::vector<fs::path>& run_dirs) {
  std::vector<RunRecord> out;
  for (const auto& d : run_dirs) {
    std::vector<fs::path> files;
    if (fs::exists(d / "run.json")) {
      files.push_back(d / "run.json");
    } else if (fs::is_directory(d)) {
      for (const auto& entry : fs::recursive_directory_iterator(d)) {
        if (entry.is_regular_file() && entry.path().filename() == "run.json") files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
    }
    if (files.empty()) throw PreconditionError("no completed run under " + d.string());
    for (const auto& f : files) out.push_back(read_json(f).get<RunRecord>());
  }
  return out;
}

std::vector<ReportRow> cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out) {
  const auto runs = collect_runs(run_dirs);
  if (runs.empty()) throw PreconditionError("report needs at least one run");
  for (const auto& r : runs) {
    if (r.corpus_hash != runs.front().corpus_hash) {
      throw ConfigError("refusing to compare runs over different corpora (" + runs.front().corpus_hash + " vs " +
                        r.corpus_hash + ")");
    }
  }
  std::map<std::string, std::vector<const RunRecord*>> by_mode;  // sorted by mode name
  for (const auto& r : runs) by_mode[to_string(r.mode)].push_back(&r);

  const auto columns = metrics_columns();
  std::vector<ReportRow> rows;
  std::ostringstream os;
  os << "mode,runs";
  for (const auto& c : columns) os << ',' << c << "_mean," << c << "_std";
  os << '\n';
  std::map<std::string, PlotSpec> plots{{"ce_loss", {"cross-entropy loss per epoch", "epoch", "ce_loss", {}}},
                                        {"mmd_loss", {"kernel loss per epoch", "epoch", "mmd_loss", {}}},
                                        {"pl_accuracy", {"pseudo-label accuracy per epoch", "epoch", "pl_accuracy", {}}}};
  for (const auto& [mode, recs] : by_mode) {
    ReportRow row;
    row.mode = parse_mode(mode);
    row.runs = recs.size();
    os << mode << ',' << recs.size();
    for (std::size_t c = 0; c < columns.size(); ++c) {
      std::vector<double> v;
      for (const auto* r : recs) v.push_back(metrics_values(r->metrics)[c]);
      row.mean.push_back(mean_of(v));
      row.stddev.push_back(sample_stddev(v));
      os << ',' << format_double(row.mean.back()) << ',' << format_double(row.stddev.back());
    }
    os << '\n';
    rows.push_back(std::move(row));

    // Seed-mean history curves.
    std::map<int, std::vector<double>> ce, mmd, pl;
    for (const auto* r : recs) {
      for (const auto& h : r->history) {
        ce[h.epoch].push_back(h.ce_loss);
        mmd[h.epoch].push_back(h.mmd_loss);
        if (h.pl_accuracy) pl[h.epoch].push_back(*h.pl_accuracy);
      }
    }
    auto series = [&](const std::map<int, std::vector<double>>& m) {
      PlotSeries s{mode, {}, {}, {}};
      for (const auto& [epoch, v] : m) {
        s.x.push_back(epoch);
        s.y.push_back(mean_of(v));
      }
      return s;
    };
    plots["ce_loss"].series.push_back(series(ce));
    plots["mmd_loss"].series.push_back(series(mmd));
    if (!pl.empty()) plots["pl_accuracy"].series.push_back(series(pl));
  }
  write_text(out / "report.csv", os.str());
  for (const auto& [name, plot] : plots) {
    if (!plot.series.empty()) write_line_plot(out / ("history_" + name + ".svg"), plot);
  }
  return rows;
}

// --- corpus utilities -------------------------------------------------------

void cmd_corpus_generate(const CorpusSpec& spec, int seq_max_len, const fs::path& out_dir) {
  const auto corpus = generate_corpus(spec, seq_max_len);
  fs::create_directories(out_dir);
  write_records(out_dir / "corpus.jsonl", to_records(corpus.examples, corpus));
  corpus.vocab.save(out_dir / "vocab.txt");
  nlohmann::json lex = nlohmann::json::object();
  for (std::size_t k = 0; k < corpus.lexicons.size(); ++k) {
    std::vector<std::string> words;
    for (TokenId id : corpus.lexicons[k]) words.push_back(corpus.vocab.token(id));
    lex[corpus.label_names[k]] = words;
  }
  write_text(out_dir / "lexicons.json", lex.dump(2) + "\n");
  nlohmann::json s = spec;
  s["seq_max_len"] = seq_max_len;
  write_text(out_dir / "spec.json", s.dump(2) + "\n");
}

void cmd_corpus_split(const fs::path& input, double labeled_fraction, int unlabeled_ratio, int validation_count,
                      std::uint64_t seed, const fs::path& out_dir) {
  const auto records = read_records(input);
  if (records.empty()) throw PreconditionError("no records in " + input.string());
  std::vector<std::string> texts;
  std::set<std::string> label_set;
  for (const auto& r : records) {
    if (!r.label) throw PreconditionError("corpus split needs labeled records (" + input.string() + ")");
    texts.push_back(r.text);
    label_set.insert(*r.label);
  }
  const std::vector<std::string> labels(label_set.begin(), label_set.end());
  const auto vocab = Vocabulary::build(texts);
  std::size_t longest = 0;
  for (const auto& t : texts) longest = std::max(longest, split_whitespace(t).size());
  const int max_len = static_cast<int>(longest) + 2;
  std::vector<LabeledExample> examples;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto label = static_cast<int>(std::lower_bound(labels.begin(), labels.end(), *records[i].label) - labels.begin());
    examples.push_back({encode(records[i].text, vocab, max_len), label, i});
  }
  const auto bundle = split_semi_supervised(examples, labeled_fraction, unlabeled_ratio, seed, validation_count);
  auto records_of = [&](const std::vector<LabeledExample>& xs, bool with_labels) {
    std::vector<TextRecord> out;
    for (const auto& x : xs) {
      TextRecord r{decode(x.tokens, vocab), std::nullopt};
      if (with_labels) r.label = labels[static_cast<std::size_t>(x.label)];
      out.push_back(std::move(r));
    }
    return out;
  };
  std::vector<LabeledExample> unlabeled;
  for (const auto& u : bundle.unlabeled) unlabeled.push_back({u.tokens, 0, u.id});
  fs::create_directories(out_dir);
  write_records(out_dir / "labeled.jsonl", records_of(bundle.labeled, true));
  write_records(out_dir / "unlabeled.jsonl", records_of(unlabeled, false));
  if (!bundle.validation.empty()) write_records(out_dir / "validation.jsonl", records_of(bundle.validation, true));
  write_records(out_dir / "test.jsonl", records_of(bundle.test, true));
}

// --- generation / evaluation of finished runs -------------------------------

namespace {

struct SeedDir {
  ModelF model;
  Vocabulary vocab;
  std::vector<std::string> labels;
};

SeedDir open_seed_dir(const fs::path& dir) {
  if (!fs::exists(dir / "final.ckpt")) throw PreconditionError(dir.string() + " has no final.ckpt");
  SeedDir s{load_checkpoint(dir / "final.ckpt"), Vocabulary::load(dir / "vocab.txt"), {}};
  std::ifstream in(dir / "labels.txt");
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) s.labels.push_back(line);
  }
  return s;
}

}  // namespace

std::vector<std::string> cmd_generate(const fs::path& seed_dir, const std::string& label, const std::string& prompt,
                                      int count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("--n must be >= 1");
  const auto s = open_seed_dir(seed_dir);
  const auto it = std::find(s.labels.begin(), s.labels.end(), label);
  if (it == s.labels.end()) throw ConfigError("unknown label '" + label + "'");
  const int k = static_cast<int>(it - s.labels.begin());
  std::vector<TokenId> prompt_ids;
  for (const auto& w : split_whitespace(prompt)) prompt_ids.push_back(s.vocab.id(w));
  DecodeConfig dc;
  const auto cfg_path = seed_dir.parent_path() / "config.json";
  if (fs::exists(cfg_path)) dc = parse_experiment(read_json(cfg_path)).eval.decode;
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, "cli-generate", static_cast<std::uint64_t>(i));
    out.push_back(decode(generate_ag(s.model, k, prompt_ids, dc, rng), s.vocab));
  }
  return out;
}

MetricsReport cmd_eval(const fs::path& seed_dir, const RunnerOptions& options) {
  const auto cfg_path = seed_dir.parent_path() / "config.json";
  if (!fs::exists(cfg_path)) throw PreconditionError("no config.json next to " + seed_dir.string());
  const auto config = parse_experiment(read_json(cfg_path));
  const auto rec = read_json(seed_dir / "run.json").get<RunRecord>();
  RunnerOptions o = options;
  o.seed = rec.seed;
  const auto ctx = prepare_experiment(config, o);
  const auto s = open_seed_dir(seed_dir);
  return evaluate(s.model, ctx.evaluators, ctx.corpus, make_split(ctx, rec.seed).test, ctx.config.eval,
                  derive_seed(rec.seed, "evaluation"));
}

}  // namespace kest
