#include "kest/config.hpp"

#include <cstdio>
#include <fstream>

#include "kest/error.hpp"

namespace kest {

void to_json(nlohmann::json& j, const SplitConfig& c) {
  j = nlohmann::json{{"labeled_fraction", c.labeled_fraction},
                     {"unlabeled_ratio", c.unlabeled_ratio},
                     {"validation_count", c.validation_count}};
}

void from_json(const nlohmann::json& j, SplitConfig& c) {
  SplitConfig d;
  c.labeled_fraction = j.value("labeled_fraction", d.labeled_fraction);
  c.unlabeled_ratio = j.value("unlabeled_ratio", d.unlabeled_ratio);
  c.validation_count = j.value("validation_count", d.validation_count);
}

namespace {

void to_json(nlohmann::json& j, const EvaluatorTraining& e) {
  j = nlohmann::json{{"epochs", e.epochs},
                     {"batch_size", e.batch_size},
                     {"lr", e.lr},
                     {"holdout_fraction", e.holdout_fraction},
                     {"seed", e.seed}};
}

void from_json(const nlohmann::json& j, EvaluatorTraining& e) {
  EvaluatorTraining d;
  e.epochs = j.value("epochs", d.epochs);
  e.batch_size = j.value("batch_size", d.batch_size);
  e.lr = j.value("lr", d.lr);
  e.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
  e.seed = j.value("seed", d.seed);
}

void require(const nlohmann::json& j, const std::string& section, const std::string& key) {
  if (!j.contains(section) || !j.at(section).is_object() || !j.at(section).contains(key)) {
    throw ConfigError("missing required field: " + section + "." + key);
  }
}

/// Re-labels json type errors with the section they occurred in.
template <typename T>
T section(const nlohmann::json& j, const std::string& key) {
  if (!j.contains(key)) return T{};
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid field in " + key + ": " + e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds: list must not be empty");
  if (split.labeled_fraction <= 0 || split.labeled_fraction >= 1) {
    throw ConfigError("split.labeled_fraction must lie in (0, 1)");
  }
  if (split.unlabeled_ratio < 1) throw ConfigError("split.unlabeled_ratio must be >= 1");
  if (split.validation_count < 0) throw ConfigError("split.validation_count must be >= 0");
  corpus.validate(model.max_len);
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = corpus.vocab_size + special::kCount;
  m.num_labels = corpus.num_attributes;
  m.validate();
  selftrain.validate(model.max_len);
  eval.decode.validate(model.max_len);
  if (eval.samples_per_class < 2) throw ConfigError("eval.samples_per_class must be >= 2");
  if (evaluator.epochs < 1) throw ConfigError("evaluator.epochs must be >= 1");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json model = c.model;
  model.erase("vocab_size");
  nlohmann::json ev;
  to_json(ev, c.evaluator);
  j = nlohmann::json{{"name", c.name},
                     {"corpus", c.corpus},
                     {"split", c.split},
                     {"model", model},
                     {"selftrain", c.selftrain},
                     {"evaluator", ev},
                     {"eval", c.eval},
                     {"seeds", c.seeds},
                     {"save_epoch_artifacts", c.save_epoch_artifacts}};
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir.string();
}

ExperimentConfig parse_experiment(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be an object");
  require(j, "corpus", "num_attributes");
  require(j, "corpus", "vocab_size");
  require(j, "selftrain", "mode");
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  c.corpus = section<CorpusSpec>(j, "corpus");
  c.split = section<SplitConfig>(j, "split");
  if (j.contains("model")) {
    nlohmann::json model = j.at("model");
    model["vocab_size"] = 0;
    if (!model.contains("num_labels")) model["num_labels"] = c.corpus.num_attributes;
    try {
      c.model = model.get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid field in model: ") + e.what());
    }
  }
  c.model.vocab_size = 0;
  c.model.num_labels = c.corpus.num_attributes;
  c.selftrain = section<STConfig>(j, "selftrain");
  if (j.contains("evaluator")) {
    try {
      from_json(j.at("evaluator"), c.evaluator);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid field in evaluator: ") + e.what());
    }
  }
  c.eval = section<EvalSettings>(j, "eval");
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.save_epoch_artifacts = j.value("save_epoch_artifacts", c.save_epoch_artifacts);
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment(j);
}

std::string canonical_json(const ExperimentConfig& c) {
  nlohmann::json j = c;
  j.erase("output_dir");
  return j.dump();  // object keys are kept sorted
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : text) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& c) { return fnv1a_hex(canonical_json(c)); }

std::string corpus_hash(const CorpusSpec& spec, int seq_max_len) {
  nlohmann::json j = spec;
  j["seq_max_len"] = seq_max_len;
  return fnv1a_hex(j.dump());
}

}  // namespace kest
