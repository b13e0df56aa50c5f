#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kest/corpus.hpp"
#include "kest/decode.hpp"
#include "kest/losses.hpp"
#include "kest/model.hpp"

namespace kest {

enum class STMode {
  kKest,        // soft NAG pseudo text scored by the kernel loss, refreshed pseudo labels
  kKestHard,    // ablation: hard NAG pseudo text scored with cross-entropy
  kPt,          // AG pseudo text, cross-entropy
  kPtNoise,     // PT plus token drop / shuffle / mask
  kPtNoisePl,   // PT(noise) plus fixed pseudo labels
  kPtSelectPl,  // over-generated PT(noise) filtered by confidence + BALD, plus pseudo labels
  kSupervised,  // base training only
};

std::string to_string(STMode mode);
STMode parse_mode(const std::string& name);  // throws ConfigError
std::vector<STMode> all_modes();

struct NoiseConfig {
  double drop_rate = 0.05;
  double mask_rate = 0.05;
  double shuffle_k = 1.1;
  void validate() const;
};

struct SelectConfig {
  double overgen_factor = 2.0;
  int mc_passes = 8;
  double epsilon = 1e-5;
  void validate() const;
};

struct STConfig {
  STMode mode = STMode::kKest;
  double p_m_base = 0.5;
  double p_m_st = 0.7;
  double ratio_pt = 1.0;
  int max_epochs = 6;
  LossWeights weights_base = kBaseWeights;
  LossWeights weights_st = kSelfTrainWeights;
  NoiseConfig noise;
  SelectConfig select;

  int base_epochs = 60;
  int batch_size = 8;
  double lr_base = 1e-3;
  double lr_st = 3e-4;
  double weight_decay = 0.01;
  int kernel_m = 2;
  int mmd_min_group = 2;
  double prompt_fraction = 0.25;  // PT baselines: share of a D_l item used as prompt
  DecodeConfig pt_decode;         // PT baselines: AG pseudo-text sampling
  bool freeze_embedding = true;
  int threads = 1;
  std::uint64_t seed = 1;

  void validate(int seq_max_len) const;
};

void to_json(nlohmann::json& j, const NoiseConfig& c);
void from_json(const nlohmann::json& j, NoiseConfig& c);
void to_json(nlohmann::json& j, const SelectConfig& c);
void from_json(const nlohmann::json& j, SelectConfig& c);
void to_json(nlohmann::json& j, const STConfig& c);
void from_json(const nlohmann::json& j, STConfig& c);

/// One row of history.csv.
struct EpochRecord {
  int epoch = 0;  // 0 is the base phase
  STMode mode = STMode::kKest;
  double ce_loss = 0;
  double mmd_loss = 0;
  std::optional<double> pl_accuracy;
  double wall_clock_s = 0;
  std::uint64_t forward_passes_ag = 0;
  std::uint64_t forward_passes_nag = 0;

  // Audit fields, not written to history.csv.
  std::uint64_t snapshot_checksum = 0;  // model that produced D_pl / D_pt
  std::uint64_t end_checksum = 0;       // model after this epoch
  std::uint64_t embedding_checksum = 0;
  std::size_t pool_size = 0;
  std::size_t pseudo_labeled = 0;
  std::size_t pseudo_text = 0;
  std::size_t mmd_groups = 0;
  std::size_t dropped_singletons = 0;
};

struct MmdBatchDump {
  int epoch = 0;
  std::string branch;  // "ag" or "nag"
  int label = 0;
  std::vector<Matrix<double>> d_o;
  std::vector<Matrix<double>> d_pt;
  std::vector<double> bandwidths;
  double value = 0;
};

struct STHooks {
  std::function<void(const MmdBatchDump&)> on_mmd;
  /// Called after each self-training epoch with the bundle used for it.
  std::function<void(int epoch, const DatasetBundle&, const ModelF&)> on_epoch;
};

struct BaseResult {
  ModelF model;
  std::vector<double> train_loss;       // per epoch
  std::vector<double> validation_loss;  // per epoch, empty without a validation split
  int best_epoch = 0;
  double wall_clock_s = 0;
  std::uint64_t forward_passes_ag = 0;  // over the whole base phase
  std::uint64_t forward_passes_nag = 0;
};

void to_json(nlohmann::json& j, const BaseResult& r);  // everything except the model
/// Restores the recorded fields around an already loaded model.
BaseResult base_result_from_json(const nlohmann::json& j, ModelF model);

/// Joint training on D_l only; keeps the parameters with the best validation
/// joint loss (the last epoch when there is no validation split).
BaseResult train_base(const DatasetBundle& bundle, const ModelConfig& model_config, const STConfig& config);

/// Mean joint loss (base weights, no dropout, seeded masks) over `examples`.
double joint_loss(const ModelF& model, const std::vector<LabeledExample>& examples, const LossWeights& weights,
                  double p_m, std::uint64_t seed);

std::vector<LabeledExample> pseudo_label(const ModelF& model, const std::vector<UnlabeledExample>& unlabeled,
                                         int threads = 1);

/// Label-stratified uniform sample of `count` items from `candidates`.
std::vector<LabeledExample> sample_pseudo_subset(const std::vector<LabeledExample>& candidates, std::size_t count,
                                                 int num_labels, std::uint64_t seed);

std::vector<PseudoTextItem> pseudo_text(const ModelF& model, const std::vector<LabeledExample>& d_pseudo, double p_m,
                                        bool soft, std::uint64_t seed, double top_p = 0.9, int threads = 1);

TokenSequence noise_corrupt(const TokenSequence& tokens, const NoiseConfig& noise, Rng& rng);

/// H(mean p_t) - mean H(p_t) over `passes` dropout-active classifier passes.
double bald_uncertainty(const ModelF& model, const TokenSequence& tokens, int passes, Rng& rng);

double selection_score(double confidence, double uncertainty, double epsilon = 1e-5);

// --- kernel-loss plumbing ---------------------------------------------------

/// The current model's soft NAG output for a pseudo-text item: distributions
/// at masked positions, one-hot rows elsewhere, embedded and padded to L_max.
template <typename T>
ag::Var<T> nag_soft_output(ag::Tape<T>& tape, const Model<T>& model, const PseudoTextItem& item,
                           const ForwardOptions& opts = {});

/// Teacher-forced AG counterpart on the item's hard tokens: BOS one-hot, then
/// the next-token distributions for positions 1..length-1.
template <typename T>
ag::Var<T> ag_soft_output(ag::Tape<T>& tape, const Model<T>& model, const PseudoTextItem& item,
                          const ForwardOptions& opts = {});

struct GroupLoss {
  ag::Var<float> ag;
  ag::Var<float> nag;
};

/// Kernel loss of one label-homogeneous group for both branches against the
/// stored soft targets.
GroupLoss mmd_group_loss(ag::Tape<float>& tape, const ModelF& model, const std::vector<PseudoTextItem>& pseudo_text,
                         const std::vector<std::size_t>& group, int kernel_m, const ForwardOptions& opts = {},
                         const std::function<void(MmdBatchDump&&)>& dump = {});

struct BatchLoss {
  ag::Var<float> total;
  double ce = 0;   // weighted cross-entropy part (including the classifier term)
  double mmd = 0;  // weighted kernel part
  std::size_t groups = 0;
};

/// Loss of one minibatch under the soft-loss switch. With `soft_pseudo_text`
/// set, PSEUDO_TEXT items contribute only their classification term here;
/// their generator terms come from `mmd_groups`.
BatchLoss batch_loss(ag::Tape<float>& tape, const ModelF& model, const DatasetBundle& bundle,
                     std::span<const PoolItem> items, const std::vector<std::vector<std::size_t>>& mmd_groups,
                     const STConfig& config, bool soft_pseudo_text, Rng& mask_rng, Rng* dropout_rng = nullptr,
                     const std::function<void(MmdBatchDump&&)>& dump = {});

/// Owns the optimizer across self-training epochs.
class SelfTrainer {
 public:
  SelfTrainer(ModelF& model, const STConfig& config, const ModelF* labeler = nullptr);
  EpochRecord epoch(DatasetBundle& bundle, int epoch, const STHooks& hooks = {});

 private:
  ModelF& model_;
  STConfig config_;
  const ModelF* labeler_;
  AdamW<float> optimizer_;
  std::uint64_t step_ = 0;
};

struct RunResult {
  ModelF model;
  std::vector<EpochRecord> history;
};

/// One self-training epoch for `config.mode`. `labeler` is the
/// fixed pseudo labeler used by the PL baselines (ignored otherwise).
EpochRecord kest_epoch(ModelF& model, DatasetBundle& bundle, const STConfig& config, int epoch,
                       const ModelF* labeler = nullptr, const STHooks& hooks = {});

/// Base phase (or the supplied base model) followed by config.max_epochs
/// self-training epochs. SUPERVISED returns the base model unchanged.
RunResult run(const DatasetBundle& bundle, const ModelConfig& model_config, const STConfig& config,
              const BaseResult* base = nullptr, const STHooks& hooks = {});

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history,
                       const std::string& config_hash, bool include_wall_clock);

}  // namespace kest
