#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrisk/data.hpp"
#include "mmrisk/metrics.hpp"
#include "mmrisk/model.hpp"
#include "mmrisk/objectives.hpp"

namespace mmrisk {

enum class RunMode { ClipItm, Clip, SimClr, Scarf, Supervised };
RunMode parse_run_mode(const std::string& name);
std::string run_mode_name(RunMode mode);

// ---- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; off by default
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // Bias-corrected update; skips frozen parameters, increments the step
  // counter once per call.
  void step(const ParamRefs& params, const std::vector<Tensor>& grads, double lr);
  void step(const ParamRefs& params, Tape& tape, double lr);

  long long steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::unordered_map<const Param*, Moments> moments_;
  long long t_ = 0;
};

// ---- schedule / stopping --------------------------------------------------------

struct LrSchedule {
  double base = 1e-3;
  int warmup_epochs = 10;
  int total_epochs = 100;
};

// Linear warmup to base over W epochs, cosine decay to zero afterwards.
double lr_at(int epoch, const LrSchedule& schedule);

class EarlyStopping {
 public:
  double min_delta = 1e-4;
  int patience = 15;

  // Returns true when training should stop after this epoch.
  bool update(double val_loss);
  double best() const { return best_; }
  int epochs_since_best() const { return since_best_; }

 private:
  double best_ = 1e300;
  int since_best_ = 0;
};

// ---- checkpoints -----------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor value;
};

enum class CheckpointDtype : std::uint32_t { F32 = 0, F64 = 1 };

// "SSMM" container: version, tensor count, per-tensor name/dtype/dims/data,
// trailing CRC32. Round-trips are bit-identical at F64.
void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors,
                     CheckpointDtype dtype = CheckpointDtype::F64);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

std::vector<NamedTensor> snapshot_params(const ParamRefs& params);
// Assigns values by name; shape mismatches are errors. Returns the number
// of parameters assigned.
int load_params(const std::vector<NamedTensor>& src, const ParamRefs& dst);
// Errors unless every dst parameter under `prefix` was present in src.
void require_prefix_loaded(const std::vector<NamedTensor>& src, const ParamRefs& dst,
                           const std::string& prefix);

// ---- run configuration --------------------------------------------------------------

struct PretrainConfig {
  RunMode mode = RunMode::ClipItm;
  int epochs = 100;
  int batch_size = 6;
  double learning_rate = 1e-3;
  int warmup_epochs = 10;
  double val_fraction = 0.1;
  ClipConfig clip;             // temperature, lambda, denominator, reduction
  AugmentationConfig augment;  // image rate 0.95, corruption 0.3
  double weight_decay = 0.0;
  std::uint64_t seed = 7;
};

struct FinetuneConfig {
  RunMode mode = RunMode::ClipItm;
  bool frozen = false;
  // unimodal modes: also attach a freshly initialized encoder of the other
  // modality and fuse both embeddings
  bool incorporate_other_modality = false;
  int max_epochs = 50;
  int batch_size = 6;
  double learning_rate = 1e-3;
  double min_delta = 1e-4;
  int patience = 15;
  SplitConfig split;           // stratified train/val/test of the labeled cohort
  AugmentationConfig augment;  // image rate 0.80, corruption 0.3
  double weight_decay = 0.0;
  std::uint64_t seed = 11;
};

struct EpochRecord {
  int epoch;
  double train_loss;
  double val_loss;
  double lr;
};

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history);

// ---- stages ---------------------------------------------------------------------------

struct PretrainResult {
  std::vector<NamedTensor> best_params;
  std::vector<EpochRecord> history;
  int best_epoch = -1;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

PretrainResult pretrain(const ModelConfig& model_cfg, const PretrainConfig& cfg,
                        const Cohort& cohort, const EpochCallback& on_epoch = {});

struct FinetuneResult {
  std::vector<NamedTensor> best_params;
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  SplitIndices split;
  RocResult val_roc;
  double youden_threshold = 0.0;
};

// pretrain_ckpt may be empty only in supervised mode.
FinetuneResult finetune(const ModelConfig& model_cfg, const FinetuneConfig& cfg,
                        const std::vector<NamedTensor>& pretrain_ckpt, const Cohort& cohort,
                        const EpochCallback& on_epoch = {});

struct EvaluateResult {
  EvalReport val_report;
  EvalReport test_report;
};

// Rebuilds the downstream model from a finetuned checkpoint, freezes the
// Youden threshold on the validation split, reports test metrics at it.
EvaluateResult evaluate_downstream(const ModelConfig& model_cfg, const FinetuneConfig& cfg,
                                   const std::vector<NamedTensor>& finetuned_ckpt,
                                   const Cohort& cohort);

HeadKind head_kind_for(RunMode mode, bool incorporate_other_modality);

// Downstream model assembled from a finetuned checkpoint (used by the
// activation-map tooling).
DownstreamModel build_downstream(const ModelConfig& model_cfg, const FinetuneConfig& cfg,
                                 const std::vector<NamedTensor>& finetuned_ckpt);

// Clean (non-augmented) scores for the given subjects.
std::vector<double> score_subjects(const DownstreamModel& model, const Cohort& cohort,
                                   const std::vector<std::vector<double>>& processed_rows,
                                   const std::vector<int>& indices, int batch_size = 16);

// Deterministic preprocessing fitted on a training index set and applied
// to the full cohort: z-score, chained-equation imputation, marginals.
struct FittedPreprocess {
  ZScoreStats zstats;
  MiceImputer imputer;
  Marginals marginals;                          // over imputed training rows
  std::vector<std::vector<double>> all_rows;    // imputed rows, cohort order
};
FittedPreprocess fit_preprocess(const Cohort& cohort, const std::vector<int>& train_indices);

// Encoder outputs and projections of one pretrain-cohort split under a
// pretraining checkpoint (clean inputs).
struct EncodedSplit {
  std::vector<std::string> ids;
  Tensor img_embeddings, tab_embeddings;    // [M, E]
  Tensor img_projections, tab_projections;  // [M, P]
};
EncodedSplit encode_pretrain_split(const ModelConfig& model_cfg, const PretrainConfig& cfg,
                                   const std::vector<NamedTensor>& ckpt, const Cohort& cohort,
                                   bool validation_split = true);

// The train/val partition used by pretrain() for a given cohort.
SplitIndices pretrain_partition(const PretrainConfig& cfg, int subjects);

}  // namespace mmrisk
