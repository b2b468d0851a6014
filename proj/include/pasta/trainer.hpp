#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pasta/data.hpp"
#include "pasta/objectives.hpp"

namespace pasta {

struct AdamWConfig {
  double lr = 2e-5;
  double beta1 = 0.99;
  double beta2 = 0.99;
  double eps = 1e-6;
  double weight_decay = 2e-5;

  void validate() const;
};

// Adam with decoupled weight decay: x -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * x).
class AdamW {
 public:
  AdamW(Eigen::Index size, AdamWConfig config);

  void step(Vec<float>& x, const Vec<float>& grad, double lr_scale = 1.0);
  long steps() const { return t_; }

 private:
  AdamWConfig config_;
  Vec<double> m_, v_;
  long t_ = 0;
};

struct AttackConfig {
  int epochs = 20;         // T
  int trigger_epochs = 3;  // T_t; 0 disables trigger optimization
  int model_epochs = 5;    // T_m
  double trigger_lr = 0.01;
  AdamWConfig model_opt;
  double poison_ratio = 0.02;
  double trigger_fraction = 0.05;
  double trigger_init = 0.05;  // init half-width as a fraction of the pixel range
  int target_label = 7;
  int batch_size = 64;
  LossWeights trigger_weights;  // alpha1 on the visual term, alpha2 on attention
  LossWeights model_weights;    // only alpha2 is used
  AttentionSpec attention;
  std::uint64_t seed = 0;

  void validate(int num_classes) const;
};

struct PoisonSplit {
  std::vector<int> clean;    // D_c: complement of the poisoned subset
  std::vector<int> poison;   // D_bd
  std::vector<int> trigger;  // D_trig, drawn independently of D_bd
};

// Sizes are llround(ratio * n), at least one. Index lists are sorted.
PoisonSplit poison_partition(int n, double poison_ratio, double trigger_fraction,
                             std::uint64_t seed);

enum class Phase { kTrigger, kModel };
const char* phase_name(Phase p);

// Mean of the per-step reports of one pass over a phase's data.
struct LogRow {
  int epoch = 0;  // 1-based outer epoch
  Phase phase = Phase::kTrigger;
  int pass = 0;   // 1-based pass within the phase
  LossReport<double> report;
  std::uint64_t seed = 0;
};

void write_loss_log(const std::vector<LogRow>& log, const std::filesystem::path& path);

// Checksums taken around one phase of one outer epoch.
struct PhaseDigest {
  int epoch = 0;
  Phase phase = Phase::kTrigger;
  std::uint64_t params_before = 0, params_after = 0;
  std::uint64_t trigger_before = 0, trigger_after = 0;
};

struct AttackPlan {
  std::string name = "pasta";
  LocationPolicy policy;
  Insertion insertion = Insertion::kSuperimpose;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no per-epoch files
  std::function<void(const LogRow&)> on_row;
};

struct TrainResult {
  std::string name;
  ViTParams<float> params;
  Trigger<float> trigger;
  std::vector<LogRow> log;
  std::vector<PhaseDigest> digests;
  std::map<PatchIndex, long> location_counts;
  PoisonSplit split;
  double trigger_seconds = 0;
  double model_seconds = 0;
};

// Alternating optimization. Each outer epoch runs trigger_epochs SGD passes
// over D_trig on the trigger objective (clamping after every step), then
// model_epochs AdamW passes over the whole training set where members of D_bd
// are poisoned with the current trigger at freshly sampled locations.
// Throws DivergenceError on a non-finite loss; per-epoch checkpoints that were
// already written stay on disk.
TrainResult run_attack(const ViTParams<float>& params0, const Dataset& data,
                       const AttackConfig& attack, const AttackPlan& plan,
                       const Trigger<float>& trigger0, const TrainOptions& options = {});

// Trigger initialized inside the dataset's pixel bounds, MIS over the default
// location sets of the model grid.
Trigger<float> initial_trigger(const ModelConfig& model, const Dataset& data, std::uint64_t seed,
                               double range_fraction = 0.05);

TrainResult run_pasta(const ViTParams<float>& params0, const Dataset& data,
                      const AttackConfig& attack, const TrainOptions& options = {});

TrainResult run_single_location_baseline(const ViTParams<float>& params0, const Dataset& data,
                                         const AttackConfig& attack, PatchIndex location,
                                         const TrainOptions& options = {});

// Standard patch replacement: no trigger optimization and no stealth terms.
TrainResult run_badnets_rep_baseline(const ViTParams<float>& params0, const Dataset& data,
                                     const AttackConfig& attack, const Vec<float>& pattern,
                                     PatchIndex location, const TrainOptions& options = {});

// Black/white checkerboard patch in normalized units.
Vec<float> badnets_pattern(const ModelConfig& model, const Normalization& norm);

// PASTA with the attention weight set to 0 in both phases.
TrainResult run_no_attn_ablation(const ViTParams<float>& params0, const Dataset& data,
                                 const AttackConfig& attack, const TrainOptions& options = {});

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 64;
  AdamWConfig opt{1e-3, 0.9, 0.999, 1e-8, 0.05};
  int warmup_epochs = 1;
  bool augment = true;  // random flips and shifts of up to 4 pixels
};

struct PretrainResult {
  ViTParams<float> params;
  std::vector<double> train_loss;    // per epoch
  std::vector<double> val_accuracy;  // per epoch, empty without validation data
};

// Clean supervised training with a warmup-then-cosine learning rate.
PretrainResult pretrain_clean(const ModelConfig& model, const Dataset& train, const Dataset* val,
                              const PretrainConfig& config, std::uint64_t seed,
                              const TrainOptions& options = {});

// Predicted labels, evaluated in chunks.
std::vector<int> predict(const ViTParams<float>& params, const Mat<float>& images,
                         int chunk = 256);

}  // namespace pasta
