#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pasta/defense.hpp"
#include "pasta/trainer.hpp"

namespace pasta {

inline constexpr const char* kCodeVersion = "pasta-workbench 0.1.0";

struct DatasetSpec {
  std::string kind = "cifar10";  // cifar10, folder or synthetic
  std::filesystem::path root;    // synthetic: where the generated batches are written
  int train_subset = 10000;      // 0 keeps everything
  int test_subset = 2000;
  double folder_test_fraction = 0.2;
  int synthetic_train_per_batch = 2000;
  int synthetic_test = 2000;
  Normalization norm;
};

struct DefenseSelection {
  std::vector<std::string> patch_ops{"drop", "shuffle", "drop_shuffle"};
  bool dbavt = true;
  bool bavt = true;
  bool gaussian = true;
  int repetitions = 100;
  int calibration = 500;  // DBAVT calibration images, drawn from the training split
  std::vector<int> windows{3, 5};
  int strip_blends = 100;
  int strip_samples = 200;
  int strip_bins = 30;
  std::vector<double> prune_ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
};

// Fixed-trigger poisoning runs on the ViT. l2 values are in normalized units
// for the configured patch size.
struct ObserveSpec {
  int epochs = 5;
  double sup_l2 = 0.25;
  double rep_l2 = 5.0;
  std::vector<double> l2_sweep{0.125, 0.25, 0.5, 1.0};
};

struct ExperimentConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/desk";
  DatasetSpec dataset;
  ModelConfig model;
  PretrainConfig pretrain;
  AttackConfig attack;
  PatchIndex single_location{4, 4};
  PatchIndex badnets_location{4, 4};
  std::vector<std::string> payloads{"random:k=1", "random:k=20", "fixed:k=10"};
  DefenseSelection defenses;
  ObserveSpec observe;

  // desk (CIFAR-10 subset, toy ViT), proxy (synthetic CIFAR-format data,
  // smaller ViT) or smoke (seconds-long plumbing check).
  static ExperimentConfig preset_named(const std::string& name);

  // Copies the global seed into every stage that carries one.
  void resolve();
  void validate() const;
  std::vector<PayloadSpec> payload_specs() const;
};

// Sectioned key = value text.
std::string to_ini(const ExperimentConfig& config);
ExperimentConfig from_ini(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& config, const std::filesystem::path& path);

std::string sha256_hex(const void* data, std::size_t bytes);
std::string sha256_file(const std::filesystem::path& path);

struct ManifestFile {
  std::string path;  // relative to the run directory
  std::string sha256;
  std::uintmax_t bytes = 0;
  bool operator==(const ManifestFile&) const = default;
};

struct RunManifest {
  std::string command;
  std::string code_version = kCodeVersion;
  std::uint64_t seed = 0;
  std::string config;  // resolved INI snapshot
  std::string dataset_digest;
  std::vector<std::pair<std::string, double>> stage_seconds;
  std::vector<ManifestFile> files;
  nlohmann::json notes = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static RunManifest read(const std::filesystem::path& path);
  // Paths whose current digest differs from the recorded one (or are missing).
  std::vector<std::string> verify(const std::filesystem::path& run_dir) const;
};

// Collects the artifacts of one run and writes manifest.json at the end.
class RunRecorder {
 public:
  RunRecorder(const ExperimentConfig& config, std::string command,
              std::filesystem::path run_dir);

  const std::filesystem::path& dir() const { return dir_; }
  // Path of an artifact inside the run directory; parent directories are created.
  std::filesystem::path file(const std::string& relative);
  void note(const std::string& key, nlohmann::json value);
  void set_dataset_digest(std::string digest) { manifest_.dataset_digest = std::move(digest); }

  template <typename F>
  auto timed(const std::string& stage, F&& f) {
    const auto start = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      record_stage(stage, start);
    } else {
      auto out = f();
      record_stage(stage, start);
      return out;
    }
  }

  // Digests every file under the run directory, except subdirectories that
  // hold their own manifest, and writes manifest.json.
  RunManifest finish();

 private:
  void record_stage(const std::string& stage, std::chrono::steady_clock::time_point start);

  std::filesystem::path dir_;
  RunManifest manifest_;
};

DatasetPair load_dataset(const DatasetSpec& spec, std::uint64_t seed);
std::string dataset_digest(const DatasetPair& data);
ImageBatch<float> batch_of(const Dataset& d);

// Clean pretraining; writes clean.ckpt and pretrain_log.csv.
PretrainResult pretrain_stage(const ExperimentConfig& config, const DatasetPair& data,
                              RunRecorder& rec);

// One of pasta, single, badnets, no_attn. Writes <name>.ckpt, <name>.trig
// and <name>_loss.csv.
TrainResult attack_stage(const ExperimentConfig& config, const DatasetPair& data,
                         const ViTParams<float>& clean, const std::string& baseline,
                         RunRecorder& rec);

// The trigger a baseline is evaluated with, together with its insertion mode.
struct AttackArtifact {
  std::string name;
  ViTParams<float> params;
  Trigger<float> trigger;
  Insertion insertion = Insertion::kSuperimpose;
};
AttackArtifact artifact_of(const TrainResult& r);

TREHeatmap eval_tre_stage(const AttackArtifact& a, const DatasetPair& data, int target_label,
                          RunRecorder& rec, const std::string& stem);

struct StealthRow {
  std::string method;
  StealthReport report;
};
// Visual and attention tables, one row per method and payload "random:k=1".
std::vector<StealthRow> eval_stealth_stage(const std::vector<AttackArtifact>& methods,
                                           const DatasetPair& data, std::uint64_t seed,
                                           RunRecorder& rec);

struct DefenseSummary {
  std::vector<DefenseOutcome> patch_ops;
  DetectionReport dbavt;
  std::vector<DefenseOutcome> bavt;
  std::vector<DefenseOutcome> gaussian;
};
DefenseSummary defend_stage(const ExperimentConfig& config, const AttackArtifact& a,
                            const DatasetPair& data, RunRecorder& rec);

struct StripSummary {
  std::vector<double> clean, poisoned;
  Histogram histogram;
};
StripSummary strip_stage(const ExperimentConfig& config, const AttackArtifact& a,
                         const DatasetPair& data, RunRecorder& rec);

std::vector<PrunePoint> prune_stage(const ExperimentConfig& config, const AttackArtifact& a,
                                    const DatasetPair& data, RunRecorder& rec);

struct SweepCell {
  double alpha1 = 0, alpha2 = 0;
  double acc = 0, asr = 0, visual_l2 = 0, attention_l2 = 0;
  std::filesystem::path manifest;
};
// PASTA over the alpha1 x alpha2 grid; every cell is its own run directory with
// a manifest. Writes acc/asr/visual_l2/attention_l2 grids under `root`.
std::vector<SweepCell> sweep_alpha(const ExperimentConfig& config, const DatasetPair& data,
                                   const ViTParams<float>& clean, const std::vector<double>& alpha1,
                                   const std::vector<double>& alpha2, RunRecorder& rec);

struct ObserveRow {
  std::string family;  // insertion, l2_sweep, two_location, corner_pair
  std::string label;
  Insertion insertion = Insertion::kSuperimpose;
  double l2 = 0;
  std::vector<PatchIndex> locations;
  double tre = 0;
  double acc = 0;
};

struct ObserveReport {
  std::vector<ObserveRow> rows;
  double single_center_tre = 0;
  double two_location_tre = 0;  // mean over the centre pairs
  double corner_pair_tre = 0;
};

// Location sets of the two-location family: (k, k) with (g-1-k, g-1-k) for
// k = 1..3 (clipped to the grid), plus the corner pair (0, 0), (g-1, g-1).
std::vector<std::vector<PatchIndex>> observe_pairs(int grid);

// Single fixed-trigger poisoning run followed by a TRE heatmap.
ObserveRow observe_run(const ExperimentConfig& config, const DatasetPair& data,
                       const ViTParams<float>& clean, std::string family, std::string label,
                       Insertion insertion, double l2, std::vector<PatchIndex> locations,
                       RunRecorder& rec);

// families: any of "insertion", "l2_sweep", "two_location", "corner_pair";
// empty runs all four.
ObserveReport observe_section4(const ExperimentConfig& config, const DatasetPair& data,
                               const ViTParams<float>& clean, RunRecorder& rec,
                               const std::vector<std::string>& families = {});

// Soft monotonicity: at most one decrease, and it is no larger than `slack`.
bool soft_non_decreasing(const std::vector<double>& values, double slack);

}  // namespace pasta
