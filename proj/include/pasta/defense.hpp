#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pasta/evaluation.hpp"

namespace pasta {

// Source of the random choices made by the patch operations.
class PatchPicker {
 public:
  virtual ~PatchPicker() = default;
  // Uniform over [0, n).
  virtual int patch(int n) = 0;
  // Uniform over unordered pairs, returned with first < second.
  virtual std::pair<int, int> pair(int n) = 0;
};

class RandomPicker final : public PatchPicker {
 public:
  explicit RandomPicker(std::uint64_t seed) : rng_(seed) {}
  int patch(int n) override;
  std::pair<int, int> pair(int n) override;

 private:
  std::mt19937_64 rng_;
};

// In-place primitives on one image row (channel-major, image_dim floats).
void drop_patch(float* image, const ImageGeometry& geom, int patch, const std::vector<float>& fill);
void swap_patches(float* image, const ImageGeometry& geom, int a, int b);

enum class PatchOp { kIdentity, kDrop, kShuffle, kDropShuffle };

std::string patch_op_name(PatchOp op);
PatchOp parse_patch_op(const std::string& name);

// Drop blanks one patch with `fill`; shuffle swaps one pair; drop-shuffle
// swaps a pair first and then drops a patch. Throws ConfigError when a shuffle
// is requested on fewer than two patches.
void apply_patch_op(PatchOp op, float* image, const ImageGeometry& geom,
                    const std::vector<float>& fill, PatchPicker& picker);

Vec<float> patch_drop(const Vec<float>& x, const ImageGeometry& geom,
                      const std::vector<float>& fill, PatchPicker& picker);
Vec<float> patch_shuffle(const Vec<float>& x, const ImageGeometry& geom, PatchPicker& picker);
Vec<float> drop_and_shuffle(const Vec<float>& x, const ImageGeometry& geom,
                            const std::vector<float>& fill, PatchPicker& picker);

// Seed of the picker used for sample `index` at repetition `rep`.
std::uint64_t patch_op_seed(std::uint64_t seed, PatchOp op, int index, int rep);

// Every row perturbed once by `op`, row r seeded as sample first_index + r.
Mat<float> perturb_rows(const Mat<float>& images, PatchOp op, const ImageGeometry& geom,
                        const std::vector<float>& fill, std::uint64_t seed, int rep,
                        int first_index = 0);

struct DefenseOutcome {
  std::string defense;
  std::string parameters;
  double acc_before = 0;
  double asr_before = 0;
  double acc_after = 0;
  double asr_after = 0;
  // Per-repetition values behind the averaged "after" rates.
  std::vector<double> acc_runs;
  std::vector<double> asr_runs;
};

void write_defense_table(const std::vector<DefenseOutcome>& rows, const std::filesystem::path& path);

struct PatchOpSetup {
  std::vector<PatchOp> ops{PatchOp::kDrop, PatchOp::kShuffle, PatchOp::kDropShuffle};
  int repetitions = 100;
  std::vector<float> fill;
  std::uint64_t seed = 0;
};

// One outcome per (operation, payload): ACC and ASR averaged over
// `repetitions` independently perturbed copies of every sample.
std::vector<DefenseOutcome> patch_op_evaluation(const ViTParams<float>& params,
                                                const Trigger<float>& trigger,
                                                const ImageBatch<float>& data,
                                                const std::vector<PayloadSpec>& payloads,
                                                int target_label, const PatchOpSetup& setup);

// Linear-interpolation percentile (q in [0, 100]) of `values`.
double percentile(std::vector<double> values, double q);

// Per-sample count of repetitions whose prediction differs from the
// unperturbed prediction.
std::vector<int> flip_counts(const ViTParams<float>& params, const Mat<float>& images,
                             PatchOp op, const ImageGeometry& geom,
                             const std::vector<float>& fill, int repetitions, std::uint64_t seed);

struct DetectionReport {
  double fnr = 0;  // clean samples flagged as poisoned
  double tpr = 0;  // poisoned samples flagged as poisoned
  double drop_threshold = 0;
  double shuffle_threshold = 0;
  std::vector<int> calib_drop, calib_shuffle;
  std::vector<int> clean_drop, clean_shuffle;
  std::vector<int> poison_drop, poison_shuffle;
};

// Flagged when the drop count exceeds the 90th calibration percentile or the
// shuffle count falls below the 10th.
bool dbavt_flag(int drop, int shuffle, double drop_threshold, double shuffle_threshold);

DetectionReport dbavt_detect(const ViTParams<float>& params, const Mat<float>& calib_clean,
                             const Mat<float>& test_clean, const Mat<float>& test_poisoned,
                             const ImageGeometry& geom, const std::vector<float>& fill,
                             int repetitions, std::uint64_t seed);

// Row-major argmax of a rollout grid; the lowest flat index wins ties.
int block_location(const Mat<float>& rollout);

// Each image with its highest-rollout patch replaced by `fill`.
Mat<float> bavt_block(const ViTParams<float>& params, const Mat<float>& images,
                      const std::vector<float>& fill, std::vector<int>* blocked = nullptr);

DefenseOutcome bavt_evaluation(const ViTParams<float>& params, const Trigger<float>& trigger,
                               const ImageBatch<float>& data, const PayloadSpec& payload,
                               int target_label, const std::vector<float>& fill);

double gaussian_sigma(int window);
Vec<double> gaussian_kernel_1d(int window);
// Outer product of the 1-D kernel; sums to one.
Mat<double> gaussian_kernel(int window);

// Per-channel separable Gaussian blur with reflect-101 borders. Throws
// ConfigError on an even or non-positive window.
Mat<float> gaussian_filter(const Mat<float>& images, const ImageGeometry& geom, int window);

DefenseOutcome gaussian_evaluation(const ViTParams<float>& params, const Trigger<float>& trigger,
                                   const ImageBatch<float>& data, const PayloadSpec& payload,
                                   int target_label, int window);

// Shannon entropy (nats) of softmax(logits).
double softmax_entropy(const Eigen::Ref<const Vec<double>>& logits);

struct StripSample {
  std::vector<int> pool_indices;  // clean image used for each blend
  Mat<double> logits;             // blends x classes
  std::vector<double> entropy;
};

// Blends x with random pool images (pixelwise mean) and records the entropy
// of each blended prediction. Throws ConfigError on an empty pool.
StripSample strip_entropy(const ViTParams<float>& params, const Vec<float>& x,
                          const Mat<float>& clean_pool, int blends, std::uint64_t seed);

// Mean STRIP entropy per row of `inputs`; row r uses derive_seed(seed, "strip", r).
std::vector<double> strip_scores(const ViTParams<float>& params, const Mat<float>& inputs,
                                 const Mat<float>& clean_pool, int blends, std::uint64_t seed);

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<int> clean, poisoned;
};

Histogram strip_histogram(const std::vector<double>& clean, const std::vector<double>& poisoned,
                          int bins);
void write_histogram(const Histogram& h, const std::filesystem::path& path);

struct PruneResult {
  ViTParams<float> params;
  std::vector<int> pruned;               // hidden units of the last MLP, ascending activation
  std::vector<double> mean_activation;   // per hidden unit
};

// Zeroes the lowest-activation `ratio` fraction of the last block's MLP hidden
// units (fc1 column and bias, fc2 row). Throws ConfigError unless 0 <= ratio < 1.
PruneResult fine_prune(const ViTParams<float>& params, const Mat<float>& calib_clean, double ratio);

struct PrunePoint {
  double ratio = 0;
  int pruned = 0;
  double acc = 0;
  double asr = 0;
};

std::vector<PrunePoint> prune_sweep(const ViTParams<float>& params, const Mat<float>& calib_clean,
                                    const std::vector<double>& ratios, const Trigger<float>& trigger,
                                    const ImageBatch<float>& data, const PayloadSpec& payload,
                                    int target_label);
void write_prune_curve(const std::vector<PrunePoint>& points, const std::filesystem::path& path);

}  // namespace pasta
