#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "pasta/data.hpp"
#include "pasta/objectives.hpp"

namespace pasta {

// How triggers are placed at evaluation time: k copies of the same trigger at
// k distinct patches, either a fixed list or drawn per sample.
struct PayloadSpec {
  enum class Mode { kFixed, kRandom } mode = Mode::kFixed;
  int k = 1;
  std::vector<PatchIndex> locations;  // fixed mode only, length k
  std::uint64_t seed = 0;
  Insertion insertion = Insertion::kSuperimpose;

  static PayloadSpec fixed(std::vector<PatchIndex> locations);
  static PayloadSpec random(int k, std::uint64_t seed);
  // "fixed:k=10" (locations drawn once from `seed`), "fixed:3,4;0,0" or "random:k=1".
  static PayloadSpec parse(const std::string& text, int grid, std::uint64_t seed);

  void validate(int grid) const;
  std::string describe() const;

  // Locations used for the sample at `index` of the evaluated set.
  std::vector<PatchIndex> locations_for(int index, int grid) const;
};

// Poisoned copies of `images`; row r is treated as sample index first_index + r.
Mat<float> apply_payload(const Mat<float>& images, const Trigger<float>& trigger,
                         const PayloadSpec& payload, const ImageGeometry& geom,
                         int first_index = 0);

// Fraction of argmax-correct predictions. Throws ConfigError on an empty set.
double accuracy(const ViTParams<float>& params, const ImageBatch<float>& data);

// Indices of samples whose label differs from the target.
std::vector<int> asr_eligible(const std::vector<int>& labels, int target_label);

// Fraction of eligible samples predicted as the target after poisoning.
double asr(const ViTParams<float>& params, const Trigger<float>& trigger,
           const ImageBatch<float>& data, const PayloadSpec& payload, int target_label);

struct TREHeatmap {
  int grid = 0;
  Mat<double> values;  // grid x grid, per-patch ASR
  double tre = 0;

  static TREHeatmap from_grid(Mat<double> values);
};

// ASR with one fixed insertion at every patch, assembled row-major.
TREHeatmap tre_heatmap(const ViTParams<float>& params, const Trigger<float>& trigger,
                       const ImageBatch<float>& data, int target_label,
                       Insertion insertion = Insertion::kSuperimpose);

// Writes <stem>.csv (six decimals) and <stem>.pgm (0..255 grayscale).
void emit_heatmap(const TREHeatmap& h, const std::filesystem::path& stem);
TREHeatmap read_heatmap_csv(const std::filesystem::path& path);

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Image metrics on C x H x W images with values in [0, peak].
double psnr(const Vec<double>& a, const Vec<double>& b, double peak);
// Gaussian-window SSIM (sigma 1.5, window 11 or the largest odd size that
// fits), valid region only, averaged over channels.
double ssim(const Vec<double>& a, const Vec<double>& b, int channels, int size, double peak);

struct VisualStealth {
  double l2 = 0;
  double psnr_db = kInf;
  double ssim = 1;
};

struct AttentionStealth {
  double l2 = 0;
  double apsnr_db = kInf;
  double ares = 0;
};

struct StealthReport {
  VisualStealth visual;
  AttentionStealth attention;
  std::vector<VisualStealth> per_image_visual;
  std::vector<AttentionStealth> per_image_attention;
};

// Metrics on clamped [0, 1] images (peak 1) after undoing the normalization.
StealthReport visual_stealth(const Dataset& data, const ImageBatch<float>& clean,
                             const Trigger<float>& trigger, const PayloadSpec& payload,
                             const ImageGeometry& geom);

// Composed attention maps of clean and poisoned inputs. l2 is the Frobenius
// distance of the raw maps; APSNR (peak 1) and ARES use max-normalized maps.
StealthReport attention_stealth(const ViTParams<float>& params, const ImageBatch<float>& clean,
                                const Trigger<float>& trigger, const PayloadSpec& payload,
                                AttentionSpec attention = {});

// Small CSV writer for metric tables.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row);
  void write(const std::filesystem::path& path) const;
};

std::string format_metric(double v);

}  // namespace pasta
