#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "pasta/common.hpp"
#include "pasta/vit.hpp"

namespace pasta {

using Rng = std::mt19937_64;

struct ImageGeometry {
  int channels = 3;
  int image_size = 32;
  int patch_size = 4;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int image_dim() const { return channels * image_size * image_size; }
  int pixel(int ch, int y, int x) const { return (ch * image_size + y) * image_size + x; }
};

inline ImageGeometry geometry_of(const ModelConfig& c) {
  return {c.channels, c.image_size, c.patch_size};
}

struct PatchIndex {
  int row = 0;
  int col = 0;

  int flat(int grid) const { return row * grid + col; }
  static PatchIndex from_flat(int index, int grid) { return {index / grid, index % grid}; }
  bool valid(int grid) const { return row >= 0 && col >= 0 && row < grid && col < grid; }

  auto operator<=>(const PatchIndex&) const = default;
};

// Binary H x W mask with ones on one patch.
using PatchMask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

PatchMask make_mask(PatchIndex index, const ImageGeometry& geom);

// Additive C x p x p perturbation in normalized pixel units; values are laid
// out channel-major, then row, then column (the patch-vector order of the ViT).
template <typename S>
struct Trigger {
  int channels = 3;
  int patch_size = 4;
  Vec<S> values;
  S low = S(-1);
  S upp = S(1);

  S norm() const { return values.norm(); }

  template <typename T>
  Trigger<T> cast() const {
    return {channels, patch_size, values.template cast<T>(), static_cast<T>(low),
            static_cast<T>(upp)};
  }
};

// Elementwise uniform in +-range_fraction * (upp - low), then clamped into the bounds.
Trigger<float> init_trigger(const ImageGeometry& geom, float low, float upp, std::uint64_t seed,
                            double range_fraction = 0.05);

template <typename S>
void insert_sup_inplace(S* image, const S* trigger, PatchIndex index, const ImageGeometry& geom);
template <typename S>
void insert_rep_inplace(S* image, const S* pattern, PatchIndex index, const ImageGeometry& geom);

// x + M_i * t. Not clamped to the pixel range.
template <typename S>
Vec<S> insert_sup(const Vec<S>& x, const Trigger<S>& t, PatchIndex index, const ImageGeometry& geom);

// Patch i replaced by `pattern` (C x p x p, same layout as Trigger::values).
template <typename S>
Vec<S> insert_rep(const Vec<S>& x, const Vec<S>& pattern, PatchIndex index,
                  const ImageGeometry& geom);

// x * (1 - m) + pattern * m with a full-size pattern.
template <typename S>
Vec<S> insert_blend(const Vec<S>& x, S m, const Vec<S>& pattern);

// Reads the C x p x p block of patch i out of an image.
template <typename S>
Vec<S> extract_patch(const S* image, PatchIndex index, const ImageGeometry& geom);

struct MISConfig {
  std::vector<PatchIndex> center;  // S_ctr
  std::vector<PatchIndex> corner;  // S_cor

  // Throws ConfigError for empty, overlapping or out-of-grid sets.
  void validate(int grid) const;
  bool operator==(const MISConfig&) const = default;
};

// Hierarchical draw: uniform over S_ctr plus one bucket standing for all of
// S_cor; the corner bucket then draws uniformly inside S_cor.
PatchIndex mis_sample(const MISConfig& mis, Rng& rng);

MISConfig default_mis(int grid);

// How training picks a trigger location for each poisoned sample.
class LocationPolicy {
 public:
  static LocationPolicy mis(MISConfig config);
  static LocationPolicy fixed(PatchIndex index);
  // Plain uniform choice over a list (two-location observation runs).
  static LocationPolicy uniform(std::vector<PatchIndex> locations);

  PatchIndex sample(Rng& rng) const;
  // False for a default-constructed policy.
  bool valid() const;
  const MISConfig& mis_config() const { return mis_; }
  std::string describe() const;

 private:
  enum class Kind { kMis, kUniform } kind_ = Kind::kUniform;
  MISConfig mis_;
  std::vector<PatchIndex> locations_;
};

template <typename S>
Trigger<S> scale_to_l2(const Trigger<S>& t, S target);

template <typename S>
Trigger<S> clamp_trigger(const Trigger<S>& t);

template <typename S>
bool within_bounds(const Trigger<S>& t) {
  return t.values.size() == 0 || (t.values.minCoeff() >= t.low && t.values.maxCoeff() <= t.upp);
}

struct TriggerFile {
  Trigger<float> trigger;
  std::uint64_t seed = 0;
  MISConfig mis;
};

void save_trigger(const TriggerFile& file, const std::filesystem::path& path);
TriggerFile load_trigger(const std::filesystem::path& path);

}  // namespace pasta
