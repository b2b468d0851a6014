#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pasta/trigger.hpp"
#include "pasta/vit.hpp"

namespace pasta {

// Per-channel affine map from [0, 1] pixels to network inputs.
struct Normalization {
  std::vector<float> mean{0.4914f, 0.4822f, 0.4465f};
  std::vector<float> std{0.2470f, 0.2435f, 0.2616f};

  static Normalization identity(int channels);
  void validate(int channels) const;

  // Smallest and largest normalized value a valid pixel can take, over all
  // channels. Used as the trigger bounds.
  std::pair<float, float> bounds() const;
  // Normalized value of a black pixel, per channel.
  std::vector<float> floor() const;

  bool operator==(const Normalization&) const = default;
};

struct Dataset {
  std::string name;
  int channels = 3;
  int image_size = 32;
  Normalization norm;
  int num_classes = 10;
  std::vector<std::string> class_names;
  Mat<float> images;  // N x image_dim, normalized
  std::vector<int> labels;

  int size() const { return static_cast<int>(images.rows()); }
  ImageBatch<float> gather(const std::vector<int>& indices) const;
  ImageBatch<float> all() const { return {images, labels}; }
  // Images with pixel values mapped back to [0, 1] (no clamping).
  Mat<float> denormalized(const Mat<float>& rows) const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
  std::vector<int> train_indices;  // positions in the full source split
  std::vector<int> test_indices;
};

struct SubsetSpec {
  int train = 0;  // 0 keeps the whole split
  int test = 0;
  std::uint64_t seed = 0;
};

// Sorted sample of `count` out of `total` indices; count 0 or >= total keeps all.
std::vector<int> subset_indices(int total, int count, std::uint64_t seed, std::string_view stage);

inline constexpr int kCifarRecord = 1 + 3 * 32 * 32;

// Reads data_batch_{1..5}.bin and test_batch.bin from `root`. Throws
// IngestionError naming the offending path.
DatasetPair load_cifar10(const std::filesystem::path& root, const SubsetSpec& subset,
                         const Normalization& norm = {});

// Per-channel mean and standard deviation of [0, 1] pixels over the five
// training batches.
Normalization cifar10_channel_stats(const std::filesystem::path& root);

// Writes a labelled set of coloured shapes in the CIFAR-10 binary layout
// (ten classes, 32 x 32 RGB).
void write_synthetic_cifar(const std::filesystem::path& root, int train_per_batch, int test_count,
                           std::uint64_t seed);

// Directory-per-class images. Classes are sorted by directory name; each image
// is resized to `size` x `size` RGB. Unreadable files are skipped with a
// warning on stderr; a class with no readable image is an error.
Dataset load_image_folder(const std::filesystem::path& root, int size,
                          const Normalization& norm = {});

// Splits a dataset into a train/test pair by a seeded shuffle.
DatasetPair split_dataset(const Dataset& all, double test_fraction, std::uint64_t seed);

}  // namespace pasta
