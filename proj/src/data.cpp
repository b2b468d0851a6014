#include "pasta/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace pasta {

namespace fs = std::filesystem;

Normalization Normalization::identity(int channels) {
  Normalization n;
  n.mean.assign(channels, 0.0f);
  n.std.assign(channels, 1.0f);
  return n;
}

void Normalization::validate(int channels) const {
  if (static_cast<int>(mean.size()) != channels || static_cast<int>(std.size()) != channels) {
    throw ConfigError(fmt::format("normalization needs {} channels, has {} means and {} stds",
                                  channels, mean.size(), std.size()));
  }
  for (float s : std) {
    if (!(s > 0.0f)) throw ConfigError("normalization std must be positive");
  }
}

std::pair<float, float> Normalization::bounds() const {
  float low = 0, upp = 0;
  for (std::size_t c = 0; c < mean.size(); ++c) {
    const float lo = (0.0f - mean[c]) / std[c];
    const float hi = (1.0f - mean[c]) / std[c];
    if (c == 0 || lo < low) low = lo;
    if (c == 0 || hi > upp) upp = hi;
  }
  return {low, upp};
}

std::vector<float> Normalization::floor() const {
  std::vector<float> out(mean.size());
  for (std::size_t c = 0; c < mean.size(); ++c) out[c] = -mean[c] / std[c];
  return out;
}

ImageBatch<float> Dataset::gather(const std::vector<int>& indices) const {
  ImageBatch<float> b;
  b.images.resize(static_cast<Eigen::Index>(indices.size()), images.cols());
  b.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    b.images.row(static_cast<Eigen::Index>(k)) = images.row(indices[k]);
    b.labels.push_back(labels[indices[k]]);
  }
  return b;
}

Mat<float> Dataset::denormalized(const Mat<float>& rows) const {
  Mat<float> out = rows;
  const int plane = image_size * image_size;
  for (int c = 0; c < channels; ++c) {
    out.middleCols(c * plane, plane) =
        (out.middleCols(c * plane, plane).array() * norm.std[c] + norm.mean[c]).matrix();
  }
  return out;
}

std::vector<int> subset_indices(int total, int count, std::uint64_t seed, std::string_view stage) {
  std::vector<int> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  if (count <= 0 || count >= total) return idx;
  Rng rng(derive_seed(seed, stage));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

const std::array<std::string, 10> kCifarClasses = {"airplane", "automobile", "bird", "cat", "deer",
                                                   "dog",      "frog",       "horse", "ship", "truck"};

std::vector<unsigned char> read_records(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(fmt::format("{}: cannot open CIFAR-10 batch", path.string()));
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw IngestionError(fmt::format("{}: size {} is not a multiple of the {}-byte record",
                                     path.string(), bytes.size(), kCifarRecord));
  }
  for (std::size_t r = 0; r < bytes.size(); r += kCifarRecord) {
    if (bytes[r] > 9) {
      throw IngestionError(fmt::format("{}: record {} has label byte {}", path.string(),
                                       r / kCifarRecord, bytes[r]));
    }
  }
  return bytes;
}

std::vector<unsigned char> read_split(const fs::path& root, bool train) {
  std::vector<unsigned char> all;
  if (train) {
    for (int b = 1; b <= 5; ++b) {
      auto part = read_records(root / fmt::format("data_batch_{}.bin", b));
      all.insert(all.end(), part.begin(), part.end());
    }
  } else {
    all = read_records(root / "test_batch.bin");
  }
  return all;
}

Dataset decode(const std::vector<unsigned char>& bytes, const std::vector<int>& indices,
               const Normalization& norm, std::string name) {
  Dataset d;
  d.name = std::move(name);
  d.norm = norm;
  d.num_classes = 10;
  d.class_names.assign(kCifarClasses.begin(), kCifarClasses.end());
  d.images.resize(static_cast<Eigen::Index>(indices.size()), 3 * 32 * 32);
  d.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const unsigned char* rec = bytes.data() + static_cast<std::size_t>(indices[k]) * kCifarRecord;
    d.labels.push_back(rec[0]);
    for (int j = 0; j < 3 * 1024; ++j) {
      const int c = j / 1024;
      d.images(static_cast<Eigen::Index>(k), j) = (rec[1 + j] / 255.0f - norm.mean[c]) / norm.std[c];
    }
  }
  return d;
}

}  // namespace

DatasetPair load_cifar10(const fs::path& root, const SubsetSpec& subset, const Normalization& norm) {
  norm.validate(3);
  const auto train_bytes = read_split(root, true);
  const auto test_bytes = read_split(root, false);
  DatasetPair out;
  out.train_indices = subset_indices(static_cast<int>(train_bytes.size() / kCifarRecord),
                                     subset.train, subset.seed, "cifar-train-subset");
  out.test_indices = subset_indices(static_cast<int>(test_bytes.size() / kCifarRecord),
                                    subset.test, subset.seed, "cifar-test-subset");
  out.train = decode(train_bytes, out.train_indices, norm, "cifar10-train");
  out.test = decode(test_bytes, out.test_indices, norm, "cifar10-test");
  return out;
}

Normalization cifar10_channel_stats(const fs::path& root) {
  const auto bytes = read_split(root, true);
  std::array<double, 3> sum{}, sq{};
  const std::size_t n = bytes.size() / kCifarRecord;
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord + 1;
    for (int j = 0; j < 3 * 1024; ++j) {
      const double v = rec[j] / 255.0;
      sum[j / 1024] += v;
      sq[j / 1024] += v * v;
    }
  }
  Normalization out;
  const double count = static_cast<double>(n) * 1024.0;
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    out.mean[c] = static_cast<float>(mean);
    out.std[c] = static_cast<float>(std::sqrt(std::max(0.0, sq[c] / count - mean * mean)));
  }
  return out;
}

namespace {

// One 32x32 RGB image of class `label`: a coloured shape on a coloured
// background, with random placement, scale and pixel noise.
std::array<unsigned char, 3072> draw_shape(int label, Rng& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::normal_distribution<float> noise(0.0f, 0.06f);
  std::array<float, 3> bg{}, fg{};
  for (int c = 0; c < 3; ++c) bg[c] = 0.15f + 0.7f * u(rng);
  // foreground differs from background by at least 0.35 in some channel
  do {
    for (int c = 0; c < 3; ++c) fg[c] = 0.05f + 0.9f * u(rng);
  } while (std::max({std::abs(fg[0] - bg[0]), std::abs(fg[1] - bg[1]), std::abs(fg[2] - bg[2])}) <
           0.35f);
  const float cx = 16.0f + (u(rng) - 0.5f) * 10.0f;
  const float cy = 16.0f + (u(rng) - 0.5f) * 10.0f;
  const float r = 7.0f + 4.0f * u(rng);

  std::array<unsigned char, 3072> img{};
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
      const float d = std::sqrt(dx * dx + dy * dy);
      bool on = false;
      switch (label) {
        case 0: on = d < r; break;                                                      // disk
        case 1: on = std::abs(dx) < r * 0.8f && std::abs(dy) < r * 0.8f; break;          // square
        case 2: on = (std::abs(dx) < 2.0f || std::abs(dy) < 2.0f) && d < r * 1.2f; break;  // plus
        case 3: on = (y / 3) % 2 == 0; break;                                           // horizontal stripes
        case 4: on = (x / 3) % 2 == 0; break;                                           // vertical stripes
        case 5: on = dy > -r && dy < r && std::abs(dx) < (dy + r) * 0.5f; break;        // triangle
        case 6: on = d < r && d > r * 0.55f; break;                                     // ring
        case 7: on = ((x / 4) + (y / 4)) % 2 == 0; break;                               // checkerboard
        case 8: on = ((x + y) / 3) % 2 == 0; break;                                     // diagonal stripes
        default: on = std::abs(dx - dy) < 2.0f || std::abs(dx + dy) < 2.0f; on = on && d < r * 1.2f;  // x
      }
      for (int c = 0; c < 3; ++c) {
        const float v = (on ? fg[c] : bg[c]) + noise(rng);
        img[c * 1024 + y * 32 + x] =
            static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
    }
  }
  return img;
}

void write_batch(const fs::path& path, int count, Rng& rng) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError(fmt::format("{}: cannot write", path.string()));
  std::uniform_int_distribution<int> label(0, 9);
  for (int k = 0; k < count; ++k) {
    const int y = label(rng);
    const auto img = draw_shape(y, rng);
    out.put(static_cast<char>(y));
    out.write(reinterpret_cast<const char*>(img.data()), img.size());
  }
}

}  // namespace

void write_synthetic_cifar(const fs::path& root, int train_per_batch, int test_count,
                           std::uint64_t seed) {
  if (train_per_batch < 1 || test_count < 1) throw ConfigError("synthetic set needs records");
  fs::create_directories(root);
  for (int b = 1; b <= 5; ++b) {
    Rng rng(derive_seed(seed, "synthetic-train", b));
    write_batch(root / fmt::format("data_batch_{}.bin", b), train_per_batch, rng);
  }
  Rng rng(derive_seed(seed, "synthetic-test"));
  write_batch(root / "test_batch.bin", test_count, rng);
}

Dataset load_image_folder(const fs::path& root, int size, const Normalization& norm) {
  norm.validate(3);
  if (size < 1) throw ConfigError("image size must be positive");
  if (!fs::is_directory(root)) {
    throw IngestionError(fmt::format("{}: not a directory", root.string()));
  }
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) classes.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw IngestionError(fmt::format("{}: no class directories", root.string()));

  Dataset d;
  d.name = root.filename().string();
  d.image_size = size;
  d.norm = norm;
  d.num_classes = static_cast<int>(classes.size());
  std::vector<std::vector<float>> rows;
  for (std::size_t label = 0; label < classes.size(); ++label) {
    d.class_names.push_back(classes[label].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[label])) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    int kept = 0;
    for (const auto& f : files) {
      cv::Mat bgr = cv::imread(f.string(), cv::IMREAD_COLOR);
      if (bgr.empty()) {
        fmt::print(stderr, "warning: skipping unreadable image {}\n", f.string());
        continue;
      }
      cv::Mat resized, rgb;
      cv::resize(bgr, resized, cv::Size(size, size), 0, 0, cv::INTER_AREA);
      cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
      std::vector<float> row(static_cast<std::size_t>(3) * size * size);
      for (int y = 0; y < size; ++y) {
        const auto* px = rgb.ptr<cv::Vec3b>(y);
        for (int x = 0; x < size; ++x)
          for (int c = 0; c < 3; ++c)
            row[(c * size + y) * size + x] = (px[x][c] / 255.0f - norm.mean[c]) / norm.std[c];
      }
      rows.push_back(std::move(row));
      d.labels.push_back(static_cast<int>(label));
      ++kept;
    }
    if (kept == 0) {
      throw IngestionError(fmt::format("{}: class has no readable images",
                                       classes[label].string()));
    }
  }
  d.images.resize(static_cast<Eigen::Index>(rows.size()), 3 * size * size);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    d.images.row(static_cast<Eigen::Index>(r)) =
        Eigen::Map<const Eigen::RowVectorXf>(rows[r].data(), d.images.cols());
  }
  return d;
}

DatasetPair split_dataset(const Dataset& all, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test fraction must lie in (0, 1)");
  }
  std::vector<int> idx(all.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * all.size()));
  DatasetPair out;
  out.test_indices.assign(idx.begin(), idx.begin() + static_cast<long>(n_test));
  out.train_indices.assign(idx.begin() + static_cast<long>(n_test), idx.end());
  std::sort(out.test_indices.begin(), out.test_indices.end());
  std::sort(out.train_indices.begin(), out.train_indices.end());
  auto take = [&](const std::vector<int>& ids, const char* suffix) {
    Dataset d = all;
    d.name = all.name + suffix;
    const auto b = all.gather(ids);
    d.images = b.images;
    d.labels = b.labels;
    return d;
  };
  out.train = take(out.train_indices, "-train");
  out.test = take(out.test_indices, "-test");
  return out;
}

}  // namespace pasta
