#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "doctest.h"
#include "pasta/defense.hpp"
#include "pasta/trainer.hpp"
#include "support.hpp"

using namespace pasta;
using pasta::testing::random_params;
using pasta::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

// Replays a fixed list of choices.
class ScriptedPicker final : public PatchPicker {
 public:
  ScriptedPicker(std::vector<int> patches, std::vector<std::pair<int, int>> pairs)
      : patches_(std::move(patches)), pairs_(std::move(pairs)) {}
  int patch(int) override { return patches_.at(p_++); }
  std::pair<int, int> pair(int) override { return pairs_.at(q_++); }

 private:
  std::vector<int> patches_;
  std::vector<std::pair<int, int>> pairs_;
  std::size_t p_ = 0, q_ = 0;
};

Vec<float> ramp_image(const ImageGeometry& g) {
  Vec<float> x(g.image_dim());
  for (int k = 0; k < x.size(); ++k) x(k) = 1.0f + static_cast<float>(k);
  return x;
}

// Flat indices of patches whose pixels differ between a and b.
std::vector<int> changed_patches(const Vec<float>& a, const Vec<float>& b, const ImageGeometry& g) {
  std::vector<int> out;
  const int s = g.patch_size;
  for (int i = 0; i < g.num_patches(); ++i) {
    const PatchIndex p = PatchIndex::from_flat(i, g.grid());
    bool diff = false;
    for (int c = 0; c < g.channels; ++c)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const int k = g.pixel(c, p.row * s + y, p.col * s + x);
          diff = diff || a(k) != b(k);
        }
    if (diff) out.push_back(i);
  }
  return out;
}

ImageBatch<float> random_set(const ModelConfig& c, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_int_distribution<int> label(0, c.num_classes - 1);
  ImageBatch<float> b;
  b.images.resize(n, c.image_dim());
  for (Eigen::Index k = 0; k < b.images.size(); ++k) b.images.data()[k] = normal(rng);
  for (int k = 0; k < n; ++k) b.labels.push_back(label(rng));
  return b;
}

Trigger<float> random_trigger(const ModelConfig& c, std::uint64_t seed, float scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, scale);
  Trigger<float> t;
  t.channels = c.channels;
  t.patch_size = c.patch_size;
  t.values.resize(c.patch_dim());
  for (Eigen::Index k = 0; k < t.values.size(); ++k) t.values(k) = normal(rng);
  t.low = -100;
  t.upp = 100;
  return t;
}

const std::vector<float> kFill{-2.0f, -2.0f, -2.0f};

}  // namespace

TEST_CASE("patch drop") {
  SUBCASE("a one-patch grid is blanked entirely") {
    const ImageGeometry g{3, 4, 4};
    RandomPicker picker(1);
    const Vec<float> out = patch_drop(ramp_image(g), g, kFill, picker);
    CHECK((out.array() == -2.0f).all());
  }
  SUBCASE("only one patch changes") {
    const ImageGeometry g{3, 8, 2};
    RandomPicker picker(2);
    const Vec<float> x = ramp_image(g);
    const Vec<float> out = patch_drop(x, g, kFill, picker);
    CHECK((out.array() != x.array()).count() == 3 * 2 * 2);
    CHECK(changed_patches(x, out, g).size() == 1);
  }
  SUBCASE("patch frequencies are uniform") {
    const ImageGeometry g{3, 8, 2};
    const int n = g.num_patches(), draws = 10000;
    std::vector<int> hist(n, 0);
    const Vec<float> x = ramp_image(g);
    for (int k = 0; k < draws; ++k) {
      RandomPicker picker(derive_seed(5, "drop-frequency", k));
      ++hist[changed_patches(x, patch_drop(x, g, kFill, picker), g).at(0)];
    }
    const double p = 1.0 / n, sigma = std::sqrt(draws * p * (1 - p));
    for (int h : hist) CHECK(std::abs(h - draws * p) <= 3 * sigma);
  }
  CHECK_THROWS_AS(drop_patch(ramp_image({3, 4, 2}).data(), {3, 4, 2}, 0, {0.0f}), DimensionError);
}

TEST_CASE("patch shuffle") {
  const ImageGeometry g{3, 6, 2};
  const Vec<float> x = ramp_image(g);
  SUBCASE("swapping the same pair twice is the identity") {
    ScriptedPicker picker({}, {{2, 7}, {2, 7}});
    const Vec<float> once = patch_shuffle(x, g, picker);
    CHECK(once != x);
    CHECK(patch_shuffle(once, g, picker) == x);
  }
  SUBCASE("the pixel multiset is preserved") {
    RandomPicker picker(3);
    const Vec<float> out = patch_shuffle(x, g, picker);
    std::vector<float> a(x.data(), x.data() + x.size()), b(out.data(), out.data() + out.size());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    CHECK(changed_patches(x, out, g).size() == 2);
  }
  SUBCASE("pair frequencies are uniform over unordered pairs") {
    const int n = g.num_patches(), pairs = n * (n - 1) / 2, draws = 100000;
    std::map<std::pair<int, int>, int> hist;
    for (int k = 0; k < draws; ++k) {
      RandomPicker picker(derive_seed(6, "shuffle-frequency", k));
      const auto ch = changed_patches(x, patch_shuffle(x, g, picker), g);
      REQUIRE(ch.size() == 2);
      ++hist[{ch[0], ch[1]}];
    }
    CHECK(static_cast<int>(hist.size()) == pairs);
    const double p = 1.0 / pairs, sigma = std::sqrt(draws * p * (1 - p));
    for (const auto& [pair, h] : hist) CHECK(std::abs(h - draws * p) <= 3 * sigma);
  }
  SUBCASE("a single patch cannot be shuffled") {
    RandomPicker picker(1);
    CHECK_THROWS_AS(patch_shuffle(ramp_image({3, 4, 4}), {3, 4, 4}, picker), ConfigError);
  }
}

TEST_CASE("drop and shuffle") {
  const ImageGeometry g{3, 6, 2};
  const Vec<float> x = ramp_image(g);
  SUBCASE("shuffle happens before drop") {
    ScriptedPicker picker({0}, {{0, 1}});
    const Vec<float> out = drop_and_shuffle(x, g, kFill, picker);
    Vec<float> expected = x;
    // patch 1 now holds the old patch 0, patch 0 is blank
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 2; ++y)
        for (int xx = 0; xx < 2; ++xx) {
          expected(g.pixel(c, y, 2 + xx)) = x(g.pixel(c, y, xx));
          expected(g.pixel(c, y, xx)) = -2.0f;
        }
    CHECK(out == expected);

    Vec<float> other = x;
    drop_patch(other.data(), g, 0, kFill);
    swap_patches(other.data(), g, 0, 1);
    CHECK(other != out);
  }
  SUBCASE("at most three patches change") {
    for (int k = 0; k < 500; ++k) {
      RandomPicker picker(derive_seed(7, "drop-shuffle", k));
      CHECK(changed_patches(x, drop_and_shuffle(x, g, kFill, picker), g).size() <= 3);
    }
  }
  CHECK(parse_patch_op("drop_shuffle") == PatchOp::kDropShuffle);
  CHECK_THROWS_AS(parse_patch_op("twirl"), ConfigError);
}

TEST_CASE("patch-op evaluation") {
  const ModelConfig c = tiny_config();
  const auto model = random_params(c, 3, 0.4).cast<float>();
  const auto data = random_set(c, 30, 4);
  const auto t = random_trigger(c, 5, 2.0f);
  const std::vector<PayloadSpec> payloads{PayloadSpec::random(1, 9), PayloadSpec::fixed({{1, 2}, {3, 0}})};

  SUBCASE("identity with one repetition reproduces the plain rates") {
    PatchOpSetup setup{{PatchOp::kIdentity}, 1, kFill, 1};
    const auto out = patch_op_evaluation(model, t, data, payloads, 2, setup);
    REQUIRE(out.size() == 2);
    for (std::size_t p = 0; p < 2; ++p) {
      CHECK(out[p].acc_after == accuracy(model, data));
      CHECK(out[p].asr_after == asr(model, t, data, payloads[p], 2));
      CHECK(out[p].asr_before == out[p].asr_after);
    }
  }
  SUBCASE("averages match the per-repetition logs") {
    PatchOpSetup setup{{PatchOp::kDrop, PatchOp::kDropShuffle}, 4, kFill, 2};
    const auto out = patch_op_evaluation(model, t, data, payloads, 2, setup);
    REQUIRE(out.size() == 4);
    for (const auto& o : out) {
      REQUIRE(o.acc_runs.size() == 4);
      CHECK(o.acc_after == doctest::Approx(std::accumulate(o.acc_runs.begin(), o.acc_runs.end(), 0.0) / 4));
      CHECK(o.asr_after == doctest::Approx(std::accumulate(o.asr_runs.begin(), o.asr_runs.end(), 0.0) / 4));
      for (double v : {o.acc_before, o.asr_before, o.acc_after, o.asr_after}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
    // repetition 3 of the drop run, rebuilt sample by sample
    const auto geom = geometry_of(c);
    int hits = 0;
    for (int i = 0; i < data.size(); ++i) {
      Mat<float> row = data.images.row(i);
      RandomPicker picker(patch_op_seed(2, PatchOp::kDrop, i, 3));
      apply_patch_op(PatchOp::kDrop, row.data(), geom, kFill, picker);
      hits += predict(model, row)[0] == data.labels[i];
    }
    CHECK(out[0].acc_runs[3] == doctest::Approx(hits / 30.0));
    CHECK(out[0].defense == "patch_drop");
    CHECK(out[2].defense == "patch_drop_shuffle");
  }
}

TEST_CASE("percentile") {
  const std::vector<double> a{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5};
  const std::vector<double> b{0, 0, 0, 2, 7, 7, 1, 0, 3, 12, 4, 4, 0, 5};
  // numpy.percentile reference values
  CHECK(percentile(a, 10) == 1.0);
  CHECK(percentile(a, 90) == 6.0);
  CHECK(percentile(a, 100) == 9.0);
  CHECK(percentile(b, 90) == 7.0);
  CHECK(percentile(b, 50) == 2.5);
  CHECK(percentile(b, 37.5) == doctest::Approx(0.875));
  CHECK_THROWS_AS(percentile({}, 50), ConfigError);
  CHECK_THROWS_AS(percentile(a, 101), ConfigError);
}

TEST_CASE("DBAVT detection") {
  const ModelConfig c = tiny_config();
  const auto geom = geometry_of(c);
  const auto model = random_params(c, 11, 0.5).cast<float>();
  const auto calib = random_set(c, 40, 1), clean = random_set(c, 20, 2);
  const Mat<float> poisoned = apply_payload(clean.images, random_trigger(c, 3, 3.0f),
                                            PayloadSpec::fixed({{0, 0}}), geom);
  const auto r = dbavt_detect(model, calib.images, clean.images, poisoned, geom, kFill, 10, 5);

  SUBCASE("thresholds are order statistics of the calibration counts") {
    auto oracle = [](std::vector<int> v, double q) {
      std::sort(v.begin(), v.end());
      const double pos = q * (v.size() - 1);
      const std::size_t i = static_cast<std::size_t>(pos);
      const double frac = pos - i;
      return i + 1 < v.size() ? v[i] * (1 - frac) + v[i + 1] * frac : double(v[i]);
    };
    CHECK(r.drop_threshold == doctest::Approx(oracle(r.calib_drop, 0.9)));
    CHECK(r.shuffle_threshold == doctest::Approx(oracle(r.calib_shuffle, 0.1)));
  }
  SUBCASE("rates follow the flag rule") {
    int flagged = 0;
    for (std::size_t k = 0; k < r.clean_drop.size(); ++k) {
      flagged += r.clean_drop[k] > r.drop_threshold || r.clean_shuffle[k] < r.shuffle_threshold;
    }
    CHECK(r.fnr == doctest::Approx(flagged / 20.0));
    CHECK(r.tpr >= 0.0);
    CHECK(r.tpr <= 1.0);
    CHECK(r.calib_drop.size() == 40);
    for (int v : r.calib_drop) CHECK(v <= 10);
  }
  SUBCASE("flip counts match a per-sample recount") {
    const auto counts = flip_counts(model, clean.images, PatchOp::kShuffle, geom, kFill, 6, 8);
    const auto base = predict(model, clean.images);
    for (int i = 0; i < 5; ++i) {
      int flips = 0;
      for (int rep = 0; rep < 6; ++rep) {
        Mat<float> row = clean.images.row(i);
        RandomPicker picker(patch_op_seed(8, PatchOp::kShuffle, i, rep));
        apply_patch_op(PatchOp::kShuffle, row.data(), geom, kFill, picker);
        flips += predict(model, row)[0] != base[i];
      }
      CHECK(counts[i] == flips);
    }
  }
  SUBCASE("a prediction that never flips is flagged iff the shuffle threshold is positive") {
    CHECK(dbavt_flag(0, 0, 3.0, 0.5));
    CHECK_FALSE(dbavt_flag(0, 0, 3.0, 0.0));
    auto frozen = model;
    frozen.tensor("head.weight").setZero();
    const auto z = dbavt_detect(frozen, calib.images, clean.images, poisoned, geom, kFill, 5, 5);
    CHECK(z.shuffle_threshold == 0.0);
    CHECK(z.fnr == 0.0);
    CHECK(z.tpr == 0.0);
  }
  CHECK_THROWS_AS(dbavt_detect(model, Mat<float>(0, c.image_dim()), clean.images, poisoned, geom, kFill, 3, 1),
                  ConfigError);
}

TEST_CASE("BAVT blocking") {
  SUBCASE("argmax and tie rule") {
    Mat<float> grid = Mat<float>::Constant(4, 4, 0.2f);
    grid(2, 3) = 1.0f;
    CHECK(block_location(grid) == 11);
    grid(3, 1) = 1.0f;
    CHECK(block_location(grid) == 11);
    grid(0, 2) = 1.0f;
    CHECK(block_location(grid) == 2);
  }
  SUBCASE("the patch with the highest rollout is blanked") {
    const ModelConfig c = tiny_config();
    const auto geom = geometry_of(c);
    const auto model = random_params(c, 13, 0.6).cast<float>();
    const auto data = random_set(c, 6, 3);
    std::vector<int> blocked;
    const Mat<float> out = bavt_block(model, data.images, kFill, &blocked);
    const auto fwd = forward(model.cast<double>(), Mat<double>(data.images.cast<double>()));
    for (int b = 0; b < 6; ++b) {
      // rollout recomputed with explicit loops
      const auto& at = fwd.attention[b];
      const int t = at.tokens;
      Mat<double> roll = Mat<double>::Identity(t, t);
      for (int l = 0; l < at.depth(); ++l) {
        Mat<double> a(t, t);
        for (int i = 0; i < t; ++i) {
          double sum = 0;
          for (int j = 0; j < t; ++j) {
            double m = 0;
            for (int h = 0; h < at.heads; ++h) m += at.layers[l](h * t + i, j) / at.heads;
            a(i, j) = 0.5 * (m + (i == j));
            sum += a(i, j);
          }
          a.row(i) /= sum;
        }
        roll = (a * roll).eval();
      }
      int best = 1;
      for (int j = 2; j < t; ++j)
        if (roll(0, j) > roll(0, best)) best = j;
      CHECK(blocked[b] == best - 1);
      const auto ch = changed_patches(Vec<float>(data.images.row(b).transpose()),
                                      Vec<float>(out.row(b).transpose()), geom);
      CHECK(ch == std::vector<int>{blocked[b]});
    }
  }
}

TEST_CASE("Gaussian filter") {
  CHECK(gaussian_sigma(3) == doctest::Approx(0.8));
  CHECK(gaussian_sigma(5) == doctest::Approx(1.1));
  for (int w : {3, 5}) {
    const Mat<double> k = gaussian_kernel(w);
    CHECK(std::abs(k.sum() - 1.0) <= 1e-7);
    CHECK((k - k.transpose()).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK((k - k.rowwise().reverse()).cwiseAbs().maxCoeff() <= 1e-15);
    // separable: equal to the outer product of its marginals, and to the
    // directly normalized two-dimensional Gaussian
    const Vec<double> row = k.rowwise().sum();
    CHECK((k - row * row.transpose()).cwiseAbs().maxCoeff() <= 1e-7);
    const double s = gaussian_sigma(w);
    Mat<double> direct(w, w);
    for (int y = 0; y < w; ++y)
      for (int x = 0; x < w; ++x)
        direct(y, x) = std::exp(-(std::pow(y - w / 2, 2) + std::pow(x - w / 2, 2)) / (2 * s * s));
    direct /= direct.sum();
    CHECK((k - direct).cwiseAbs().maxCoeff() <= 1e-12);
    const cv::Mat ref = cv::getGaussianKernel(w, s, CV_64F);
    for (int i = 0; i < w; ++i) CHECK(gaussian_kernel_1d(w)(i) == doctest::Approx(ref.at<double>(i)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(gaussian_kernel(4), ConfigError);
  CHECK_THROWS_AS(gaussian_kernel(0), ConfigError);

  const ImageGeometry g{3, 16, 4};
  SUBCASE("constant images are fixed points") {
    const Mat<float> img = Mat<float>::Constant(2, g.image_dim(), 0.7f);
    CHECK((gaussian_filter(img, g, 5) - img).cwiseAbs().maxCoeff() <= 1e-6);
  }
  SUBCASE("matches OpenCV with reflect-101 borders") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<float> u(-2, 2);
    Mat<float> img(1, g.image_dim());
    for (Eigen::Index k = 0; k < img.size(); ++k) img.data()[k] = u(rng);
    for (int w : {3, 5}) {
      const Mat<float> out = gaussian_filter(img, g, w);
      for (int ch = 0; ch < 3; ++ch) {
        cv::Mat plane(16, 16, CV_32F, img.data() + ch * 256);
        cv::Mat blurred;
        cv::GaussianBlur(plane, blurred, cv::Size(w, w), gaussian_sigma(w), gaussian_sigma(w),
                         cv::BORDER_REFLECT_101);
        for (int y = 0; y < 16; ++y)
          for (int x = 0; x < 16; ++x) CHECK(out(0, g.pixel(ch, y, x)) == doctest::Approx(blurred.at<float>(y, x)).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("STRIP entropy") {
  const ModelConfig c = tiny_config();
  const auto data = random_set(c, 12, 5);
  const Vec<float> x = data.images.row(0).transpose();
  SUBCASE("uniform logits give ln(classes)") {
    auto flat = random_params(c, 2, 0.3).cast<float>();
    flat.tensor("head.weight").setZero();
    flat.tensor("head.bias").setZero();
    const auto s = strip_entropy(flat, x, data.images, 20, 3);
    for (double h : s.entropy) CHECK(h == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("a confident model gives near-zero entropy") {
    auto sure = random_params(c, 2, 0.3).cast<float>();
    sure.tensor("head.weight").setZero();
    sure.tensor("head.bias").setZero();
    sure.tensor("head.bias")(0, 1) = 60.0f;
    for (double h : strip_entropy(sure, x, data.images, 5, 3).entropy) CHECK(h < 1e-20);
  }
  SUBCASE("entropies and blends match a scalar recomputation") {
    const auto model = random_params(c, 7, 0.4).cast<float>();
    const auto s = strip_entropy(model, x, data.images, 8, 11);
    REQUIRE(s.entropy.size() == 8);
    for (int b = 0; b < 8; ++b) {
      double mx = -1e300, z = 0, h = 0;
      for (int k = 0; k < 4; ++k) mx = std::max(mx, s.logits(b, k));
      for (int k = 0; k < 4; ++k) z += std::exp(s.logits(b, k) - mx);
      for (int k = 0; k < 4; ++k) {
        const double p = std::exp(s.logits(b, k) - mx) / z;
        h -= p * std::log(p);
      }
      CHECK(s.entropy[b] == doctest::Approx(h).epsilon(1e-12));
      const Mat<float> blend = 0.5f * (x.transpose() + data.images.row(s.pool_indices[b]));
      const Mat<float> logit = forward(model, blend, {false, false}).logits;
      for (int k = 0; k < 4; ++k) CHECK(s.logits(b, k) == doctest::Approx(logit(0, k)).epsilon(1e-5));
    }
    const auto scores = strip_scores(model, data.images.topRows(3), data.images, 8, 11);
    const auto first = strip_entropy(model, x, data.images, 8, derive_seed(11, "strip", 0));
    CHECK(scores[0] == doctest::Approx(std::accumulate(first.entropy.begin(), first.entropy.end(), 0.0) / 8));
  }
  CHECK_THROWS_AS(strip_entropy(init_model(c, 1), x, Mat<float>(0, c.image_dim()), 5, 1), ConfigError);

  SUBCASE("histogram") {
    const auto h = strip_histogram({0.1, 0.2, 0.2, 0.9}, {0.0, 0.05, 1.0}, 4);
    CHECK(h.edges.front() == 0.0);
    CHECK(h.edges.back() == 1.0);
    CHECK(h.clean == std::vector<int>{3, 0, 0, 1});
    CHECK(h.poisoned == std::vector<int>{2, 0, 0, 1});
    const fs::path p = fs::temp_directory_path() / "pasta_strip_hist.csv";
    write_histogram(h, p);
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    CHECK(line == "bin_low,bin_high,clean,poisoned");
    std::getline(in, line);
    CHECK(line == "0.000000,0.250000,3,2");
    fs::remove(p);
  }
}

TEST_CASE("fine pruning") {
  const ModelConfig c = tiny_config();
  const auto model = random_params(c, 17, 0.5).cast<float>();
  const auto calib = random_set(c, 10, 6);
  SUBCASE("ratio zero leaves the parameters untouched") {
    const auto r = fine_prune(model, calib.images, 0.0);
    CHECK(r.pruned.empty());
    CHECK(checksum(r.params.data.data(), r.params.data.size() * sizeof(float)) ==
          checksum(model.data.data(), model.data.size() * sizeof(float)));
  }
  SUBCASE("pruned units are the lowest-activation ones") {
    const auto r = fine_prune(model, calib.images, 0.5);
    const int m = c.mlp_dim();
    CHECK(static_cast<int>(r.pruned.size()) == m / 2);
    const auto fwd = forward(model, calib.images, {false, true});
    const Mat<float>& pre = fwd.cache.blocks.back().hpre;
    std::vector<std::pair<double, int>> rank;
    for (int j = 0; j < m; ++j) {
      double sum = 0;
      for (Eigen::Index t = 0; t < pre.rows(); ++t) {
        const double v = pre(t, j);
        sum += std::abs(0.5 * v * (1 + std::erf(v / std::sqrt(2.0))));
      }
      rank.emplace_back(sum / pre.rows(), j);
    }
    std::sort(rank.begin(), rank.end());
    std::vector<int> want;
    for (int k = 0; k < m / 2; ++k) want.push_back(rank[k].second);
    std::vector<int> got = r.pruned;
    std::sort(want.begin(), want.end());
    std::sort(got.begin(), got.end());
    CHECK(got == want);

    const auto& blk = r.params.layout().blocks.back();
    auto p = r.params;
    for (int j : r.pruned) {
      CHECK(p.mat(blk.fc1_b, 1, m)(0, j) == 0.0f);
      CHECK(p.mat(blk.fc2_w, m, c.embed_dim).row(j).isZero());
    }
    const auto after = forward(r.params, calib.images, {false, true});
    for (int j : r.pruned) CHECK(after.cache.blocks.back().act.col(j).isZero());
  }
  CHECK_THROWS_AS(fine_prune(model, calib.images, 1.0), ConfigError);
  CHECK_THROWS_AS(fine_prune(model, calib.images, -0.1), ConfigError);
}
