#include <filesystem>
#include <map>

#include <boost/math/distributions/chi_squared.hpp>

#include "doctest.h"
#include "pasta/trigger.hpp"

using namespace pasta;

namespace {

Vec<double> random_vec(int n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Vec<double> v(n);
  for (int k = 0; k < n; ++k) v(k) = u(rng);
  return v;
}

Trigger<double> random_trigger(const ImageGeometry& g, std::uint64_t seed) {
  Trigger<double> t;
  t.channels = g.channels;
  t.patch_size = g.patch_size;
  t.values = random_vec(g.patch_dim(), seed, -0.5, 0.5);
  t.low = -1.0;
  t.upp = 1.0;
  return t;
}

bool inside_patch(int pixel, PatchIndex i, const ImageGeometry& g) {
  const int y = (pixel / g.image_size) % g.image_size;
  const int x = pixel % g.image_size;
  return y / g.patch_size == i.row && x / g.patch_size == i.col;
}

}  // namespace

TEST_CASE("make_mask") {
  const ImageGeometry big{3, 224, 16};
  const auto m = make_mask({0, 0}, big);
  CHECK(m.cast<int>().sum() == 256);
  CHECK(m.block(0, 0, 16, 16).cast<int>().minCoeff() == 1);

  const auto br = make_mask({13, 13}, big);
  CHECK(br.block(208, 208, 16, 16).cast<int>().sum() == 256);
  CHECK(br.cast<int>().sum() == 256);

  CHECK_THROWS_AS(make_mask({14, 0}, big), std::out_of_range);
  CHECK_THROWS_AS(make_mask({0, -1}, big), std::out_of_range);

  const ImageGeometry small{3, 32, 4};
  Eigen::ArrayXXi total = Eigen::ArrayXXi::Zero(32, 32);
  for (int i = 0; i < small.num_patches(); ++i) {
    const Eigen::ArrayXXi mi = make_mask(PatchIndex::from_flat(i, 8), small).cast<int>();
    total += mi;
    for (int j = i + 1; j < small.num_patches(); ++j) {
      CHECK((mi * make_mask(PatchIndex::from_flat(j, 8), small).cast<int>()).sum() == 0);
    }
  }
  CHECK((total == 1).all());
}

TEST_CASE("insert_sup") {
  const ImageGeometry g{3, 32, 4};
  const Vec<double> x = random_vec(g.image_dim(), 1);
  auto t = random_trigger(g, 2);

  Trigger<double> zero = t;
  zero.values.setZero();
  CHECK(insert_sup(x, zero, {3, 4}, g) == x);

  for (int i = 0; i < g.num_patches(); i += 7) {
    const PatchIndex idx = PatchIndex::from_flat(i, g.grid());
    const Vec<double> y = insert_sup(x, t, idx, g);
    CHECK((y - x).norm() == doctest::Approx(t.norm()).epsilon(1e-12));
    int changed_outside = 0;
    for (int k = 0; k < g.image_dim(); ++k) {
      if (!inside_patch(k, idx, g) && y(k) != x(k)) ++changed_outside;
    }
    CHECK(changed_outside == 0);
    CHECK(extract_patch(y.data(), idx, g) == extract_patch(x.data(), idx, g) + t.values);
  }
  CHECK_THROWS_AS(insert_sup(Vec<double>(5), t, {0, 0}, g), DimensionError);
}

TEST_CASE("insert_rep") {
  const ImageGeometry g{3, 32, 4};
  const Vec<double> x = random_vec(g.image_dim(), 3);
  const PatchIndex idx{5, 2};
  CHECK(insert_rep(x, extract_patch(x.data(), idx, g), idx, g) == x);

  const Vec<double> sat = Vec<double>::Constant(g.patch_dim(), 2.5);
  const Vec<double> y = insert_rep(x, sat, idx, g);
  CHECK(extract_patch(y.data(), idx, g) == sat);
  for (int k = 0; k < g.image_dim(); ++k) {
    if (!inside_patch(k, idx, g)) CHECK(y(k) == x(k));
  }
  CHECK(insert_rep(y, sat, idx, g) == y);
  CHECK_THROWS_AS(insert_rep(x, Vec<double>(3), idx, g), DimensionError);
}

TEST_CASE("insert_blend") {
  const Vec<double> x = random_vec(12, 4);
  const Vec<double> t = random_vec(12, 5);
  CHECK(insert_blend(x, 0.0, t) == x);
  CHECK(insert_blend(x, 1.0, t) == t);
  CHECK((insert_blend(x, 0.5, x) - x).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(insert_blend(x, 1.5, t), std::domain_error);
  CHECK_THROWS_AS(insert_blend(x, -0.1, t), std::domain_error);
}

TEST_CASE("default_mis") {
  SUBCASE("grid 14 reproduces the reference nine locations") {
    const MISConfig m = default_mis(14);
    CHECK(m.center == std::vector<PatchIndex>{{3, 3}, {3, 10}, {7, 7}, {10, 3}, {10, 10}});
    CHECK(m.corner == std::vector<PatchIndex>{{0, 0}, {0, 13}, {13, 0}, {13, 13}});
    CHECK_NOTHROW(m.validate(14));
  }
  SUBCASE("grid 8") {
    const MISConfig m = default_mis(8);
    CHECK(m.center == std::vector<PatchIndex>{{2, 2}, {2, 5}, {4, 4}, {5, 2}, {5, 5}});
    CHECK(m.corner == std::vector<PatchIndex>{{0, 0}, {0, 7}, {7, 0}, {7, 7}});
  }
  SUBCASE("grid 4 deduplicates the repeated centre") {
    const MISConfig m = default_mis(4);
    CHECK(m.center == std::vector<PatchIndex>{{1, 1}, {1, 2}, {2, 2}, {2, 1}});
    CHECK_NOTHROW(m.validate(4));
  }
  CHECK_THROWS_AS(default_mis(3), ConfigError);
}

TEST_CASE("MISConfig validation") {
  MISConfig m{{{1, 1}}, {{0, 0}}};
  CHECK_NOTHROW(m.validate(4));
  m.corner.push_back({1, 1});
  CHECK_THROWS_AS(m.validate(4), ConfigError);
  CHECK_THROWS_AS((MISConfig{{}, {{0, 0}}}).validate(4), ConfigError);
  CHECK_THROWS_AS((MISConfig{{{4, 0}}, {{0, 0}}}).validate(4), ConfigError);
}

TEST_CASE("mis_sample follows the hierarchical law") {
  SUBCASE("two singleton sets split evenly") {
    const MISConfig m{{{1, 1}}, {{0, 0}}};
    Rng rng(8);
    int first = 0;
    const int draws = 20000;
    for (int k = 0; k < draws; ++k) first += mis_sample(m, rng) == PatchIndex{1, 1};
    CHECK(std::abs(first - draws / 2) < 3 * std::sqrt(draws * 0.25));
  }
  SUBCASE("default sets: 1/6 per centre, 1/24 per corner") {
    const MISConfig m = default_mis(14);
    Rng rng(2024);
    std::map<PatchIndex, int> counts;
    const int draws = 100000;
    for (int k = 0; k < draws; ++k) ++counts[mis_sample(m, rng)];
    CHECK(counts.size() == 9);
    double chi2 = 0;
    for (const auto& p : m.center) {
      const double e = draws / 6.0;
      CHECK(std::abs(counts[p] - e) < 3 * std::sqrt(draws * (1.0 / 6) * (5.0 / 6)));
      chi2 += (counts[p] - e) * (counts[p] - e) / e;
    }
    for (const auto& p : m.corner) {
      const double e = draws / 24.0;
      CHECK(std::abs(counts[p] - e) < 3 * std::sqrt(draws * (1.0 / 24) * (23.0 / 24)));
      chi2 += (counts[p] - e) * (counts[p] - e) / e;
    }
    const boost::math::chi_squared dist(8);
    CHECK(chi2 < boost::math::quantile(dist, 0.99));
  }
  CHECK_THROWS_AS(mis_sample(MISConfig{}, *std::make_unique<Rng>(1)), ConfigError);
}

TEST_CASE("location policies") {
  Rng rng(3);
  const auto fixed = LocationPolicy::fixed({2, 3});
  for (int k = 0; k < 10; ++k) CHECK(fixed.sample(rng) == PatchIndex{2, 3});
  const auto two = LocationPolicy::uniform({{1, 1}, {6, 6}});
  int ones = 0;
  for (int k = 0; k < 1000; ++k) ones += two.sample(rng) == PatchIndex{1, 1};
  CHECK(ones > 400);
  CHECK(ones < 600);
  CHECK_THROWS_AS(LocationPolicy::uniform({}), ConfigError);
}

TEST_CASE("scale_to_l2") {
  const ImageGeometry g{3, 32, 4};
  const auto t = random_trigger(g, 9);
  CHECK((scale_to_l2(t, t.norm()).values - t.values).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(scale_to_l2(t, 1.0).norm() == doctest::Approx(1.0).epsilon(1e-6));
  const auto round = scale_to_l2(scale_to_l2(scale_to_l2(t, 0.5), 2.0), t.norm());
  CHECK((round.values - t.values).cwiseAbs().maxCoeff() < 1e-6);
  Trigger<double> zero = t;
  zero.values.setZero();
  CHECK_THROWS_AS(scale_to_l2(zero, 1.0), std::domain_error);
}

TEST_CASE("clamp_trigger is a projection") {
  const ImageGeometry g{3, 32, 4};
  auto t = random_trigger(g, 10);
  CHECK(clamp_trigger(t).values == t.values);

  t.values(0) = 7.0;
  t.values(1) = -7.0;
  const auto c = clamp_trigger(t);
  CHECK(c.values(0) == t.upp);
  CHECK(c.values(1) == t.low);
  CHECK(clamp_trigger(c).values == c.values);

  Trigger<double> below = t;
  below.values.setConstant(-3.0);
  CHECK((clamp_trigger(below).values.array() == below.low).all());

  // non-expansive in the max norm
  for (std::uint64_t s = 0; s < 20; ++s) {
    Trigger<double> a = t, b = t;
    a.values = random_vec(g.patch_dim(), 100 + s, -3, 3);
    b.values = random_vec(g.patch_dim(), 200 + s, -3, 3);
    const double before = (a.values - b.values).cwiseAbs().maxCoeff();
    const double after = (clamp_trigger(a).values - clamp_trigger(b).values).cwiseAbs().maxCoeff();
    CHECK(after <= before + 1e-15);
  }

  Trigger<double> bad = t;
  bad.low = 2.0;
  bad.upp = 1.0;
  CHECK_THROWS_AS(clamp_trigger(bad), ConfigError);
}

TEST_CASE("init_trigger is seeded and bounded") {
  const ImageGeometry g{3, 32, 4};
  const auto a = init_trigger(g, -2.0f, 2.0f, 5);
  const auto b = init_trigger(g, -2.0f, 2.0f, 5);
  CHECK(a.values == b.values);
  CHECK(a.values.size() == 48);
  CHECK(a.values.cwiseAbs().maxCoeff() <= 0.05f * 4.0f);
  CHECK(a.values.cwiseAbs().maxCoeff() > 0.05f * 4.0f * 0.9f);
  CHECK(init_trigger(g, -2.0f, 2.0f, 5, 0.01).values.cwiseAbs().maxCoeff() <= 0.04f);
  CHECK(init_trigger(g, -2.0f, 2.0f, 5, 0.0).values.isZero());
  CHECK(within_bounds(a));
  CHECK(within_bounds(init_trigger(g, -0.01f, 0.01f, 5)));
}

TEST_CASE("trigger file round trip") {
  const ImageGeometry g{3, 32, 4};
  TriggerFile f{init_trigger(g, -1.9f, 2.1f, 12), 12, default_mis(8)};
  const auto path = std::filesystem::temp_directory_path() / "pasta_test_trigger.bin";
  save_trigger(f, path);
  const auto back = load_trigger(path);
  CHECK(back.trigger.values == f.trigger.values);
  CHECK(back.trigger.low == f.trigger.low);
  CHECK(back.trigger.upp == f.trigger.upp);
  CHECK(back.trigger.patch_size == 4);
  CHECK(back.seed == 12);
  CHECK(back.mis == f.mis);
  std::filesystem::remove(path);
}
