#pragma once

// Helpers shared by the unit and acceptance tests: small random models and a
// central finite-difference oracle that only calls a scalar function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "pasta/vit.hpp"

namespace pasta::testing {

// A depth-2, dim-16 model on 8x8 images with 2x2 patches (4x4 grid).
inline ModelConfig tiny_config(int depth = 2) {
  ModelConfig c;
  c.image_size = 8;
  c.channels = 3;
  c.patch_size = 2;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.depth = depth;
  c.mlp_ratio = 2;
  c.num_classes = 4;
  return c;
}

// Parameters with O(0.3) entries so attention is far from uniform and every
// path through the network carries signal.
inline ViTParams<double> random_params(const ModelConfig& config, std::uint64_t seed,
                                       double scale = 0.3) {
  auto p = zero_params<double>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (Eigen::Index k = 0; k < p.data.size(); ++k) p.data(k) = normal(rng);
  // keep layer-norm gains positive and near one
  for (const auto& e : p.layout().entries()) {
    if (e.init == ParamEntry::Init::kOnes) {
      for (std::size_t k = 0; k < e.size; ++k) {
        p.data(static_cast<Eigen::Index>(e.offset + k)) += 1.0;
      }
    }
  }
  return p;
}

inline Mat<double> random_images(const ModelConfig& config, int batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat<double> x(batch, config.image_dim());
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = normal(rng);
  return x;
}

inline double central_difference(const std::function<double()>& f, double* variable,
                                 double step = 1e-4) {
  const double saved = *variable;
  *variable = saved + step;
  const double up = f();
  *variable = saved - step;
  const double down = f();
  *variable = saved;
  return (up - down) / (2.0 * step);
}

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Indices spread across a vector of length n: every tensor gets sampled when
// n is the parameter count and count is large enough.
inline std::vector<Eigen::Index> spread_indices(Eigen::Index n, int count, std::uint64_t seed) {
  std::vector<Eigen::Index> out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  for (int k = 0; k < count; ++k) out.push_back(pick(rng));
  return out;
}

}  // namespace pasta::testing
