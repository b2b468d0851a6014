#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace pasta {

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Row-major so that one image (or one token) is a contiguous row.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using MatMap = Eigen::Map<Mat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Mat<S>>;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a loss or parameter becomes NaN/Inf during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Derives an independent stream seed from the global seed, a stage name and
// an index. Every random stream in the workbench is obtained this way.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage,
                          std::uint64_t index = 0);

// 64-bit FNV-1a over raw bytes. Used to prove a tensor did not change.
std::uint64_t checksum(const void* data, std::size_t bytes);

}  // namespace pasta
