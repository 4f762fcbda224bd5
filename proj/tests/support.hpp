#pragma once

// Test-side oracles, written independently of the library internals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "p2s/autograd.hpp"

namespace p2s::test {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline ag::Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols, bool trainable,
                                double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = uniform(rng, lo, hi);
  return trainable ? ag::Tensor::parameter({rows, cols}, v) : ag::Tensor::constant({rows, cols}, v);
}

// Central difference of f() with respect to every element of `param`.
inline std::vector<double> numeric_gradient(ag::Tensor& param, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> g(param.size());
  auto v = param.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = v[i];
    v[i] = x + h;
    const double up = f();
    v[i] = x - h;
    const double down = f();
    v[i] = x;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  return worst;
}

// A scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("p2s-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace p2s::test
