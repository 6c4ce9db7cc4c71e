#pragma once

#include "vfl/dataset.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

namespace vfl::test {

inline std::string data_path(const std::string& name) { return std::string(VFL_DATA_DIR) + "/" + name; }
inline std::string source_path(const std::string& name) { return std::string(VFL_SOURCE_DIR) + "/" + name; }

inline Mat random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

inline Vec random_vector(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

inline Vec random_labels(Eigen::Index n, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = coin(rng) ? 1.0 : -1.0;
  return v;
}

inline bool bitwise_equal(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

inline bool bitwise_equal(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

// Fresh directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vfl_test_" + name);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace vfl::test
