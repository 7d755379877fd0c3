#pragma once

#include <cmath>
#include <algorithm>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "iterseg/iterseg.hpp"

namespace testsupport {

using iterseg::Tensor;

template <typename T>
Tensor<T> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

inline iterseg::Mask random_mask(int h, int w, std::mt19937_64& rng, double p = 0.5) {
  iterseg::Mask m = iterseg::Mask::chw(1, h, w);
  std::bernoulli_distribution b(p);
  for (auto& v : m.values()) v = b(rng) ? 1 : 0;
  return m;
}

template <typename T>
bool all_equal(const Tensor<T>& t, T value) {
  return std::all_of(t.values().begin(), t.values().end(), [value](T v) { return v == value; });
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("iterseg_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Small backbone for fast tests: 48x48 input gives a 12x12 mid grid and a
// 6x6 high grid.
inline iterseg::BackboneConfig tiny_backbone() {
  iterseg::BackboneConfig b;
  b.widths = {4, 6, 8, 8};
  b.convs_per_stage = 1;
  return b;
}

inline iterseg::SynthConfig tiny_synth(std::uint64_t seed = 3) {
  iterseg::SynthConfig s;
  s.n_classes = 4;
  s.image_size = 48;
  s.samples_per_class = 6;
  s.seed = seed;
  return s;
}

}  // namespace testsupport
