#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>

#include "iterseg/autograd.hpp"
#include "iterseg/backbone.hpp"

namespace iterseg {

enum class ProbKind : std::uint8_t { prior, estimate, augmented };

// 1 x h x w map with values in [0,1].
template <typename T>
struct ProbMap {
  Tensor<T> data;
  ProbKind kind = ProbKind::prior;

  int height() const { return data.height(); }
  int width() const { return data.width(); }
};

template <typename T>
bool in_unit_interval(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return v >= T(0) && v <= T(1); });
}

inline constexpr double kMinMaxEps = 1e-7;

// Cosine similarity between every query cell i and every support cell j,
// returned as an (hq*wq) x (hs*ws) matrix. Cells with a zero feature vector
// have similarity 0 to everything.
template <typename T>
Tensor<T> pairwise_cosine(const FeatureMap<T>& query, const FeatureMap<T>& support) {
  if (query.channels() != support.channels()) {
    throw ShapeError(detail::concat("pairwise_cosine: channel mismatch ", query.channels(), " vs ", support.channels()));
  }
  const int c = query.channels();
  const std::size_t nq = query.data.plane();
  const std::size_t ns = support.data.plane();

  const auto unit_columns = [c](const Tensor<T>& f, std::size_t n) {
    std::vector<T> inv(n, T(0));
    for (int ch = 0; ch < c; ++ch) {
      const T* src = f.channel(ch);
      for (std::size_t i = 0; i < n; ++i) inv[i] += src[i] * src[i];
    }
    for (auto& v : inv) v = v > T(0) ? T(1) / std::sqrt(v) : T(0);
    Tensor<T> out = f;
    for (int ch = 0; ch < c; ++ch) {
      T* dst = out.channel(ch);
      for (std::size_t i = 0; i < n; ++i) dst[i] *= inv[i];
    }
    return out;
  };
  const Tensor<T> qn = unit_columns(query.data, nq);
  const Tensor<T> sn = unit_columns(support.data, ns);

  Tensor<T> sim({static_cast<int>(nq), static_cast<int>(ns)});
  for (int ch = 0; ch < c; ++ch) {
    const T* qrow = qn.channel(ch);
    const T* srow = sn.channel(ch);
    for (std::size_t i = 0; i < nq; ++i) {
      const T qi = qrow[i];
      if (qi == T(0)) continue;
      T* out = sim.data() + i * ns;
      for (std::size_t j = 0; j < ns; ++j) out[j] += qi * srow[j];
    }
  }
  for (auto& v : sim.values()) v = std::clamp(v, T(-1), T(1));
  return sim;
}

// v_i = max_j sim(i, j), reshaped to 1 x h x w.
template <typename T>
Tensor<T> max_over_support(const Tensor<T>& sim, int h, int w) {
  if (sim.rank() != 2 || sim.dim(0) != h * w || sim.dim(1) < 1) {
    throw ShapeError(detail::concat("max_over_support: matrix ", shape_string(sim.shape()), " vs grid ", h, "x", w));
  }
  const std::size_t ns = static_cast<std::size_t>(sim.dim(1));
  Tensor<T> v = Tensor<T>::chw(1, h, w);
  for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) {
    const T* row = sim.data() + i * ns;
    v[i] = *std::max_element(row, row + ns);
  }
  return v;
}

// (v - min v) / (max v - min v + 1e-7) over the whole map.
template <typename T>
ProbMap<T> minmax_normalize(const Tensor<T>& v, ProbKind kind = ProbKind::prior) {
  if (!all_finite(v)) throw ShapeError("minmax_normalize: non-finite input");
  NoGradGuard no_grad;
  ProbMap<T> p{ops::minmax_normalize(Var<T>::constant(v), kMinMaxEps).value(), kind};
  assert(in_unit_interval(p.data));
  return p;
}

// Similarity prior on the query's high-level grid. Support features are
// resized (bilinear) to the query grid when the resolutions differ.
template <typename T>
ProbMap<T> generate_prior(const FeatureMap<T>& query_high, const FeatureMap<T>& support_high_masked) {
  FeatureMap<T> support = support_high_masked;
  if (support.height() != query_high.height() || support.width() != query_high.width()) {
    support.data = resize_bilinear(support.data, query_high.height(), query_high.width());
  }
  const Tensor<T> sim = pairwise_cosine(query_high, support);
  assert(std::all_of(sim.values().begin(), sim.values().end(), [](T v) { return v >= T(-1) && v <= T(1); }));
  return minmax_normalize(max_over_support(sim, query_high.height(), query_high.width()), ProbKind::prior);
}

}  // namespace iterseg
