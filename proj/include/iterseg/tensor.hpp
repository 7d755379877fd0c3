#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iterseg {

// Error raised for violated preconditions on shapes and values.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

// Dense row-major tensor. Spatial maps use rank 3 (channels, height, width);
// convolution kernels use rank 4 (out, in, kh, kw).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    for (int d : shape_) {
      if (d < 0) throw ShapeError("negative tensor dimension");
    }
    data_.assign(count(shape_), fill);
  }

  Tensor(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw ShapeError(detail::concat("tensor data size ", data_.size(), " does not match shape volume ",
                                      count(shape_)));
    }
  }

  static Tensor chw(int c, int h, int w, T fill = T(0)) { return Tensor({c, h, w}, fill); }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-3 accessors.
  int channels() const { return dim(0); }
  int height() const { return dim(1); }
  int width() const { return dim(2); }
  std::size_t plane() const { return static_cast<std::size_t>(dim(1)) * static_cast<std::size_t>(dim(2)); }

  T& operator()(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  const T& operator()(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T* channel(int c) noexcept { return data_.data() + static_cast<std::size_t>(c) * plane(); }
  const T* channel(int c) const noexcept { return data_.data() + static_cast<std::size_t>(c) * plane(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using Mask = Tensor<std::uint8_t>;

inline std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) oss << (i ? "x" : "") << shape[i];
  oss << ']';
  return oss.str();
}

template <typename U, typename T>
Tensor<U> tensor_cast(const Tensor<T>& t) {
  std::vector<U> out(t.size());
  std::transform(t.values().begin(), t.values().end(), out.begin(), [](T v) { return static_cast<U>(v); });
  return Tensor<U>(t.shape(), std::move(out));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(detail::concat(what, ": shape mismatch ", shape_string(a.shape()), " vs ",
                                    shape_string(b.shape())));
  }
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
}

template <typename T>
T min_value(const Tensor<T>& t) {
  return *std::min_element(t.values().begin(), t.values().end());
}

template <typename T>
T max_value(const Tensor<T>& t) {
  return *std::max_element(t.values().begin(), t.values().end());
}

// Binary mask (1xHxW) from a value map, 1 where value > threshold.
template <typename T>
Mask threshold_mask(const Tensor<T>& t, double threshold) {
  Mask m(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) m[i] = static_cast<double>(t[i]) > threshold ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> mask_to_tensor(const Mask& m) {
  return tensor_cast<T>(m);
}

inline std::size_t foreground_count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.values().begin(), m.values().end(), [](auto v) { return v != 0; }));
}

// Separable linear resampling: each output row (column) is a weighted sum of
// input rows (columns). Bilinear and area resizing are both expressed this way,
// so the adjoint needed for backpropagation comes for free.
struct Resampler {
  struct Tap {
    int index;
    double weight;
  };
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<std::vector<Tap>> rows, cols;

  template <typename T>
  Tensor<T> apply(const Tensor<T>& in) const {
    if (in.rank() != 3 || in.height() != in_h || in.width() != in_w) {
      throw ShapeError(detail::concat("resampler expects spatial ", in_h, "x", in_w, ", got ",
                                      shape_string(in.shape())));
    }
    const int c = in.channels();
    Tensor<T> out = Tensor<T>::chw(c, out_h, out_w);
    std::vector<T> tmp(static_cast<std::size_t>(out_h) * in_w);
    for (int ch = 0; ch < c; ++ch) {
      const T* src = in.channel(ch);
      std::fill(tmp.begin(), tmp.end(), T(0));
      for (int oy = 0; oy < out_h; ++oy) {
        T* trow = tmp.data() + static_cast<std::size_t>(oy) * in_w;
        for (const Tap& tap : rows[oy]) {
          const T* srow = src + static_cast<std::size_t>(tap.index) * in_w;
          const T wgt = static_cast<T>(tap.weight);
          for (int x = 0; x < in_w; ++x) trow[x] += wgt * srow[x];
        }
      }
      T* dst = out.channel(ch);
      for (int oy = 0; oy < out_h; ++oy) {
        const T* trow = tmp.data() + static_cast<std::size_t>(oy) * in_w;
        T* drow = dst + static_cast<std::size_t>(oy) * out_w;
        for (int ox = 0; ox < out_w; ++ox) {
          T acc = 0;
          for (const Tap& tap : cols[ox]) acc += static_cast<T>(tap.weight) * trow[tap.index];
          drow[ox] = acc;
        }
      }
    }
    return out;
  }

  // Accumulates the adjoint of apply() into grad_in.
  template <typename T>
  void apply_adjoint(const Tensor<T>& grad_out, Tensor<T>& grad_in) const {
    const int c = grad_out.channels();
    std::vector<T> tmp(static_cast<std::size_t>(out_h) * in_w);
    for (int ch = 0; ch < c; ++ch) {
      std::fill(tmp.begin(), tmp.end(), T(0));
      const T* g = grad_out.channel(ch);
      for (int oy = 0; oy < out_h; ++oy) {
        T* trow = tmp.data() + static_cast<std::size_t>(oy) * in_w;
        const T* grow = g + static_cast<std::size_t>(oy) * out_w;
        for (int ox = 0; ox < out_w; ++ox) {
          for (const Tap& tap : cols[ox]) trow[tap.index] += static_cast<T>(tap.weight) * grow[ox];
        }
      }
      T* dst = grad_in.channel(ch);
      for (int oy = 0; oy < out_h; ++oy) {
        const T* trow = tmp.data() + static_cast<std::size_t>(oy) * in_w;
        for (const Tap& tap : rows[oy]) {
          T* drow = dst + static_cast<std::size_t>(tap.index) * in_w;
          const T wgt = static_cast<T>(tap.weight);
          for (int x = 0; x < in_w; ++x) drow[x] += wgt * trow[x];
        }
      }
    }
  }
};

namespace detail {

// Bilinear taps with corner alignment (the first and last samples coincide).
inline std::vector<std::vector<Resampler::Tap>> bilinear_taps(int in, int out) {
  std::vector<std::vector<Resampler::Tap>> taps(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    if (in == 1) {
      taps[o] = {{0, 1.0}};
      continue;
    }
    const double pos = out == 1 ? 0.0 : static_cast<double>(o) * (in - 1) / (out - 1);
    const int lo = std::min(static_cast<int>(std::floor(pos)), in - 1);
    const int hi = std::min(lo + 1, in - 1);
    const double frac = pos - lo;
    if (hi == lo || frac == 0.0) {
      taps[o] = {{lo, 1.0}};
    } else {
      taps[o] = {{lo, 1.0 - frac}, {hi, frac}};
    }
  }
  return taps;
}

// Exact area-overlap taps: output cell o averages input interval [o*s, (o+1)*s).
inline std::vector<std::vector<Resampler::Tap>> area_taps(int in, int out) {
  std::vector<std::vector<Resampler::Tap>> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double a = o * scale;
    const double b = (o + 1) * scale;
    for (int i = static_cast<int>(std::floor(a)); i < in && i < b; ++i) {
      const double overlap = std::min(b, i + 1.0) - std::max(a, static_cast<double>(i));
      if (overlap > 1e-12) taps[o].push_back({i, overlap / scale});
    }
  }
  return taps;
}

inline std::vector<std::vector<Resampler::Tap>> nearest_taps(int in, int out) {
  std::vector<std::vector<Resampler::Tap>> taps(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    const int i = std::min(in - 1, static_cast<int>(std::floor((o + 0.5) * in / out)));
    taps[o] = {{i, 1.0}};
  }
  return taps;
}

inline void check_resize_dims(int in_h, int in_w, int out_h, int out_w) {
  if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) {
    throw ShapeError(detail::concat("invalid resize ", in_h, "x", in_w, " -> ", out_h, "x", out_w));
  }
}

}  // namespace detail

inline Resampler bilinear_resampler(int in_h, int in_w, int out_h, int out_w) {
  detail::check_resize_dims(in_h, in_w, out_h, out_w);
  return {in_h, in_w, out_h, out_w, detail::bilinear_taps(in_h, out_h), detail::bilinear_taps(in_w, out_w)};
}

inline Resampler area_resampler(int in_h, int in_w, int out_h, int out_w) {
  detail::check_resize_dims(in_h, in_w, out_h, out_w);
  return {in_h, in_w, out_h, out_w, detail::area_taps(in_h, out_h), detail::area_taps(in_w, out_w)};
}

// Area averaging when shrinking, bilinear when enlarging (per axis).
inline Resampler scale_resampler(int in_h, int in_w, int out_h, int out_w) {
  detail::check_resize_dims(in_h, in_w, out_h, out_w);
  return {in_h, in_w, out_h, out_w,
          out_h <= in_h ? detail::area_taps(in_h, out_h) : detail::bilinear_taps(in_h, out_h),
          out_w <= in_w ? detail::area_taps(in_w, out_w) : detail::bilinear_taps(in_w, out_w)};
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& t, int out_h, int out_w) {
  if (t.height() == out_h && t.width() == out_w) return t;
  return bilinear_resampler(t.height(), t.width(), out_h, out_w).apply(t);
}

template <typename T>
Tensor<T> resize_area(const Tensor<T>& t, int out_h, int out_w) {
  if (t.height() == out_h && t.width() == out_w) return t;
  return area_resampler(t.height(), t.width(), out_h, out_w).apply(t);
}

// Nearest-neighbour resize, exact for any value type (used for masks).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& t, int out_h, int out_w) {
  detail::check_resize_dims(t.height(), t.width(), out_h, out_w);
  if (t.height() == out_h && t.width() == out_w) return t;
  const auto rows = detail::nearest_taps(t.height(), out_h);
  const auto cols = detail::nearest_taps(t.width(), out_w);
  Tensor<T> out = Tensor<T>::chw(t.channels(), out_h, out_w);
  for (int c = 0; c < t.channels(); ++c) {
    for (int y = 0; y < out_h; ++y) {
      for (int x = 0; x < out_w; ++x) out(c, y, x) = t(c, rows[y][0].index, cols[x][0].index);
    }
  }
  return out;
}

}  // namespace iterseg
