#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iterseg/tensor.hpp"

// Minimal reverse-mode differentiation over Tensor values. Each operation
// records its parents and a closure that pushes the output gradient back to
// them. Graphs are built per forward pass and released when the last Var
// referencing them goes out of scope.

namespace iterseg {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() const { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() const {
    if (!node_->grad.empty()) node_->grad.fill(T(0));
  }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds the output Var; records parents/backward only when some input
// requires a gradient and recording is enabled.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (auto& in : inputs) n->parents.push_back(in.node());
      n->backward = std::move(backward);
    }
  }
  return Var<T>(std::move(n));
}

// Backpropagates from a scalar root (seed gradient 1).
template <typename T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  if (root.value().size() != 1) throw ShapeError("backward() requires a scalar root");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace ops {

namespace detail {

struct ConvGeometry {
  int cin, h, w, cout, k, stride, pad, oh, ow;
};

template <typename T>
void im2col(const Tensor<T>& x, const ConvGeometry& g, std::vector<T>& col) {
  const std::size_t npix = static_cast<std::size_t>(g.oh) * g.ow;
  col.assign(static_cast<std::size_t>(g.cin) * g.k * g.k * npix, T(0));
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* src = x.channel(ci);
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* dst = col.data() + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * npix;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const T* srow = src + static_cast<std::size_t>(iy) * g.w;
          T* drow = dst + static_cast<std::size_t>(oy) * g.ow;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) drow[ox] = srow[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, const ConvGeometry& g, Tensor<T>& gx) {
  const std::size_t npix = static_cast<std::size_t>(g.oh) * g.ow;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* dst = gx.channel(ci);
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* src = col.data() + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * npix;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          T* drow = dst + static_cast<std::size_t>(iy) * g.w;
          const T* srow = src + static_cast<std::size_t>(oy) * g.ow;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution with square kernels and symmetric zero padding.
// x: cin x h x w, weight: cout x cin x k x k, bias: cout x 1 x 1 (optional).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, int stride, int pad) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.channels() || wv.dim(2) != wv.dim(3)) {
    throw ShapeError(iterseg::detail::concat("conv2d: input ", shape_string(xv.shape()), " incompatible with kernel ",
                                             shape_string(wv.shape())));
  }
  detail::ConvGeometry g{xv.channels(), xv.height(), xv.width(), wv.dim(0), wv.dim(2), stride, pad, 0, 0};
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.oh < 1 || g.ow < 1) throw ShapeError("conv2d: input smaller than kernel");
  const std::size_t npix = static_cast<std::size_t>(g.oh) * g.ow;
  const std::size_t rows = static_cast<std::size_t>(g.cin) * g.k * g.k;
  const bool direct = g.k == 1 && stride == 1 && pad == 0;

  auto col = std::make_shared<std::vector<T>>();
  if (!direct) detail::im2col(xv, g, *col);
  const T* cols = direct ? xv.data() : col->data();

  Tensor<T> out = Tensor<T>::chw(g.cout, g.oh, g.ow);
  for (int co = 0; co < g.cout; ++co) {
    T* orow = out.channel(co);
    if (bias) std::fill(orow, orow + npix, bias->value()[co]);
    const T* wrow = wv.data() + co * rows;
    for (std::size_t r = 0; r < rows; ++r) {
      const T wgt = wrow[r];
      if (wgt == T(0)) continue;
      const T* crow = cols + r * npix;
      for (std::size_t p = 0; p < npix; ++p) orow[p] += wgt * crow[p];
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return make_result<T>(std::move(out), inputs, [g, col, direct, has_bias, npix, rows](Node<T>& n) {
    const auto& xn = n.parents[0];
    const auto& wn = n.parents[1];
    const T* gout = n.grad.data();
    const T* cols = direct ? xn->value.data() : col->data();
    if (wn->requires_grad) {
      T* gw = wn->grad_buffer().data();
      for (int co = 0; co < g.cout; ++co) {
        const T* grow = gout + co * npix;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* crow = cols + r * npix;
          T acc = 0;
          for (std::size_t p = 0; p < npix; ++p) acc += grow[p] * crow[p];
          gw[co * rows + r] += acc;
        }
      }
    }
    if (has_bias && n.parents[2]->requires_grad) {
      T* gb = n.parents[2]->grad_buffer().data();
      for (int co = 0; co < g.cout; ++co) {
        const T* grow = gout + co * npix;
        T acc = 0;
        for (std::size_t p = 0; p < npix; ++p) acc += grow[p];
        gb[co] += acc;
      }
    }
    if (xn->requires_grad) {
      const T* wv = wn->value.data();
      std::vector<T> gcol(rows * npix, T(0));
      for (int co = 0; co < g.cout; ++co) {
        const T* grow = gout + co * npix;
        for (std::size_t r = 0; r < rows; ++r) {
          const T wgt = wv[co * rows + r];
          T* gc = gcol.data() + r * npix;
          for (std::size_t p = 0; p < npix; ++p) gc[p] += wgt * grow[p];
        }
      }
      Tensor<T>& gx = xn->grad_buffer();
      if (direct) {
        for (std::size_t i = 0; i < gcol.size(); ++i) gx[i] += gcol[i];
      } else {
        detail::col2im_add(gcol, g, gx);
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {x}, [](Node<T>& n) {
    auto& p = n.parents[0];
    Tensor<T>& gx = p->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (n.value[i] > T(0)) gx[i] += n.grad[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const int h = parts[0].value().height();
  const int w = parts[0].value().width();
  int c = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 3 || p.value().height() != h || p.value().width() != w) {
      throw ShapeError(iterseg::detail::concat("concat_channels: spatial mismatch ", shape_string(p.value().shape()),
                                               " vs ", h, "x", w));
    }
    c += p.value().channels();
  }
  Tensor<T> out = Tensor<T>::chw(c, h, w);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& n) {
    std::size_t off = 0;
    for (auto& p : n.parents) {
      const std::size_t len = p->value.size();
      if (p->requires_grad) {
        Tensor<T>& gp = p->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) gp[i] += n.grad[off + i];
      }
      off += len;
    }
  });
}

template <typename T>
Var<T> resample(const Var<T>& x, const Resampler& r) {
  Tensor<T> out = r.apply(x.value());
  return make_result<T>(std::move(out), {x}, [r](Node<T>& n) { r.apply_adjoint(n.grad, n.parents[0]->grad_buffer()); });
}

// Resizes spatially: area averaging to shrink, bilinear to enlarge.
template <typename T>
Var<T> resize(const Var<T>& x, int out_h, int out_w) {
  if (x.value().height() == out_h && x.value().width() == out_w) return x;
  return resample(x, scale_resampler(x.value().height(), x.value().width(), out_h, out_w));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      Tensor<T>& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor<T>& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa->value[i];
    }
  });
}

// (x - min x) / (max x - min x + eps) over the whole tensor. The bounds carry
// gradient to their arg-extremum when it is unique; tied bounds get
// subgradient 0.
template <typename T>
Var<T> minmax_normalize(const Var<T>& x, double eps = 1e-7) {
  const Tensor<T>& v = x.value();
  if (v.empty()) throw ShapeError("minmax_normalize: empty input");
  const auto [lo_it, hi_it] = std::minmax_element(v.values().begin(), v.values().end());
  const T lo = *lo_it;
  const T hi = *hi_it;
  const T denom = hi - lo + static_cast<T>(eps);
  Tensor<T> out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) / denom;
  const auto unique_index = [&v](T target) -> std::ptrdiff_t {
    std::ptrdiff_t idx = -1;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] == target) {
        if (idx >= 0) return -1;
        idx = static_cast<std::ptrdiff_t>(i);
      }
    }
    return idx;
  };
  const std::ptrdiff_t imin = unique_index(lo);
  const std::ptrdiff_t imax = unique_index(hi);
  return make_result<T>(std::move(out), {x}, [denom, imin, imax](Node<T>& n) {
    Tensor<T>& gx = n.parents[0]->grad_buffer();
    if (gx.size() == 1) return;  // output is identically 0
    T dot_gy = 0;  // sum_i g_i * y_i
    T sum_g = 0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += n.grad[i] / denom;
      dot_gy += n.grad[i] * n.value[i];
      sum_g += n.grad[i];
    }
    // dy_i/dmax = -y_i/denom, dy_i/dmin = (y_i - 1)/denom
    if (imax >= 0 && imax != imin) gx[static_cast<std::size_t>(imax)] += -dot_gy / denom;
    if (imin >= 0 && imax != imin) gx[static_cast<std::size_t>(imin)] += (dot_gy - sum_g) / denom;
  });
}

// Two-way softmax over channels of a 2xhxw logit map; returns the channel-1
// probability as 1xhxw.
template <typename T>
Var<T> softmax_binary(const Var<T>& logits) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 3 || z.channels() != 2) throw ShapeError("softmax_binary: expected 2xhxw logits");
  Tensor<T> out = Tensor<T>::chw(1, z.height(), z.width());
  const std::size_t n = z.plane();
  for (std::size_t i = 0; i < n; ++i) {
    const T z0 = z[i];
    const T z1 = z[n + i];
    const T m = std::max(z0, z1);
    const T e0 = std::exp(z0 - m);
    const T e1 = std::exp(z1 - m);
    // The smaller probability is divided out, the larger is its complement,
    // so swapping the channels gives exactly 1 - p.
    out[i] = z1 < z0 ? e1 / (e0 + e1) : T(1) - e0 / (e0 + e1);
  }
  return make_result<T>(std::move(out), {logits}, [n](Node<T>& node) {
    Tensor<T>& gz = node.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      const T p = node.value[i];
      const T d = node.grad[i] * p * (T(1) - p);
      gz[i] -= d;
      gz[n + i] += d;
    }
  });
}

// Mean binary cross-entropy of the channel-1 softmax probability against a
// {0,1} target, computed from logit differences in log-sum-exp form.
template <typename T>
Var<T> binary_ce_with_logits(const Var<T>& logits, const Tensor<T>& target) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 3 || z.channels() != 2 || target.rank() != 3 || target.height() != z.height() ||
      target.width() != z.width() || target.channels() != 1) {
    throw ShapeError(iterseg::detail::concat("binary_ce_with_logits: logits ", shape_string(z.shape()),
                                             " vs target ", shape_string(target.shape())));
  }
  const std::size_t n = z.plane();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(z[n + i]) - static_cast<double>(z[i]);
    const double y = target[i];
    // -[y log s(d) + (1-y) log(1-s(d))] = softplus(d) - y d
    total += std::max(d, 0.0) + std::log1p(std::exp(-std::abs(d))) - y * d;
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(n)));
  return make_result<T>(std::move(out), {logits}, [n, target](Node<T>& node) {
    Tensor<T>& gz = node.parents[0]->grad_buffer();
    const Tensor<T>& z = node.parents[0]->value;
    const T scale = node.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = z[n + i] - z[i];
      const T s = d >= 0 ? T(1) / (T(1) + std::exp(-d)) : std::exp(d) / (T(1) + std::exp(d));
      const T g = scale * (s - target[i]);
      gz[n + i] += g;
      gz[i] -= g;
    }
  });
}

// Multi-class cross-entropy for a logit vector shaped n x 1 x 1.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, int label) {
  const Tensor<T>& z = logits.value();
  const int n = static_cast<int>(z.size());
  if (label < 0 || label >= n) throw ShapeError("softmax_cross_entropy: label out of range");
  const T m = max_value(z);
  double sum = 0;
  for (int i = 0; i < n; ++i) sum += std::exp(static_cast<double>(z[i] - m));
  const double lse = std::log(sum) + static_cast<double>(m);
  Tensor<T> out({1}, static_cast<T>(lse - static_cast<double>(z[label])));
  return make_result<T>(std::move(out), {logits}, [label, lse, n](Node<T>& node) {
    Tensor<T>& gz = node.parents[0]->grad_buffer();
    const Tensor<T>& z = node.parents[0]->value;
    for (int i = 0; i < n; ++i) {
      const T p = static_cast<T>(std::exp(static_cast<double>(z[i]) - lse));
      gz[i] += node.grad[0] * (p - (i == label ? T(1) : T(0)));
    }
  });
}

// c x h x w -> c x 1 x 1 mean over the spatial grid.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Tensor<T>& v = x.value();
  const std::size_t np = v.plane();
  Tensor<T> out = Tensor<T>::chw(v.channels(), 1, 1);
  for (int c = 0; c < v.channels(); ++c) {
    const T* src = v.channel(c);
    T acc = 0;
    for (std::size_t i = 0; i < np; ++i) acc += src[i];
    out[c] = acc / static_cast<T>(np);
  }
  return make_result<T>(std::move(out), {x}, [np](Node<T>& n) {
    Tensor<T>& gx = n.parents[0]->grad_buffer();
    for (int c = 0; c < gx.channels(); ++c) {
      T* dst = gx.channel(c);
      const T g = n.grad[c] / static_cast<T>(np);
      for (std::size_t i = 0; i < np; ++i) dst[i] += g;
    }
  });
}

// Weighted sum of scalar Vars.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.empty() || terms.size() != weights.size()) throw ShapeError("weighted_sum: bad arguments");
  T acc = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    acc += weights[i] * terms[i].value()[0];
  }
  return make_result<T>(Tensor<T>({1}, acc), terms, [weights](Node<T>& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      if (n.parents[i]->requires_grad) n.parents[i]->grad_buffer()[0] += weights[i] * n.grad[0];
    }
  });
}

// Copy of the value with no gradient path.
template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::constant(x.value());
}

}  // namespace ops
}  // namespace iterseg
