#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "iterseg/autograd.hpp"
#include "iterseg/io.hpp"

namespace iterseg::nn {

// Square-kernel convolution with bias and "same" padding for odd kernels.
template <typename T>
struct Conv2d {
  Var<T> weight;  // out x in x k x k
  Var<T> bias;    // out x 1 x 1
  int stride = 1;

  Conv2d() = default;

  // He fan-in initialisation, zero bias.
  Conv2d(int in, int out, int kernel, int stride_, std::mt19937_64& rng) : stride(stride_) {
    Tensor<T> w({out, in, kernel, kernel});
    std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / (static_cast<double>(in) * kernel * kernel)));
    for (auto& v : w.values()) v = static_cast<T>(gauss(rng));
    weight = Var<T>::parameter(std::move(w));
    bias = Var<T>::parameter(Tensor<T>::chw(out, 1, 1));
  }

  int in_channels() const { return weight.value().dim(1); }
  int out_channels() const { return weight.value().dim(0); }
  int kernel() const { return weight.value().dim(2); }
  std::size_t parameter_count() const { return weight.value().size() + bias.value().size(); }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, &bias, stride, kernel() / 2); }
};

template <typename T>
using NamedParameters = std::vector<std::pair<std::string, Var<T>>>;

template <typename T>
void append_conv(NamedParameters<T>& out, const std::string& prefix, const Conv2d<T>& c) {
  out.emplace_back(prefix + ".weight", c.weight);
  out.emplace_back(prefix + ".bias", c.bias);
}

template <typename T>
std::uint64_t checksum(const NamedParameters<T>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, p] : params) {
    h = io::fnv1a(name, h);
    h = io::checksum(p.value(), h);
  }
  return h;
}

template <typename T>
std::size_t parameter_count(const NamedParameters<T>& params) {
  std::size_t n = 0;
  for (const auto& [_, p] : params) n += p.value().size();
  return n;
}

template <typename T>
void store(io::Container& c, const std::string& prefix, const NamedParameters<T>& params) {
  for (const auto& [name, p] : params) c.tensors[prefix + name] = tensor_cast<float>(p.value());
}

// Copies stored tensors into existing parameters; shapes must match.
template <typename T>
void restore(const io::Container& c, const std::string& prefix, NamedParameters<T>& params) {
  for (auto& [name, p] : params) {
    auto it = c.tensors.find(prefix + name);
    if (it == c.tensors.end()) throw IoError("checkpoint is missing tensor " + prefix + name);
    if (it->second.shape() != p.value().shape()) {
      throw IoError("checkpoint tensor " + prefix + name + " has shape " + shape_string(it->second.shape()) +
                    ", expected " + shape_string(p.value().shape()));
    }
    p.mutable_value() = tensor_cast<T>(it->second);
  }
}

template <typename T>
void zero_grad(const NamedParameters<T>& params) {
  for (const auto& [_, p] : params) p.zero_grad();
}

}  // namespace iterseg::nn
