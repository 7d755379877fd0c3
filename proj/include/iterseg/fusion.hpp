#pragma once

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "iterseg/backbone.hpp"
#include "iterseg/nn.hpp"
#include "iterseg/prior.hpp"

namespace iterseg {

// Simplified feature-enrichment network: channel concat -> 1x1 reduction ->
// pyramid of scales with per-scale 3x3 blocks and coarse-to-fine merges ->
// fusion of all scales at the input grid -> conv head with 2 output logits.
struct FusionConfig {
  int mid_channels = 80;
  int width = 32;
  int levels = 4;
  std::vector<int> scales;  // explicit square sizes; empty = {h, h/2, h/4, ...}

  void validate() const {
    if (mid_channels < 1) throw std::invalid_argument("fusion.mid_channels must be positive");
    if (width < 1) throw std::invalid_argument("fusion.width must be positive");
    if (levels < 1) throw std::invalid_argument("fusion.levels must be >= 1");
    if (!scales.empty() && static_cast<int>(scales.size()) != levels) {
      throw std::invalid_argument("fusion.scales must list exactly fusion.levels sizes");
    }
    for (int s : scales) {
      if (s < 1) throw std::invalid_argument("fusion.scales must be positive");
    }
  }

  std::string describe() const {
    std::ostringstream oss;
    oss << "mid=" << mid_channels << ";width=" << width << ";levels=" << levels << ";scales=";
    for (int s : scales) oss << s << ',';
    return oss.str();
  }
};

// Closed-form parameter count of FusionNet.
inline std::size_t fusion_parameter_count(const FusionConfig& cfg) {
  const std::size_t w = static_cast<std::size_t>(cfg.width);
  const std::size_t l = static_cast<std::size_t>(cfg.levels);
  const std::size_t in = 1 + 2 * static_cast<std::size_t>(cfg.mid_channels);
  return (in * w + w)                  // reduction 1x1
         + l * (9 * w * w + w)         // per-scale 3x3 blocks
         + (l - 1) * (2 * w * w + w)   // top-down merges 1x1
         + (l * w * w + w)             // scale fusion 1x1
         + (9 * w * w + w)             // head 3x3
         + (2 * w + 2);                // logits 1x1
}

struct PyramidLevel {
  int h = 0, w = 0;
  bool active = true;
};

// Per-level grid sizes for an h x w input. Explicit scales larger than the
// input are dropped (their level contributes zeros).
inline std::vector<PyramidLevel> pyramid_levels(const FusionConfig& cfg, int h, int w) {
  std::vector<PyramidLevel> out;
  bool dropped = false;
  for (int l = 0; l < cfg.levels; ++l) {
    if (cfg.scales.empty()) {
      const double f = std::ldexp(1.0, -l);
      out.push_back({std::max(1, static_cast<int>(std::lround(h * f))), std::max(1, static_cast<int>(std::lround(w * f))), true});
    } else {
      const int s = cfg.scales[static_cast<std::size_t>(l)];
      const bool fits = s <= h && s <= w;
      dropped = dropped || !fits;
      out.push_back({s, s, fits});
    }
  }
  if (std::none_of(out.begin(), out.end(), [](const PyramidLevel& p) { return p.active; })) out[0] = {h, w, true};
  if (dropped) {
    static thread_local bool noticed = false;
    if (!noticed) {
      std::clog << "[iterseg] notice: fusion scales larger than the " << h << "x" << w
                << " input were dropped from the pyramid\n";
      noticed = true;
    }
  }
  return out;
}

template <typename T>
struct CondensedSupport {
  FeatureMap<T> features;  // prototype broadcast to h x w
  std::vector<T> prototype;
  bool empty_foreground = false;
};

// Masked average pooling of (already masked) support features:
// prototype = sum_cells f' / sum_cells m, broadcast over the grid.
template <typename T>
CondensedSupport<T> condense_support(const FeatureMap<T>& support_mid_masked, const Tensor<T>& grid_mask) {
  if (grid_mask.rank() != 3 || grid_mask.channels() != 1 || grid_mask.height() != support_mid_masked.height() ||
      grid_mask.width() != support_mid_masked.width()) {
    throw ShapeError("condense_support: mask grid does not match features");
  }
  const std::size_t np = support_mid_masked.data.plane();
  double mass = 0;
  for (std::size_t i = 0; i < np; ++i) mass += grid_mask[i];
  CondensedSupport<T> out;
  out.features = support_mid_masked;
  out.prototype.assign(static_cast<std::size_t>(support_mid_masked.channels()), T(0));
  out.empty_foreground = !(mass > 0);
  for (int c = 0; c < support_mid_masked.channels(); ++c) {
    const T* src = support_mid_masked.data.channel(c);
    double acc = 0;
    for (std::size_t i = 0; i < np; ++i) acc += src[i];
    const T proto = out.empty_foreground ? T(0) : static_cast<T>(acc / mass);
    out.prototype[static_cast<std::size_t>(c)] = proto;
    std::fill(out.features.data.channel(c), out.features.data.channel(c) + np, proto);
  }
  return out;
}

// Inputs of one fusion step, all on the same h x w grid.
template <typename T>
struct FusionInput {
  ProbMap<T> prior;
  FeatureMap<T> support_mid;  // condensed, broadcast
  FeatureMap<T> query_mid;

  void validate() const {
    const int h = query_mid.height(), w = query_mid.width();
    if (prior.height() != h || prior.width() != w || support_mid.height() != h || support_mid.width() != w) {
      throw ShapeError("FusionInput: prior and features must share the query grid");
    }
    if (support_mid.channels() != query_mid.channels()) throw ShapeError("FusionInput: mid channel mismatch");
  }
};

template <typename T>
class FusionNet {
 public:
  FusionNet() = default;

  FusionNet(FusionConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const int w = cfg_.width;
    reduce_ = nn::Conv2d<T>(1 + 2 * cfg_.mid_channels, w, 1, 1, rng);
    for (int l = 0; l < cfg_.levels; ++l) blocks_.emplace_back(w, w, 3, 1, rng);
    for (int l = 0; l + 1 < cfg_.levels; ++l) merges_.emplace_back(2 * w, w, 1, 1, rng);
    fuse_ = nn::Conv2d<T>(cfg_.levels * w, w, 1, 1, rng);
    head_ = nn::Conv2d<T>(w, w, 3, 1, rng);
    logits_ = nn::Conv2d<T>(w, 2, 1, 1, rng);
  }

  const FusionConfig& config() const { return cfg_; }

  // prior (1xhxw) + support (c_m x h x w) + query (c_m x h x w), concatenated
  // in that order, enriched across scales; returns width x h x w.
  Var<T> fuse_and_enrich(const Var<T>& prior, const Var<T>& support, const Var<T>& query) const {
    const int h = query.value().height(), w = query.value().width();
    if (support.value().channels() != cfg_.mid_channels || query.value().channels() != cfg_.mid_channels) {
      throw ShapeError(detail::concat("fusion expects ", cfg_.mid_channels, " mid channels, got ",
                                      support.value().channels(), " and ", query.value().channels()));
    }
    const Var<T> x = ops::relu(reduce_(ops::concat_channels<T>({prior, support, query})));
    const auto levels = pyramid_levels(cfg_, h, w);
    const int n = cfg_.levels;
    std::vector<Var<T>> outs(static_cast<std::size_t>(n));
    for (int l = n - 1; l >= 0; --l) {
      const PyramidLevel& lv = levels[static_cast<std::size_t>(l)];
      if (!lv.active) continue;
      Var<T> a = ops::relu(blocks_[static_cast<std::size_t>(l)](ops::resize(x, lv.h, lv.w)));
      // nearest coarser active level feeds the merge
      for (int k = l + 1; k < n; ++k) {
        if (!outs[static_cast<std::size_t>(k)].defined()) continue;
        const Var<T> up = ops::resize(outs[static_cast<std::size_t>(k)], lv.h, lv.w);
        a = ops::relu(merges_[static_cast<std::size_t>(l)](ops::concat_channels<T>({a, up})));
        break;
      }
      outs[static_cast<std::size_t>(l)] = a;
    }
    std::vector<Var<T>> at_input;
    for (int l = 0; l < n; ++l) {
      const auto& o = outs[static_cast<std::size_t>(l)];
      at_input.push_back(o.defined() ? ops::resize(o, h, w) : Var<T>::constant(Tensor<T>::chw(cfg_.width, h, w)));
    }
    return ops::relu(fuse_(ops::concat_channels(at_input)));
  }

  // 2 x h x w logits.
  Var<T> predict_logits(const Var<T>& enriched) const { return logits_(ops::relu(head_(enriched))); }

  Var<T> forward(const Var<T>& prior, const Var<T>& support, const Var<T>& query) const {
    return predict_logits(fuse_and_enrich(prior, support, query));
  }

  Var<T> forward(const FusionInput<T>& in) const {
    in.validate();
    return forward(Var<T>::constant(in.prior.data), Var<T>::constant(in.support_mid.data),
                   Var<T>::constant(in.query_mid.data));
  }

  nn::NamedParameters<T> parameters() const {
    nn::NamedParameters<T> p;
    nn::append_conv(p, "reduce", reduce_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) nn::append_conv(p, detail::concat("block", l), blocks_[l]);
    for (std::size_t l = 0; l < merges_.size(); ++l) nn::append_conv(p, detail::concat("merge", l), merges_[l]);
    nn::append_conv(p, "fuse", fuse_);
    nn::append_conv(p, "head", head_);
    nn::append_conv(p, "logits", logits_);
    return p;
  }

  // Parameters of the final (linear) logit layer.
  nn::NamedParameters<T> head_parameters() const {
    nn::NamedParameters<T> p;
    nn::append_conv(p, "logits", logits_);
    return p;
  }

  std::uint64_t checksum() const { return nn::checksum(parameters()); }

  // Deep copy: fresh parameter nodes with the same values.
  FusionNet clone() const {
    FusionNet copy(cfg_, 0);
    auto dst = copy.parameters();
    const auto src = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
    return copy;
  }

 private:
  FusionConfig cfg_;
  nn::Conv2d<T> reduce_;
  std::vector<nn::Conv2d<T>> blocks_;
  std::vector<nn::Conv2d<T>> merges_;
  nn::Conv2d<T> fuse_;
  nn::Conv2d<T> head_;
  nn::Conv2d<T> logits_;
};

inline nlohmann::json fusion_config_json(const FusionConfig& cfg) {
  return {{"mid_channels", cfg.mid_channels}, {"width", cfg.width}, {"levels", cfg.levels}, {"scales", cfg.scales}};
}

inline FusionConfig fusion_config_from_json(const nlohmann::json& j) {
  FusionConfig cfg;
  cfg.mid_channels = j.at("mid_channels").get<int>();
  cfg.width = j.at("width").get<int>();
  cfg.levels = j.at("levels").get<int>();
  cfg.scales = j.at("scales").get<std::vector<int>>();
  cfg.validate();
  return cfg;
}

// Fusion checkpoint: a network's weights plus arbitrary metadata (cascade
// config, backbone fingerprint, training progress).
template <typename T>
io::Container fusion_container(const FusionNet<T>& net, nlohmann::json meta) {
  io::Container c;
  c.meta = std::move(meta);
  c.meta["kind"] = "fusion";
  c.meta["fusion"] = fusion_config_json(net.config());
  c.meta["parameter_count"] = nn::parameter_count(net.parameters());
  nn::store(c, "", net.parameters());
  return c;
}

template <typename T>
FusionNet<T> fusion_from_container(const io::Container& c) {
  if (c.meta.value("kind", "") != "fusion") throw IoError("container does not hold a fusion network");
  FusionNet<T> net(fusion_config_from_json(c.meta.at("fusion")), 0);
  auto params = net.parameters();
  nn::restore(c, "", params);
  return net;
}

}  // namespace iterseg
