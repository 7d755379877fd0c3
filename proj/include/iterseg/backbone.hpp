#pragma once

#include <algorithm>
#include <filesystem>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "iterseg/episodes.hpp"
#include "iterseg/nn.hpp"

namespace iterseg {

enum class FeatureLevel : std::uint8_t { mid = 0, high = 1 };

template <typename T>
struct FeatureMap {
  Tensor<T> data;  // c x h x w
  FeatureLevel level = FeatureLevel::mid;
  int stride = 1;  // input pixels per feature cell

  int channels() const { return data.channels(); }
  int height() const { return data.height(); }
  int width() const { return data.width(); }
};

struct BackboneConfig {
  std::vector<int> widths{16, 32, 48, 64};
  std::vector<int> strides{2, 2, 2, 1};
  int convs_per_stage = 2;
  std::vector<int> mid_stages{1, 2};
  int high_stage = 3;
  bool frozen = true;

  void validate() const {
    if (widths.empty() || widths.size() != strides.size()) {
      throw std::invalid_argument("backbone.widths and backbone.strides must be non-empty and equally long");
    }
    for (int w : widths) {
      if (w < 1) throw std::invalid_argument("backbone.widths must be positive");
    }
    for (int s : strides) {
      if (s < 1) throw std::invalid_argument("backbone.strides must be positive");
    }
    if (convs_per_stage < 1) throw std::invalid_argument("backbone.convs_per_stage must be >= 1");
    if (high_stage < 0 || high_stage >= static_cast<int>(widths.size())) {
      throw std::invalid_argument("backbone.high_stage must index a stage");
    }
    if (mid_stages.empty()) throw std::invalid_argument("backbone.mid_stages must be non-empty");
    for (std::size_t i = 0; i < mid_stages.size(); ++i) {
      if (mid_stages[i] < 0 || mid_stages[i] >= high_stage) {
        throw std::invalid_argument("backbone.mid_stages must be shallower than backbone.high_stage");
      }
      if (i > 0 && mid_stages[i] <= mid_stages[i - 1]) {
        throw std::invalid_argument("backbone.mid_stages must be strictly increasing");
      }
    }
  }

  int mid_channels() const {
    int c = 0;
    for (int s : mid_stages) c += widths[static_cast<std::size_t>(s)];
    return c;
  }

  int cumulative_stride(int stage) const {
    int s = 1;
    for (int i = 0; i <= stage; ++i) s *= strides[static_cast<std::size_t>(i)];
    return s;
  }

  int min_input_size() const { return cumulative_stride(high_stage); }

  std::string describe() const {
    std::ostringstream oss;
    oss << "widths=";
    for (int w : widths) oss << w << ',';
    oss << ";strides=";
    for (int s : strides) oss << s << ',';
    oss << ";convs=" << convs_per_stage << ";mid=";
    for (int m : mid_stages) oss << m << ',';
    oss << ";high=" << high_stage;
    return oss.str();
  }
};

// Stage i: a strided 3x3 conv followed by (convs_per_stage - 1) unstrided 3x3
// convs, each with ReLU.
template <typename T>
class Backbone {
 public:
  Backbone() = default;

  Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    int in = 3;
    for (std::size_t s = 0; s < cfg_.widths.size(); ++s) {
      std::vector<nn::Conv2d<T>> stage;
      for (int k = 0; k < cfg_.convs_per_stage; ++k) {
        stage.emplace_back(in, cfg_.widths[s], 3, k == 0 ? cfg_.strides[s] : 1, rng);
        in = cfg_.widths[s];
      }
      stages_.push_back(std::move(stage));
    }
  }

  const BackboneConfig& config() const { return cfg_; }
  bool frozen() const { return cfg_.frozen; }
  void set_frozen(bool f) { cfg_.frozen = f; }

  // Runs stages 0..last and returns every stage output.
  std::vector<Var<T>> forward_stages(const Var<T>& image, int last) const {
    std::vector<Var<T>> outs;
    Var<T> x = Var<T>::constant(standardize(image.value()));
    for (int s = 0; s <= last; ++s) {
      for (const auto& conv : stages_[static_cast<std::size_t>(s)]) x = ops::relu(conv(x));
      outs.push_back(x);
    }
    return outs;
  }

  // Fixed input scaling: [0,1] pixels to roughly zero mean, unit spread.
  static Tensor<T> standardize(const Tensor<T>& image) {
    Tensor<T> out = image;
    for (auto& v : out.values()) v = (v - T(0.5)) * T(4);
    return out;
  }

  void check_input(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.channels() != 3) {
      throw ShapeError("backbone input must be 3xHxW, got " + shape_string(image.shape()));
    }
    const int need = cfg_.min_input_size();
    if (image.height() < need || image.width() < need) {
      throw ShapeError(detail::concat("image ", image.height(), "x", image.width(),
                                      " too small for backbone strides (minimum ", need, ")"));
    }
  }

  // Mid-level map: concatenation of the mid stages, deeper ones resized
  // (bilinear) to the shallowest mid stage's grid. High-level map: the
  // designated high stage.
  std::pair<FeatureMap<T>, FeatureMap<T>> extract_features(const Tensor<T>& image) const {
    check_input(image);
    NoGradGuard no_grad;
    auto outs = forward_stages(Var<T>::constant(image), cfg_.high_stage);
    const int first_mid = cfg_.mid_stages.front();
    const int mh = outs[static_cast<std::size_t>(first_mid)].value().height();
    const int mw = outs[static_cast<std::size_t>(first_mid)].value().width();
    std::vector<Var<T>> mids;
    for (int s : cfg_.mid_stages) {
      const auto& o = outs[static_cast<std::size_t>(s)];
      mids.push_back(o.value().height() == mh && o.value().width() == mw
                         ? o
                         : ops::resample(o, bilinear_resampler(o.value().height(), o.value().width(), mh, mw)));
    }
    FeatureMap<T> mid{ops::concat_channels(mids).value(), FeatureLevel::mid, cfg_.cumulative_stride(first_mid)};
    FeatureMap<T> high{outs.back().value(), FeatureLevel::high, cfg_.cumulative_stride(cfg_.high_stage)};
    return {std::move(mid), std::move(high)};
  }

  std::vector<std::pair<FeatureMap<T>, FeatureMap<T>>> extract_features_batch(std::span<const Tensor<T>> images) const {
    std::vector<std::pair<FeatureMap<T>, FeatureMap<T>>> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(extract_features(img));
    return out;
  }

  nn::NamedParameters<T> parameters() const {
    nn::NamedParameters<T> p;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t k = 0; k < stages_[s].size(); ++k) {
        nn::append_conv(p, detail::concat("stage", s, ".conv", k), stages_[s][k]);
      }
    }
    return p;
  }

  std::uint64_t checksum() const { return nn::checksum(parameters()); }

  // Configuration plus weights; two backbones with equal fingerprints compute
  // identical features.
  std::string fingerprint() const {
    return io::hex64(io::fnv1a(cfg_.describe(), checksum()));
  }

 private:
  BackboneConfig cfg_;
  std::vector<std::vector<nn::Conv2d<T>>> stages_;
};

// Soft support mask on a feature grid: area-average of the binary mask.
template <typename T>
Tensor<T> mask_on_grid(const Mask& mask, int h, int w) {
  return resize_area(mask_to_tensor<T>(mask), h, w);
}

// f' = f * y with y area-resized to the feature grid and broadcast over
// channels.
template <typename T>
FeatureMap<T> mask_features(const FeatureMap<T>& f, const Mask& mask) {
  if (mask.rank() != 3 || mask.channels() != 1) throw ShapeError("mask_features: mask must be 1xHxW");
  const auto expect = [&](int extent) { return (extent + f.stride - 1) / f.stride; };
  if (std::abs(expect(mask.height()) - f.height()) > 1 || std::abs(expect(mask.width()) - f.width()) > 1) {
    throw ShapeError(detail::concat("mask_features: mask ", mask.height(), "x", mask.width(), " does not match feature grid ",
                                    f.height(), "x", f.width(), " at stride ", f.stride));
  }
  const Tensor<T> m = mask_on_grid<T>(mask, f.height(), f.width());
  return mask_features(f, m);
}

// Variant taking a mask already on the feature grid (1 x h x w).
template <typename T>
FeatureMap<T> mask_features(const FeatureMap<T>& f, const Tensor<T>& grid_mask) {
  if (grid_mask.rank() != 3 || grid_mask.channels() != 1 || grid_mask.height() != f.height() ||
      grid_mask.width() != f.width()) {
    throw ShapeError(detail::concat("mask_features: mask grid ", shape_string(grid_mask.shape()), " vs features ",
                                    shape_string(f.data.shape())));
  }
  FeatureMap<T> out = f;
  const std::size_t np = f.data.plane();
  for (int c = 0; c < f.channels(); ++c) {
    T* dst = out.data.channel(c);
    for (std::size_t i = 0; i < np; ++i) dst[i] *= grid_mask[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Precomputed feature file (all integers little-endian):
//   bytes 0-3   magic "FMAP"
//   bytes 4-7   u32 version (1)
//   byte  8     level (0 = mid, 1 = high)
//   byte  9     dtype (1 = float32)
//   byte  10    byte order (0 = little-endian)
//   byte  11    reserved (0)
//   bytes 12-27 u32 c, h, w, stride
//   then c*h*w float32 values, row-major (channel, row, column)

inline std::string encode_feature_map(const FeatureMap<float>& f) {
  std::string out = "FMAP";
  io::put_u32(out, 1);
  io::put_u8(out, static_cast<std::uint8_t>(f.level));
  io::put_u8(out, 1);
  io::put_u8(out, 0);
  io::put_u8(out, 0);
  io::put_u32(out, static_cast<std::uint32_t>(f.channels()));
  io::put_u32(out, static_cast<std::uint32_t>(f.height()));
  io::put_u32(out, static_cast<std::uint32_t>(f.width()));
  io::put_u32(out, static_cast<std::uint32_t>(f.stride));
  for (float v : f.data.values()) io::put_f32(out, v);
  return out;
}

inline FeatureMap<float> decode_feature_map(const std::string& bytes, const std::string& what) {
  io::Reader r(bytes, what);
  if (r.raw(4) != "FMAP") throw IoError(what + ": bad feature-map magic");
  if (r.u32() != 1) throw IoError(what + ": unsupported feature-map version");
  const std::uint8_t level = r.u8();
  const std::uint8_t dtype = r.u8();
  const std::uint8_t order = r.u8();
  r.u8();
  if (level > 1) throw IoError(what + ": invalid level");
  if (dtype != 1) throw IoError(what + ": unsupported dtype");
  if (order != 0) throw IoError(what + ": unsupported byte order");
  const int c = static_cast<int>(r.u32());
  const int h = static_cast<int>(r.u32());
  const int w = static_cast<int>(r.u32());
  const int stride = static_cast<int>(r.u32());
  if (c < 1 || h < 1 || w < 1 || stride < 1) throw IoError(what + ": invalid dimensions");
  FeatureMap<float> f{Tensor<float>::chw(c, h, w), static_cast<FeatureLevel>(level), stride};
  for (auto& v : f.data.values()) v = r.f32();
  if (!r.at_end()) throw IoError(what + ": trailing bytes");
  if (!all_finite(f.data)) throw IoError(what + ": non-finite feature values");
  return f;
}

inline void save_feature_map(const std::filesystem::path& path, const FeatureMap<float>& f) {
  io::write_file(path, encode_feature_map(f));
}

inline FeatureMap<float> load_feature_map(const std::filesystem::path& path) {
  return decode_feature_map(io::read_file(path), path.string());
}

// Features for a sample, either from a backbone or from precomputed files at
// <root>/<class_id>/<sample_id>.mid.fmap and .high.fmap.
class PrecomputedFeatures {
 public:
  explicit PrecomputedFeatures(std::filesystem::path root) : root_(std::move(root)) {}

  std::pair<FeatureMap<float>, FeatureMap<float>> load(const Sample& s) const {
    const auto dir = root_ / std::to_string(s.class_id);
    auto mid = load_feature_map(dir / (std::to_string(s.sample_id) + ".mid.fmap"));
    auto high = load_feature_map(dir / (std::to_string(s.sample_id) + ".high.fmap"));
    if (mid.level != FeatureLevel::mid || high.level != FeatureLevel::high) {
      throw IoError("precomputed features for " + dir.string() + " have the wrong level tags");
    }
    return {std::move(mid), std::move(high)};
  }

  void store(const Sample& s, const std::pair<FeatureMap<float>, FeatureMap<float>>& f) const {
    const auto dir = root_ / std::to_string(s.class_id);
    save_feature_map(dir / (std::to_string(s.sample_id) + ".mid.fmap"), f.first);
    save_feature_map(dir / (std::to_string(s.sample_id) + ".high.fmap"), f.second);
  }

 private:
  std::filesystem::path root_;
};

// Backbone checkpoint: weights plus config and the classes seen in training.
template <typename T>
io::Container backbone_container(const Backbone<T>& b, const std::set<int>& seen_classes, const nlohmann::json& extra = {}) {
  io::Container c;
  const auto& cfg = b.config();
  c.meta["kind"] = "backbone";
  c.meta["config"] = {{"widths", cfg.widths},         {"strides", cfg.strides},
                      {"convs_per_stage", cfg.convs_per_stage}, {"mid_stages", cfg.mid_stages},
                      {"high_stage", cfg.high_stage}, {"frozen", cfg.frozen}};
  c.meta["seen_classes"] = seen_classes;
  c.meta["fingerprint"] = b.fingerprint();
  if (!extra.is_null()) c.meta["training"] = extra;
  nn::store(c, "", b.parameters());
  return c;
}

template <typename T>
Backbone<T> backbone_from_container(const io::Container& c) {
  if (c.meta.value("kind", "") != "backbone") throw IoError("container does not hold a backbone");
  BackboneConfig cfg;
  const auto& j = c.meta.at("config");
  cfg.widths = j.at("widths").get<std::vector<int>>();
  cfg.strides = j.at("strides").get<std::vector<int>>();
  cfg.convs_per_stage = j.at("convs_per_stage").get<int>();
  cfg.mid_stages = j.at("mid_stages").get<std::vector<int>>();
  cfg.high_stage = j.at("high_stage").get<int>();
  cfg.frozen = j.at("frozen").get<bool>();
  Backbone<T> b(cfg, 0);
  auto params = b.parameters();
  nn::restore(c, "", params);
  return b;
}

inline std::set<int> seen_classes(const io::Container& c) {
  return c.meta.at("seen_classes").get<std::set<int>>();
}

}  // namespace iterseg
