#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "iterseg/io.hpp"
#include "iterseg/tensor.hpp"

namespace iterseg {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a root seed and a stream label.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  std::uint64_t z = root ^ io::fnv1a(stream);
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct Sample {
  Tensor<float> image;  // 3 x H x W in [0,1]
  Mask mask;            // 1 x H x W in {0,1}
  int class_id = 0;
  int sample_id = 0;

  int height() const { return image.height(); }
  int width() const { return image.width(); }
};

inline void validate_sample(const Sample& s) {
  if (s.image.rank() != 3 || s.image.channels() != 3) throw ShapeError("sample image must be 3xHxW");
  if (s.mask.rank() != 3 || s.mask.channels() != 1 || s.mask.height() != s.image.height() ||
      s.mask.width() != s.image.width()) {
    throw ShapeError("sample mask must be 1xHxW matching the image");
  }
  for (auto v : s.mask.values()) {
    if (v > 1) throw ShapeError("sample mask must contain only {0,1}");
  }
  if (foreground_count(s.mask) == 0) {
    throw ShapeError(detail::concat("sample ", s.class_id, "/", s.sample_id, " has an empty mask"));
  }
}

struct Episode {
  std::vector<Sample> support;
  Sample query;
  int class_id = 0;

  int shots() const { return static_cast<int>(support.size()); }
};

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<Sample> samples) : samples_(std::move(samples)) { reindex(); }

  void add(Sample s) {
    samples_.push_back(std::move(s));
    by_class_[samples_.back().class_id].push_back(samples_.size() - 1);
  }

  const std::vector<Sample>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }

  std::vector<int> class_ids() const {
    std::vector<int> ids;
    for (const auto& [c, _] : by_class_) ids.push_back(c);
    return ids;
  }

  const std::vector<std::size_t>& indices_of(int class_id) const {
    static const std::vector<std::size_t> none;
    auto it = by_class_.find(class_id);
    return it == by_class_.end() ? none : it->second;
  }

 private:
  void reindex() {
    by_class_.clear();
    for (std::size_t i = 0; i < samples_.size(); ++i) by_class_[samples_[i].class_id].push_back(i);
  }

  std::vector<Sample> samples_;
  std::map<int, std::vector<std::size_t>> by_class_;
};

// ---------------------------------------------------------------------------
// Class splits

struct SplitPlan {
  std::set<int> train_classes;
  std::set<int> test_classes;
  int split_index = 0;
};

// Split i tests on the i-th contiguous block of the ordered class list and
// trains on everything else.
inline std::vector<SplitPlan> make_splits(const std::vector<int>& class_ids, int n_splits) {
  const int n = static_cast<int>(class_ids.size());
  if (n_splits < 1 || n % n_splits != 0) {
    throw std::invalid_argument(detail::concat("cannot divide ", n, " classes into ", n_splits, " equal splits"));
  }
  if (std::set<int>(class_ids.begin(), class_ids.end()).size() != class_ids.size()) {
    throw std::invalid_argument("class ids must be unique");
  }
  const int per = n / n_splits;
  std::vector<SplitPlan> plans(static_cast<std::size_t>(n_splits));
  for (int s = 0; s < n_splits; ++s) {
    plans[s].split_index = s;
    for (int i = 0; i < n; ++i) {
      (i / per == s ? plans[s].test_classes : plans[s].train_classes).insert(class_ids[i]);
    }
  }
  return plans;
}

// Split file: "# iterseg splits v1" then, per split, a "[split N]" line
// followed by its test class ids, one per line.
inline std::string format_split_file(const std::vector<SplitPlan>& plans) {
  std::string out = "# iterseg splits v1\n";
  for (const auto& p : plans) {
    out += "[split " + std::to_string(p.split_index) + "]\n";
    for (int c : p.test_classes) out += std::to_string(c) + "\n";
  }
  return out;
}

inline std::vector<SplitPlan> parse_split_file(const std::string& text) {
  std::vector<std::set<int>> tests;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("[split ", 0) == 0) {
      const int idx = std::stoi(line.substr(7));
      if (idx != static_cast<int>(tests.size())) {
        throw IoError(detail::concat("split file line ", lineno, ": expected split ", tests.size()));
      }
      tests.emplace_back();
      continue;
    }
    if (tests.empty()) throw IoError(detail::concat("split file line ", lineno, ": class id before any split header"));
    try {
      tests.back().insert(std::stoi(line));
    } catch (const std::exception&) {
      throw IoError(detail::concat("split file line ", lineno, ": not a class id: ", line));
    }
  }
  std::set<int> all;
  for (const auto& t : tests) {
    for (int c : t) {
      if (!all.insert(c).second) throw IoError(detail::concat("split file: class ", c, " appears in two splits"));
    }
  }
  std::vector<SplitPlan> plans;
  for (std::size_t i = 0; i < tests.size(); ++i) {
    SplitPlan p;
    p.split_index = static_cast<int>(i);
    p.test_classes = tests[i];
    for (int c : all) {
      if (!tests[i].count(c)) p.train_classes.insert(c);
    }
    plans.push_back(std::move(p));
  }
  return plans;
}

// ---------------------------------------------------------------------------
// Episode sampling

class InsufficientSamples : public std::runtime_error {
 public:
  InsufficientSamples(int class_id, std::size_t available, int needed)
      : std::runtime_error(detail::concat("class ", class_id, " has ", available, " samples, episode needs ", needed)),
        class_id(class_id),
        available(available) {}
  int class_id;
  std::size_t available;
};

// K distinct supports plus a query distinct from all of them.
inline Episode sample_episode(const Dataset& data, int class_id, int shots, Rng& rng) {
  if (shots < 1) throw std::invalid_argument("episode needs at least one support sample");
  const auto& pool = data.indices_of(class_id);
  if (pool.size() < static_cast<std::size_t>(shots) + 1) throw InsufficientSamples(class_id, pool.size(), shots + 1);
  std::vector<std::size_t> picks(pool.begin(), pool.end());
  for (int i = 0; i <= shots; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), picks.size() - 1);
    std::swap(picks[static_cast<std::size_t>(i)], picks[pick(rng)]);
  }
  Episode e;
  e.class_id = class_id;
  e.query = data[picks[0]];
  for (int i = 1; i <= shots; ++i) e.support.push_back(data[picks[static_cast<std::size_t>(i)]]);
  return e;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

struct SynthConfig {
  int n_classes = 12;
  int image_size = 64;
  int samples_per_class = 20;
  double noise_level = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 4) throw std::invalid_argument("synthetic.n_classes must be >= 4");
    if (image_size < 32) throw std::invalid_argument("synthetic.image_size must be >= 32");
    if (samples_per_class < 2) throw std::invalid_argument("synthetic.samples_per_class must be >= 2");
    if (!(noise_level >= 0.0 && noise_level <= 1.0)) throw std::invalid_argument("synthetic.noise_level must be in [0,1]");
  }
};

enum class ShapeFamily { triangle, square, disc, star, cross, ring, crescent, hexagon };
inline constexpr int kShapeFamilies = 6;  // families used by the default class layout
inline constexpr int kAllShapeFamilies = 8;

struct ClassAppearance {
  ShapeFamily family;
  std::array<float, 3> color;
  double stripe_angle;  // radians
  double stripe_period;  // pixels
};

inline const std::array<std::array<float, 3>, 6>& palette() {
  static const std::array<std::array<float, 3>, 6> colors{{{0.85f, 0.20f, 0.20f},
                                                           {0.20f, 0.75f, 0.30f},
                                                           {0.20f, 0.35f, 0.85f},
                                                           {0.90f, 0.80f, 0.20f},
                                                           {0.80f, 0.30f, 0.80f},
                                                           {0.20f, 0.80f, 0.80f}}};
  return colors;
}

// Each shape family appears with several colours and each colour with several
// families; the stripe texture orientation is unique per class.
inline ClassAppearance class_appearance(int class_id, int n_classes) {
  const int families = n_classes > 2 * kShapeFamilies * 3 ? kAllShapeFamilies : kShapeFamilies;
  ClassAppearance a;
  a.family = static_cast<ShapeFamily>(class_id % families);
  a.color = palette()[static_cast<std::size_t>((class_id + class_id / families) % 6)];
  a.stripe_angle = std::numbers::pi * class_id / n_classes;
  a.stripe_period = 4.0 + 2.0 * (class_id % 3);
  return a;
}

namespace detail {

inline double polygon_radius(double phi, int sides) {
  const double sector = 2.0 * std::numbers::pi / sides;
  const double local = std::fmod(phi + 4.0 * std::numbers::pi, sector) - sector / 2.0;
  return std::cos(sector / 2.0) / std::cos(local);
}

// Inside test in the shape's unit frame (radius 1 ~ object scale).
inline bool inside_shape(ShapeFamily f, double u, double v) {
  const double rho = std::hypot(u, v);
  const double phi = std::atan2(v, u);
  switch (f) {
    case ShapeFamily::triangle:
      return rho <= polygon_radius(phi, 3);
    case ShapeFamily::square:
      return rho <= polygon_radius(phi, 4);
    case ShapeFamily::hexagon:
      return rho <= polygon_radius(phi, 6);
    case ShapeFamily::disc:
      return rho <= 0.9;
    case ShapeFamily::star: {
      const double sector = 2.0 * std::numbers::pi / 5.0;
      const double t = std::abs(std::fmod(phi + 4.0 * std::numbers::pi, sector) / sector - 0.5) * 2.0;
      return rho <= 0.42 + (1.0 - 0.42) * t;
    }
    case ShapeFamily::cross:
      return (std::abs(u) <= 0.32 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.32 && std::abs(u) <= 1.0);
    case ShapeFamily::ring:
      return rho <= 1.0 && rho >= 0.55;
    case ShapeFamily::crescent:
      return rho <= 1.0 && std::hypot(u - 0.45, v) > 0.75;
  }
  return false;
}

}  // namespace detail

// One sample of the given class; deterministic in (cfg, class_id, sample_id).
inline Sample generate_synthetic_sample(const SynthConfig& cfg, int class_id, int sample_id) {
  Rng rng(derive_seed(cfg.seed, detail::concat("synth/", class_id, "/", sample_id)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = cfg.image_size;
  const ClassAppearance look = class_appearance(class_id, cfg.n_classes);

  Sample s;
  s.class_id = class_id;
  s.sample_id = sample_id;
  s.image = Tensor<float>::chw(3, n, n);
  s.mask = Mask::chw(1, n, n);

  // Background: random base colour with two random gratings.
  std::array<double, 3> base{};
  for (auto& b : base) b = 0.25 + 0.5 * unit(rng);
  struct Grating {
    double kx, ky, phase, amp;
    std::array<double, 3> tint;
  };
  std::array<Grating, 2> gratings{};
  for (auto& g : gratings) {
    const double angle = unit(rng) * std::numbers::pi;
    const double freq = 2.0 * std::numbers::pi / (6.0 + 14.0 * unit(rng));
    g = {freq * std::cos(angle), freq * std::sin(angle), unit(rng) * 2.0 * std::numbers::pi, 0.08 + 0.1 * unit(rng),
         {unit(rng), unit(rng), unit(rng)}};
  }

  // Distractor blob (never part of the mask).
  const bool distractor = unit(rng) < 0.5;
  const double dx = n * (0.2 + 0.6 * unit(rng));
  const double dy = n * (0.2 + 0.6 * unit(rng));
  const double da = n * (0.08 + 0.1 * unit(rng));
  const double db = n * (0.08 + 0.1 * unit(rng));
  const std::array<double, 3> dcol{unit(rng), unit(rng), unit(rng)};

  // Object pose.
  const double radius = n * (0.18 + 0.14 * unit(rng));
  const double cx = radius + (n - 2.0 * radius) * unit(rng);
  const double cy = radius + (n - 2.0 * radius) * unit(rng);
  const double theta = unit(rng) * 2.0 * std::numbers::pi;
  const double ct = std::cos(theta), st = std::sin(theta);

  const double kx = 2.0 * std::numbers::pi / look.stripe_period * std::cos(look.stripe_angle);
  const double ky = 2.0 * std::numbers::pi / look.stripe_period * std::sin(look.stripe_angle);

  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double u = ((px - cx) * ct + (py - cy) * st) / radius;
      const double v = (-(px - cx) * st + (py - cy) * ct) / radius;
      const bool fg = detail::inside_shape(look.family, u, v);
      const double stripe = std::sin(kx * px + ky * py);
      const double noise = gauss(rng);
      if (fg) {
        s.mask(0, y, x) = 1;
        for (int c = 0; c < 3; ++c) {
          const double val = look.color[c] + cfg.noise_level * (0.6 * stripe + 0.4 * noise);
          s.image(c, y, x) = cfg.noise_level == 0.0 ? look.color[c] : static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
        continue;
      }
      const bool in_blob = distractor && std::pow((px - dx) / da, 2) + std::pow((py - dy) / db, 2) <= 1.0;
      for (int c = 0; c < 3; ++c) {
        double val = in_blob ? dcol[c] : base[c];
        if (!in_blob) {
          for (const auto& g : gratings) val += g.amp * (2.0 * g.tint[c] - 1.0) * std::sin(g.kx * px + g.ky * py + g.phase);
        }
        val += cfg.noise_level * 0.4 * noise;
        s.image(c, y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return s;
}

inline Dataset generate_synthetic_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Dataset d;
  for (int c = 0; c < cfg.n_classes; ++c) {
    for (int i = 0; i < cfg.samples_per_class; ++i) d.add(generate_synthetic_sample(cfg, c, i));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  int crop = 0;  // output side length; 0 keeps the input size
  double max_rotation_deg = 10.0;
  double flip_probability = 0.5;
  int max_retries = 10;
};

inline Sample hflip(const Sample& s) {
  Sample out = s;
  const int w = s.width();
  for (int y = 0; y < s.height(); ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) out.image(c, y, x) = s.image(c, y, w - 1 - x);
      out.mask(0, y, x) = s.mask(0, y, w - 1 - x);
    }
  }
  return out;
}

// Rotation about the image centre: bilinear (edge-clamped) for the image,
// nearest (zero outside) for the mask.
inline Sample rotate(const Sample& s, double degrees) {
  if (degrees == 0.0) return s;
  Sample out = s;
  const int h = s.height(), w = s.width();
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad), sn = std::sin(rad);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double sx = c * (x - cx) + sn * (y - cy) + cx;
      const double sy = -sn * (x - cx) + c * (y - cy) + cy;
      const int nx = static_cast<int>(std::lround(sx));
      const int ny = static_cast<int>(std::lround(sy));
      out.mask(0, y, x) = (nx >= 0 && nx < w && ny >= 0 && ny < h) ? s.mask(0, ny, nx) : 0;
      const double fx = std::clamp(sx, 0.0, w - 1.0);
      const double fy = std::clamp(sy, 0.0, h - 1.0);
      const int x0 = std::min(static_cast<int>(fx), w - 1), y0 = std::min(static_cast<int>(fy), h - 1);
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double ax = fx - x0, ay = fy - y0;
      for (int ch = 0; ch < 3; ++ch) {
        const double top = (1 - ax) * s.image(ch, y0, x0) + ax * s.image(ch, y0, x1);
        const double bot = (1 - ax) * s.image(ch, y1, x0) + ax * s.image(ch, y1, x1);
        out.image(ch, y, x) = static_cast<float>((1 - ay) * top + ay * bot);
      }
    }
  }
  return out;
}

inline Sample crop(const Sample& s, int top, int left, int size) {
  if (size > s.height() || size > s.width()) {
    throw std::invalid_argument(detail::concat("crop ", size, " larger than image ", s.height(), "x", s.width()));
  }
  if (top < 0 || left < 0 || top + size > s.height() || left + size > s.width()) {
    throw std::invalid_argument("crop window outside the image");
  }
  Sample out;
  out.class_id = s.class_id;
  out.sample_id = s.sample_id;
  out.image = Tensor<float>::chw(3, size, size);
  out.mask = Mask::chw(1, size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) out.image(c, y, x) = s.image(c, top + y, left + x);
      out.mask(0, y, x) = s.mask(0, top + y, left + x);
    }
  }
  return out;
}

// Random flip, rotation and crop applied identically to image and mask. If a
// draw empties the mask it is redrawn; after max_retries the transform falls
// back to identity with a crop window that keeps a foreground pixel.
inline Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  const int size = cfg.crop > 0 ? cfg.crop : std::min(s.height(), s.width());
  if (size > s.height() || size > s.width()) {
    throw std::invalid_argument(detail::concat("crop ", size, " larger than image ", s.height(), "x", s.width()));
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    Sample t = unit(rng) < cfg.flip_probability ? hflip(s) : s;
    const double deg = (2.0 * unit(rng) - 1.0) * cfg.max_rotation_deg;
    t = rotate(t, deg);
    std::uniform_int_distribution<int> top(0, s.height() - size);
    std::uniform_int_distribution<int> left(0, s.width() - size);
    const int ty = top(rng);
    const int tx = left(rng);
    Sample out = crop(t, ty, tx, size);
    if (foreground_count(out.mask) > 0) return out;
  }
  // Identity fallback: centre the window on the first foreground pixel.
  for (int y = 0; y < s.height(); ++y) {
    for (int x = 0; x < s.width(); ++x) {
      if (s.mask(0, y, x)) {
        const int ty = std::clamp(y - size / 2, 0, s.height() - size);
        const int tx = std::clamp(x - size / 2, 0, s.width() - size);
        return crop(s, ty, tx, size);
      }
    }
  }
  throw ShapeError("augment: sample has an empty mask");
}

// ---------------------------------------------------------------------------
// On-disk layout: <root>/<class_id>/<sample_id>.img (binary PPM) and
// <sample_id>.mask (binary PGM, 0 = background, 255 = foreground).

inline void save_sample(const std::filesystem::path& root, const Sample& s) {
  const auto dir = root / std::to_string(s.class_id);
  io::write_file(dir / (std::to_string(s.sample_id) + ".img"), io::encode_ppm(io::quantize(s.image)));
  Tensor<std::uint8_t> m(s.mask.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = s.mask[i] ? 255 : 0;
  io::write_file(dir / (std::to_string(s.sample_id) + ".mask"), io::encode_pgm(m));
}

inline void save_dataset(const std::filesystem::path& root, const Dataset& d) {
  for (const auto& s : d.samples()) save_sample(root, s);
}

inline Sample load_sample(const std::filesystem::path& img_path, const std::filesystem::path& mask_path, int class_id,
                          int sample_id) {
  Sample s;
  s.class_id = class_id;
  s.sample_id = sample_id;
  auto img = io::decode_pnm(io::read_file(img_path), img_path.string());
  if (img.channels() == 1) {
    Tensor<std::uint8_t> rgb = Tensor<std::uint8_t>::chw(3, img.height(), img.width());
    for (int c = 0; c < 3; ++c) std::copy(img.channel(0), img.channel(0) + img.plane(), rgb.channel(c));
    img = std::move(rgb);
  }
  s.image = io::dequantize(img);
  auto raw = io::decode_pnm(io::read_file(mask_path), mask_path.string());
  if (raw.channels() != 1) throw IoError(mask_path.string() + ": mask must be single-channel");
  s.mask = Mask(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] != 0 && raw[i] != 255) throw IoError(mask_path.string() + ": mask values must be 0 or 255");
    s.mask[i] = raw[i] ? 1 : 0;
  }
  validate_sample(s);
  return s;
}

// Loads every <class>/<sample>.img with a matching .mask, ordered by
// (class id, sample id).
inline Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
  std::map<std::pair<int, int>, fs::path> found;
  for (const auto& cls : fs::directory_iterator(root)) {
    if (!cls.is_directory()) continue;
    int class_id;
    try {
      std::size_t used = 0;
      class_id = std::stoi(cls.path().filename().string(), &used);
      if (used != cls.path().filename().string().size()) continue;
    } catch (const std::exception&) {
      continue;
    }
    for (const auto& f : fs::directory_iterator(cls.path())) {
      if (f.path().extension() != ".img") continue;
      found[{class_id, std::stoi(f.path().stem().string())}] = f.path();
    }
  }
  Dataset d;
  for (const auto& [key, img] : found) {
    auto mask = img;
    mask.replace_extension(".mask");
    if (!fs::exists(mask)) throw IoError("missing mask for " + img.string());
    d.add(load_sample(img, mask, key.first, key.second));
  }
  return d;
}

}  // namespace iterseg
