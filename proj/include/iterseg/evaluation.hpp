#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "iterseg/pipeline.hpp"
#include "iterseg/refine.hpp"

namespace iterseg {

// |pred & gt| / |pred | gt|; two empty masks score 1.
inline double iou(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt)) {
    throw ShapeError("iou: resolution mismatch " + shape_string(pred.shape()) + " vs " + shape_string(gt.shape()));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct OverlapCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;

  void add(const Mask& pred, const Mask& gt) {
    if (!pred.same_shape(gt)) throw ShapeError("overlap counts: resolution mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool a = pred[i] != 0, b = gt[i] != 0;
      intersection += a && b;
      union_ += a || b;
    }
  }
  void merge(const OverlapCounts& o) {
    intersection += o.intersection;
    union_ += o.union_;
  }
  double iou() const { return union_ == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(union_); }
};

struct EvalReport {
  std::map<int, double> class_iou;
  std::map<int, OverlapCounts> class_counts;
  std::map<int, int> class_episodes;
  double miou = 0;
  int n_episodes = 0;
  int shots = 1;
  int split_index = 0;
  std::uint64_t seed = 0;
  CascadeConfig cascade;
  std::string checkpoint_fingerprint;
  std::vector<std::string> warnings;

  // Changes whenever the checkpoint, seed, or configuration changes.
  std::string fingerprint() const {
    std::uint64_t h = io::fnv1a(checkpoint_fingerprint);
    h = io::fnv1a(detail::concat("seed=", seed, ";", cascade.describe(), ";shots=", shots, ";episodes=", n_episodes,
                                 ";split=", split_index),
                  h);
    return io::hex64(h);
  }

  nlohmann::json to_json() const {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [c, v] : class_iou) {
      per_class[std::to_string(c)] = {{"iou", v},
                                      {"intersection", class_counts.at(c).intersection},
                                      {"union", class_counts.at(c).union_},
                                      {"episodes", class_episodes.at(c)}};
    }
    return {{"miou", miou},
            {"per_class", per_class},
            {"n_episodes", n_episodes},
            {"shots", shots},
            {"split", split_index},
            {"seed", seed},
            {"cascade", cascade_config_json(cascade)},
            {"checkpoint_fingerprint", checkpoint_fingerprint},
            {"report_fingerprint", fingerprint()},
            {"warnings", warnings}};
  }
};

// Maps an episode to a full-resolution binary prediction for its query.
using Predictor = std::function<Mask(const Episode&)>;

template <typename T>
Predictor cascade_predictor(FeatureExtractor<T> extract, std::span<const FusionNet<T>> nets, CascadeConfig cfg) {
  return [extract = std::move(extract), nets, cfg](const Episode& ep) {
    const PreparedEpisode<T> p = prepare_episode(extract, ep);
    return run_cascade<T, FusionNet<T>>(nets, p, cfg).final_mask_full;
  };
}

// Episodes drawn for evaluation; identical for every model given the seed.
inline std::vector<Episode> draw_eval_episodes(const Dataset& data, const SplitPlan& split, int n_episodes, int shots,
                                               std::uint64_t seed, std::vector<std::string>* warnings = nullptr) {
  std::vector<int> usable;
  for (int c : split.test_classes) {
    if (data.indices_of(c).size() >= static_cast<std::size_t>(shots) + 1) {
      usable.push_back(c);
    } else if (warnings) {
      warnings->push_back(detail::concat("class ", c, " has ", data.indices_of(c).size(),
                                         " samples, too few for a ", shots, "-shot episode; excluded"));
    }
  }
  if (usable.empty()) throw std::invalid_argument("no test class has enough samples for evaluation");
  Rng rng(derive_seed(seed, detail::concat("eval/split", split.split_index, "/shots", shots)));
  std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
  std::vector<Episode> eps;
  for (int i = 0; i < n_episodes; ++i) eps.push_back(sample_episode(data, usable[pick(rng)], shots, rng));
  return eps;
}

// Accumulates per-class intersection and union over episodes, then averages
// the per-class IoUs (foreground only).
inline EvalReport evaluate_split(const Predictor& predict, const Dataset& data, const SplitPlan& split, int n_episodes,
                                 int shots, std::uint64_t seed, std::vector<Mask>* predictions = nullptr) {
  if (n_episodes < 1) throw std::invalid_argument("evaluation needs at least one episode");
  EvalReport r;
  r.n_episodes = n_episodes;
  r.shots = shots;
  r.seed = seed;
  r.split_index = split.split_index;
  const auto episodes = draw_eval_episodes(data, split, n_episodes, shots, seed, &r.warnings);
  for (const Episode& ep : episodes) {
    Mask pred = predict(ep);
    r.class_counts[ep.class_id].add(pred, ep.query.mask);
    ++r.class_episodes[ep.class_id];
    if (predictions) predictions->push_back(std::move(pred));
  }
  for (int c : split.test_classes) {
    if (!r.class_counts.count(c)) {
      r.warnings.push_back(detail::concat("class ", c, " received no episodes; excluded from mIoU"));
    }
  }
  double total = 0;
  for (const auto& [c, counts] : r.class_counts) {
    r.class_iou[c] = counts.iou();
    total += r.class_iou[c];
  }
  r.miou = total / static_cast<double>(r.class_counts.size());
  return r;
}

// ---------------------------------------------------------------------------
// Ablation tables

struct AblationVariant {
  std::string label;
  CascadeConfig cascade;
};

struct AblationRow {
  AblationVariant variant;
  std::vector<std::optional<double>> per_seed;  // mIoU in [0,1]; nullopt = missing checkpoint

  std::vector<double> present() const {
    std::vector<double> v;
    for (const auto& x : per_seed) {
      if (x) v.push_back(*x);
    }
    return v;
  }
  std::optional<double> mean() const {
    const auto v = present();
    if (v.empty()) return std::nullopt;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
  std::optional<double> stddev() const {
    const auto v = present();
    const auto m = mean();
    if (!m) return std::nullopt;
    double s = 0;
    for (double x : v) s += (x - *m) * (x - *m);
    return v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
  }
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
};

// Runs `cell(variant, seed)` for the whole grid. A missing result (e.g. an
// absent checkpoint) is recorded and the run continues.
inline AblationTable run_ablation_table(
    const std::vector<AblationVariant>& variants, const std::vector<std::uint64_t>& seeds,
    const std::function<std::optional<double>(const AblationVariant&, std::uint64_t)>& cell) {
  AblationTable t;
  t.seeds = seeds;
  for (const auto& v : variants) {
    AblationRow row{v, {}};
    for (auto s : seeds) row.per_seed.push_back(cell(v, s));
    t.rows.push_back(std::move(row));
  }
  return t;
}

namespace detail {

inline std::string percent(std::optional<double> v) {
  if (!v) return "absent";
  std::ostringstream oss;
  oss << std::fixed << std::setprecision(1) << std::clamp(*v * 100.0, 0.0, 100.0);
  return oss.str();
}

inline std::string aligned(const std::vector<std::vector<std::string>>& cells) {
  std::vector<std::size_t> widths;
  for (const auto& row : cells) {
    widths.resize(std::max(widths.size(), row.size()), 0);
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
  }
  std::ostringstream oss;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      oss << (i ? " | " : "") << std::left << std::setw(static_cast<int>(widths[i])) << cells[r][i];
    }
    oss << '\n';
    if (r == 0) {
      for (std::size_t i = 0; i < widths.size(); ++i) oss << (i ? "-+-" : "") << std::string(widths[i], '-');
      oss << '\n';
    }
  }
  return oss.str();
}

}  // namespace detail

// One row per variant: mean +/- std of mIoU (percent) and the per-seed cells.
inline std::string format_ablation_table(const AblationTable& t) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"variant", "T", "weights", "input", "mIoU"};
  for (auto s : t.seeds) header.push_back(detail::concat("seed ", s));
  cells.push_back(header);
  for (const auto& row : t.rows) {
    const auto m = row.mean();
    const auto sd = row.stddev();
    std::vector<std::string> line{row.variant.label, std::to_string(row.variant.cascade.steps),
                                  to_string(row.variant.cascade.weight_mode), to_string(row.variant.cascade.prior_mode),
                                  m ? detail::percent(m) + " +/- " + detail::percent(sd) : "absent"};
    for (const auto& v : row.per_seed) line.push_back(detail::percent(v));
    cells.push_back(std::move(line));
  }
  return detail::aligned(cells);
}

// Refinement-count grid: rows T, columns identical / different weights.
inline std::string format_refinement_grid(const AblationTable& t) {
  std::map<int, std::map<WeightMode, std::optional<double>>> grid;
  for (const auto& row : t.rows) grid[row.variant.cascade.steps][row.variant.cascade.weight_mode] = row.mean();
  std::vector<std::vector<std::string>> cells{{"# of refinements", "Identical", "Different"}};
  for (const auto& [steps, cols] : grid) {
    const auto get = [&](WeightMode m) {
      auto it = cols.find(m);
      return it == cols.end() ? std::string("-") : detail::percent(it->second);
    };
    cells.push_back({std::to_string(steps), get(WeightMode::identical), get(WeightMode::different)});
  }
  return detail::aligned(cells);
}

// ---------------------------------------------------------------------------
// Qualitative panels

enum class PanelColumn { support, query_gt, baseline, prior, augmented, final_mask };

inline std::vector<PanelColumn> all_panel_columns() {
  return {PanelColumn::support, PanelColumn::query_gt, PanelColumn::baseline,
          PanelColumn::prior,   PanelColumn::augmented, PanelColumn::final_mask};
}

// Columns named a-f.
inline std::vector<PanelColumn> parse_panel_columns(const std::string& text) {
  std::vector<PanelColumn> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.size() != 1 || item[0] < 'a' || item[0] > 'f') {
      throw std::invalid_argument("panel columns must be letters a-f, got \"" + item + "\"");
    }
    out.push_back(static_cast<PanelColumn>(item[0] - 'a'));
  }
  if (out.empty()) throw std::invalid_argument("no panel columns selected");
  return out;
}

inline constexpr std::array<std::uint8_t, 3> kOutlineColor{255, 0, 255};

// Foreground pixels with a 4-neighbour outside the foreground (or outside
// the image).
inline Mask mask_boundary(const Mask& m) {
  Mask b(m.shape());
  const int h = m.height(), w = m.width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!m(0, y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1 || !m(0, y - 1, x) || !m(0, y + 1, x) ||
                        !m(0, y, x - 1) || !m(0, y, x + 1);
      b(0, y, x) = edge ? 1 : 0;
    }
  }
  return b;
}

namespace detail {

using Tile = Tensor<std::uint8_t>;  // 3 x h x w

inline Tile image_tile(const Tensor<float>& img, int h, int w) {
  return io::quantize(resize_nearest(img, h, w));
}

inline Tile mask_tile(const Mask& m, int h, int w) {
  const Mask r = resize_nearest(m, h, w);
  Tile t = Tile::chw(3, h, w);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < r.plane(); ++i) t.channel(c)[i] = r[i] ? 255 : 0;
  }
  return t;
}

template <typename T>
Tile heat_tile(const ProbMap<T>& p, int h, int w) {
  const Tensor<T> r = resize_nearest(p.data, h, w);
  Tile t = Tile::chw(3, h, w);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < r.plane(); ++i) t.channel(c)[i] = io::to_byte(static_cast<double>(r[i]));
  }
  return t;
}

}  // namespace detail

inline Tensor<std::uint8_t> query_with_outline(const Sample& query) {
  auto tile = io::quantize(query.image);
  const Mask b = mask_boundary(query.mask);
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!b[i]) continue;
    for (int c = 0; c < 3; ++c) tile.channel(c)[i] = kOutlineColor[static_cast<std::size_t>(c)];
  }
  return tile;
}

// One row: support (foreground tinted), query with gt outline, first-step
// (T=1) mask, prior heatmap, augmented-prior heatmap, final mask.
template <typename T>
Tensor<std::uint8_t> render_panel_image(const Episode& ep, const CascadeTrace<T>& trace,
                                        const std::vector<PanelColumn>& columns, double threshold = 0.5) {
  const int h = ep.query.height(), w = ep.query.width();
  std::vector<detail::Tile> tiles;
  for (PanelColumn col : columns) {
    switch (col) {
      case PanelColumn::support: {
        const Sample& s = ep.support.front();
        Tensor<float> img = s.image;
        for (std::size_t i = 0; i < s.mask.size(); ++i) {
          if (!s.mask[i]) continue;
          img.channel(0)[i] = 0.5f * img.channel(0)[i] + 0.5f;
          img.channel(1)[i] = 0.5f * img.channel(1)[i];
          img.channel(2)[i] = 0.5f * img.channel(2)[i];
        }
        tiles.push_back(detail::image_tile(img, h, w));
        break;
      }
      case PanelColumn::query_gt:
        tiles.push_back(query_with_outline(ep.query));
        break;
      case PanelColumn::baseline:
        tiles.push_back(detail::mask_tile(binarize(trace.estimates.front(), threshold, h, w), h, w));
        break;
      case PanelColumn::prior:
        tiles.push_back(detail::heat_tile(trace.prior, h, w));
        break;
      case PanelColumn::augmented: {
        const std::size_t idx = trace.augmented.size() >= 2 ? trace.augmented.size() - 2 : 0;
        tiles.push_back(detail::heat_tile(trace.augmented[idx], h, w));
        break;
      }
      case PanelColumn::final_mask:
        tiles.push_back(detail::mask_tile(trace.final_mask_full, h, w));
        break;
    }
  }
  Tensor<std::uint8_t> panel = Tensor<std::uint8_t>::chw(3, h, w * static_cast<int>(tiles.size()));
  for (std::size_t k = 0; k < tiles.size(); ++k) {
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) panel(c, y, static_cast<int>(k) * w + x) = tiles[k](c, y, x);
      }
    }
  }
  return panel;
}

template <typename T>
void render_panel(const Episode& ep, const CascadeTrace<T>& trace, const std::filesystem::path& out_path,
                  const std::vector<PanelColumn>& columns = all_panel_columns(), double threshold = 0.5) {
  try {
    io::write_file(out_path, io::encode_ppm(render_panel_image(ep, trace, columns, threshold)));
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError("cannot write panel " + out_path.string() + ": " + e.what());
  }
}

}  // namespace iterseg
