#pragma once

#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "iterseg/backbone.hpp"
#include "iterseg/evaluation.hpp"
#include "iterseg/fusion.hpp"
#include "iterseg/pretrain.hpp"
#include "iterseg/training.hpp"

namespace iterseg {

// Raised for any invalid configuration field; the message names the field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvalConfig {
  int episodes = 1000;
  int shots = 1;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string dataset_path;  // empty: <out>/data
  SynthConfig synthetic;
  int n_splits = 4;
  int split = 0;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  FusionConfig fusion;
  TrainConfig train;
  AugmentConfig augment;
  EvalConfig eval;
  std::string out_dir;  // empty: $ITERSEG_OUT/run or ./runs/run

  // Derived seeds, one stream per consumer.
  std::uint64_t data_seed() const { return derive_seed(seed, "data"); }
  std::uint64_t pretrain_seed() const { return derive_seed(seed, detail::concat("pretrain/split", split)); }
  std::uint64_t train_seed() const { return derive_seed(seed, detail::concat("train/split", split)); }
  std::uint64_t eval_seed() const { return derive_seed(seed, "eval"); }

  // Effective sub-configs with derived seeds and linked sizes filled in.
  SynthConfig synth_config() const {
    SynthConfig s = synthetic;
    s.seed = data_seed();
    return s;
  }
  PretrainConfig pretrain_config() const {
    PretrainConfig p = pretrain;
    p.seed = pretrain_seed();
    p.augment = augment;
    return p;
  }
  FusionConfig fusion_config() const {
    FusionConfig f = fusion;
    f.mid_channels = backbone.mid_channels();
    return f;
  }
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = train_seed();
    return t;
  }

  void validate() const;
};

namespace detail {

// Reads one JSON object, remembering its dotted path for error messages and
// rejecting keys it was not asked about.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  std::string where(const std::string& key) const {
    return path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
  }

  template <typename V>
  void read(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + " has the wrong type: " + j_.at(key).dump());
    }
  }

  std::optional<Section> section(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), where(key));
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config field " + where(k));
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& field, const std::string& constraint) {
  if (!ok) throw ConfigError(field + " " + constraint);
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  using detail::require;
  const auto sub = [](const std::string& prefix, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      // sub-config validators already name their field
      throw ConfigError(std::string(e.what()).rfind(prefix, 0) == 0 ? e.what() : prefix + ": " + e.what());
    }
  };
  sub("synthetic", [&] { synthetic.validate(); });
  require(n_splits >= 1, "splits.count", "must be >= 1");
  require(synthetic.n_classes % n_splits == 0, "splits.count",
          detail::concat("must divide synthetic.n_classes (", synthetic.n_classes, ")"));
  require(split >= 0 && split < n_splits, "splits.index", detail::concat("must be in [0, ", n_splits, ")"));
  sub("backbone", [&] { backbone.validate(); });
  require(synthetic.image_size >= backbone.min_input_size(), "synthetic.image_size",
          detail::concat("must be >= the backbone's total stride (", backbone.min_input_size(), ")"));
  sub("pretrain", [&] { pretrain.validate(); });
  sub("fusion", [&] { fusion_config().validate(); });
  sub("train", [&] { train.validate(); });
  require(augment.crop >= 0 && augment.crop <= synthetic.image_size, "augment.crop",
          "must be in [0, synthetic.image_size]");
  require(augment.crop == 0 || augment.crop >= backbone.min_input_size(), "augment.crop",
          "must be 0 or at least the backbone's total stride");
  require(augment.max_rotation_deg >= 0 && augment.max_rotation_deg <= 180, "augment.max_rotation_deg",
          "must be in [0, 180]");
  require(augment.flip_probability >= 0 && augment.flip_probability <= 1, "augment.flip_probability",
          "must be in [0, 1]");
  require(augment.max_retries >= 0, "augment.max_retries", "must be >= 0");
  require(eval.episodes >= 1, "eval.episodes", "must be >= 1");
  require(eval.shots >= 1, "eval.shots", "must be >= 1");
  require(eval.shots < synthetic.samples_per_class, "eval.shots", "must be < synthetic.samples_per_class");
  require(train.shots < synthetic.samples_per_class, "train.shots", "must be < synthetic.samples_per_class");
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  const auto& b = c.backbone;
  const auto& t = c.train;
  return {
      {"seed", c.seed},
      {"dataset", {{"path", c.dataset_path}}},
      {"synthetic",
       {{"n_classes", c.synthetic.n_classes},
        {"image_size", c.synthetic.image_size},
        {"samples_per_class", c.synthetic.samples_per_class},
        {"noise_level", c.synthetic.noise_level}}},
      {"splits", {{"count", c.n_splits}, {"index", c.split}}},
      {"backbone",
       {{"widths", b.widths},
        {"strides", b.strides},
        {"convs_per_stage", b.convs_per_stage},
        {"mid_stages", b.mid_stages},
        {"high_stage", b.high_stage}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"lr", c.pretrain.lr},
        {"momentum", c.pretrain.momentum},
        {"weight_decay", c.pretrain.weight_decay},
        {"holdout_fraction", c.pretrain.holdout_fraction}}},
      {"fusion", {{"width", c.fusion.width}, {"levels", c.fusion.levels}, {"scales", c.fusion.scales}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"episodes_per_epoch", t.episodes_per_epoch},
        {"shots", t.shots},
        {"base_lr", t.base_lr},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"poly_power", t.poly_power},
        {"detach_between_steps", t.detach_between_steps},
        {"warm_start", t.warm_start}}},
      {"cascade", cascade_config_json(t.cascade)},
      {"augment",
       {{"crop", c.augment.crop},
        {"max_rotation_deg", c.augment.max_rotation_deg},
        {"flip_probability", c.augment.flip_probability},
        {"max_retries", c.augment.max_retries}}},
      {"eval", {{"episodes", c.eval.episodes}, {"shots", c.eval.shots}}},
      {"out", c.out_dir},
  };
}

// Missing fields keep their defaults; unknown fields are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::Section root(j, "");
  root.read("seed", c.seed);
  root.read("out", c.out_dir);
  if (auto s = root.section("dataset")) {
    s->read("path", c.dataset_path);
    s->finish();
  }
  if (auto s = root.section("synthetic")) {
    s->read("n_classes", c.synthetic.n_classes);
    s->read("image_size", c.synthetic.image_size);
    s->read("samples_per_class", c.synthetic.samples_per_class);
    s->read("noise_level", c.synthetic.noise_level);
    s->finish();
  }
  if (auto s = root.section("splits")) {
    s->read("count", c.n_splits);
    s->read("index", c.split);
    s->finish();
  }
  if (auto s = root.section("backbone")) {
    s->read("widths", c.backbone.widths);
    s->read("strides", c.backbone.strides);
    s->read("convs_per_stage", c.backbone.convs_per_stage);
    s->read("mid_stages", c.backbone.mid_stages);
    s->read("high_stage", c.backbone.high_stage);
    s->finish();
  }
  if (auto s = root.section("pretrain")) {
    s->read("epochs", c.pretrain.epochs);
    s->read("batch_size", c.pretrain.batch_size);
    s->read("lr", c.pretrain.lr);
    s->read("momentum", c.pretrain.momentum);
    s->read("weight_decay", c.pretrain.weight_decay);
    s->read("holdout_fraction", c.pretrain.holdout_fraction);
    s->finish();
  }
  if (auto s = root.section("fusion")) {
    s->read("width", c.fusion.width);
    s->read("levels", c.fusion.levels);
    s->read("scales", c.fusion.scales);
    s->finish();
  }
  if (auto s = root.section("train")) {
    auto& t = c.train;
    s->read("epochs", t.epochs);
    s->read("batch_size", t.batch_size);
    s->read("episodes_per_epoch", t.episodes_per_epoch);
    s->read("shots", t.shots);
    s->read("base_lr", t.base_lr);
    s->read("momentum", t.momentum);
    s->read("weight_decay", t.weight_decay);
    s->read("poly_power", t.poly_power);
    s->read("detach_between_steps", t.detach_between_steps);
    s->read("warm_start", t.warm_start);
    s->finish();
  }
  if (auto s = root.section("cascade")) {
    auto& k = c.train.cascade;
    std::string weights = to_string(k.weight_mode), prior = to_string(k.prior_mode);
    s->read("steps", k.steps);
    s->read("weight_mode", weights);
    s->read("prior_mode", prior);
    s->read("threshold", k.threshold);
    s->finish();
    try {
      k.weight_mode = parse_weight_mode(weights);
      k.prior_mode = parse_prior_mode(prior);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (auto s = root.section("augment")) {
    s->read("crop", c.augment.crop);
    s->read("max_rotation_deg", c.augment.max_rotation_deg);
    s->read("flip_probability", c.augment.flip_probability);
    s->read("max_retries", c.augment.max_retries);
    s->finish();
  }
  if (auto s = root.section("eval")) {
    s->read("episodes", c.eval.episodes);
    s->read("shots", c.eval.shots);
    s->finish();
  }
  root.finish();
  c.validate();
  return c;
}

// JSON with // and /* */ comments allowed.
inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse_config(text);
}

inline std::string format_config(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

}  // namespace iterseg
