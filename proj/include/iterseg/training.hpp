#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iterseg/pipeline.hpp"
#include "iterseg/refine.hpp"

namespace iterseg {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 4;
  int episodes_per_epoch = 160;
  int shots = 1;
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  bool detach_between_steps = false;  // shared mode: stop gradients between cascade steps
  bool warm_start = true;             // sequential mode: stage t starts from stage t-1's weights
  CascadeConfig cascade;

  void validate() const {
    cascade.validate();
    if (epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
    if (episodes_per_epoch < 1) throw std::invalid_argument("train.episodes_per_epoch must be >= 1");
    if (shots < 1) throw std::invalid_argument("train.shots must be >= 1");
    if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw std::invalid_argument("train.base_lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train.momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("train.weight_decay must be >= 0");
    if (!(poly_power > 0.0)) throw std::invalid_argument("train.poly_power must be > 0");
    if (cascade.weight_mode == WeightMode::different && epochs < cascade.steps) {
      throw std::invalid_argument("train.epochs must be >= cascade.steps when weight_mode is different");
    }
  }

  int steps_per_epoch() const { return (episodes_per_epoch + batch_size - 1) / batch_size; }

  // Epoch budget of a sequential stage: epochs split evenly, remainder to the
  // earliest stages.
  int stage_epochs(int stage) const {
    if (cascade.weight_mode == WeightMode::identical) return epochs;
    const int base = epochs / cascade.steps;
    return base + (stage < epochs % cascade.steps ? 1 : 0);
  }
};

// lr = base * (1 - step/total)^power
inline double poly_lr(long step, long total_steps, double base_lr, double power) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw std::invalid_argument(detail::concat("poly_lr: step ", step, " outside [0, ", total_steps, "]"));
  }
  if (step == total_steps) return 0.0;
  return base_lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), power);
}

// Mean binary cross-entropy of a probability map against a mask; the mask
// is nearest-resized to the map's grid. Probabilities are clamped to
// [eps, 1 - eps].
template <typename T>
double cross_entropy(const ProbMap<T>& p, const Mask& y, double eps = 1e-7) {
  if (y.rank() != 3 || y.channels() != 1) throw ShapeError("cross_entropy: mask must be 1xHxW");
  const Mask grid = resize_nearest(y, p.height(), p.width());
  if (grid.height() != p.height() || grid.width() != p.width()) throw ShapeError("cross_entropy: resolution mismatch");
  double total = 0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const double q = std::clamp(static_cast<double>(p.data[i]), eps, 1.0 - eps);
    total += grid[i] ? -std::log(q) : -std::log1p(-q);
  }
  return total / static_cast<double>(p.data.size());
}

// (1/T) sum_t CE(p^(t), y)
template <typename T>
double loss_shared(const std::vector<ProbMap<T>>& estimates, const Mask& y) {
  if (estimates.empty()) throw std::invalid_argument("loss_shared: no estimates");
  double total = 0;
  for (const auto& p : estimates) total += cross_entropy(p, y);
  return total / static_cast<double>(estimates.size());
}

// Differentiable form on logits: mean over steps of the logit-space CE.
template <typename T>
Var<T> loss_shared(const std::vector<Var<T>>& logits, const Tensor<T>& target) {
  if (logits.empty()) throw std::invalid_argument("loss_shared: no estimates");
  std::vector<Var<T>> terms;
  for (const auto& z : logits) terms.push_back(ops::binary_ce_with_logits(z, target));
  return ops::weighted_sum(terms, std::vector<T>(terms.size(), T(1) / static_cast<T>(terms.size())));
}

// SGD with momentum and L2 weight decay:
//   g = grad + decay * w;  buf = momentum * buf + g;  w -= lr * buf
template <typename T>
class Sgd {
 public:
  Sgd(nn::NamedParameters<T> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& [_, p] : params_) buffers_.emplace_back(p.value().shape());
  }

  void zero_grad() { nn::zero_grad(params_); }

  void step(double lr) {
    const T lr_t = static_cast<T>(lr);
    const T mom = static_cast<T>(momentum_);
    const T decay = static_cast<T>(weight_decay_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var<T>& p = params_[k].second;
      Tensor<T>& w = p.mutable_value();
      const Tensor<T>& g = p.grad();
      Tensor<T>& buf = buffers_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = (g.empty() ? T(0) : g[i]) + decay * w[i];
        buf[i] = mom * buf[i] + gi;
        w[i] -= lr_t * buf[i];
      }
    }
  }

  std::vector<Tensor<T>>& buffers() { return buffers_; }
  const std::vector<Tensor<T>>& buffers() const { return buffers_; }

 private:
  nn::NamedParameters<T> params_;
  std::vector<Tensor<T>> buffers_;
  double momentum_;
  double weight_decay_;
};

struct StepRecord {
  long step = 0;  // global, monotone across stages
  int stage = 0;
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double wall_ms = 0;
};

struct EpochRecord {
  int stage = 0;
  int epoch = 0;
  double mean_loss = 0;
  std::optional<double> val_miou;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;

  std::vector<double> losses() const {
    std::vector<double> out;
    for (const auto& s : steps) out.push_back(s.loss);
    return out;
  }
};

// Trailing moving average over `window` steps.
inline std::vector<double> smoothed(const std::vector<double>& values, std::size_t window) {
  std::vector<double> out;
  double acc = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= window) acc -= values[i - window];
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

// One line per step: {"step":..,"stage":..,"epoch":..,"lr":..,"loss":..,"wall_ms":..}
inline std::string step_record_line(const StepRecord& r) {
  nlohmann::json j{{"step", r.step}, {"stage", r.stage}, {"epoch", r.epoch},
                   {"lr", r.lr},     {"loss", r.loss},   {"wall_ms", r.wall_ms}};
  return j.dump();
}

inline StepRecord parse_step_record(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  return {j.at("step").get<long>(), j.at("stage").get<int>(), j.at("epoch").get<int>(),
          j.at("lr").get<double>(), j.at("loss").get<double>(), j.at("wall_ms").get<double>()};
}

// Produces a prepared training episode from an rng stream.
template <typename T>
using EpisodeSource = std::function<PreparedEpisode<T>(Rng&)>;

// Episodes from the given classes with augmentation; classes drawn uniformly.
template <typename T>
EpisodeSource<T> make_episode_source(const Dataset& data, std::vector<int> classes, FeatureExtractor<T> extract,
                                     AugmentConfig augment_cfg, int shots, bool augment_samples = true) {
  if (classes.empty()) throw std::invalid_argument("episode source needs at least one class");
  return [&data, classes = std::move(classes), extract = std::move(extract), augment_cfg, shots,
          augment_samples](Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, classes.size() - 1);
    Episode ep = sample_episode(data, classes[pick(rng)], shots, rng);
    if (augment_samples) {
      ep.query = augment(ep.query, augment_cfg, rng);
      for (auto& s : ep.support) s = augment(s, augment_cfg, rng);
    }
    return prepare_episode(extract, ep);
  };
}

// Progress of a (possibly resumed) training run.
template <typename T>
struct TrainState {
  std::vector<FusionNet<T>> nets;
  std::vector<std::vector<Tensor<T>>> momentum;  // per network
  int stage = 0;        // stage in progress
  int epochs_done = 0;  // completed epochs of that stage
  long global_step = 0;
  TrainLog log;
  bool diverged = false;
  bool finished = false;
};

template <typename T>
struct TrainHooks {
  // Validation mIoU after an epoch, computed with the networks trained so far.
  std::function<std::optional<double>(int stage, std::span<const FusionNet<T>> nets)> validate;
  // Called after every completed epoch (checkpointing). Returning false stops
  // the run after the checkpoint, as an interruption would.
  std::function<bool(const TrainState<T>&)> on_epoch_end;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
std::vector<Tensor<T>> snapshot(const FusionNet<T>& net) {
  std::vector<Tensor<T>> out;
  for (const auto& [_, p] : net.parameters()) out.push_back(p.value());
  return out;
}

template <typename T>
void restore_snapshot(FusionNet<T>& net, const std::vector<Tensor<T>>& values) {
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].second.mutable_value() = values[i];
}

// Prior channel fed to step `stage + 1` of a sequential cascade, computed
// with the frozen earlier stages.
template <typename T>
Var<T> frozen_stage_input(std::span<const FusionNet<T>> frozen, const PreparedEpisode<T>& p, const CascadeConfig& cfg) {
  if (frozen.empty()) return Var<T>::constant(p.prior.data);
  NoGradGuard no_grad;
  CascadeConfig sub = cfg;
  sub.steps = static_cast<int>(frozen.size());
  sub.weight_mode = WeightMode::different;
  const auto u = unroll_cascade<T, FusionNet<T>>(frozen, Var<T>::constant(p.prior.data),
                                                 Var<T>::constant(p.support_mid.data),
                                                 Var<T>::constant(p.query_mid.data), sub);
  return Var<T>::constant((cfg.prior_mode == PriorMode::augmented ? u.augmented : u.estimates).back().value());
}

// Returns false when a hook asked to stop.
template <typename T>
bool run_stage(TrainState<T>& st, const TrainConfig& cfg, const EpisodeSource<T>& source, const TrainHooks<T>& hooks,
               bool shared) {
  const int stage = st.stage;
  FusionNet<T>& net = st.nets[static_cast<std::size_t>(stage)];
  Sgd<T> opt(net.parameters(), cfg.momentum, cfg.weight_decay);
  if (st.momentum.size() > static_cast<std::size_t>(stage) && !st.momentum[static_cast<std::size_t>(stage)].empty()) {
    opt.buffers() = st.momentum[static_cast<std::size_t>(stage)];
  }
  const int stage_epochs = cfg.stage_epochs(stage);
  const long steps_per_epoch = cfg.steps_per_epoch();
  const long total = stage_epochs * steps_per_epoch;
  const std::span<const FusionNet<T>> frozen(st.nets.data(), static_cast<std::size_t>(shared ? 0 : stage));
  const std::span<const FusionNet<T>> single(&net, 1);

  for (int epoch = st.epochs_done; epoch < stage_epochs; ++epoch) {
    const auto good = snapshot(net);
    Rng rng(derive_seed(cfg.seed, detail::concat("train/stage", stage, "/epoch", epoch)));
    double epoch_loss = 0;
    for (long s = 0; s < steps_per_epoch; ++s) {
      const auto t0 = std::chrono::steady_clock::now();
      opt.zero_grad();
      double batch_loss = 0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const PreparedEpisode<T> p = source(rng);
        const Var<T> support = Var<T>::constant(p.support_mid.data);
        const Var<T> query = Var<T>::constant(p.query_mid.data);
        Var<T> loss;
        if (shared) {
          const auto u = unroll_cascade<T, FusionNet<T>>(single, Var<T>::constant(p.prior.data), support, query,
                                                         cfg.cascade, cfg.detach_between_steps);
          loss = loss_shared(u.logits, p.target);
        } else {
          const Var<T> input = frozen_stage_input(frozen, p, cfg.cascade);
          loss = ops::binary_ce_with_logits(net.forward(input, support, query), p.target);
        }
        const Var<T> scaled = ops::weighted_sum<T>({loss}, {T(1) / static_cast<T>(cfg.batch_size)});
        backward(scaled);
        batch_loss += static_cast<double>(loss.value()[0]) / cfg.batch_size;
      }
      if (!std::isfinite(batch_loss)) {
        restore_snapshot(net, good);
        st.diverged = true;
        return false;
      }
      const long local = epoch * steps_per_epoch + s;
      const double lr = poly_lr(local, total, cfg.base_lr, cfg.poly_power);
      opt.step(lr);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      st.log.steps.push_back({st.global_step++, stage, epoch, lr, batch_loss, ms});
      epoch_loss += batch_loss;
    }
    for (const auto& [_, p] : net.parameters()) {
      if (!all_finite(p.value())) {
        restore_snapshot(net, good);
        st.diverged = true;
        return false;
      }
    }
    EpochRecord rec{stage, epoch, epoch_loss / static_cast<double>(steps_per_epoch), std::nullopt};
    if (hooks.validate) {
      rec.val_miou = hooks.validate(stage, std::span<const FusionNet<T>>(st.nets.data(), static_cast<std::size_t>(stage + 1)));
    }
    st.log.epochs.push_back(rec);
    st.epochs_done = epoch + 1;
    if (st.momentum.size() <= static_cast<std::size_t>(stage)) st.momentum.resize(static_cast<std::size_t>(stage) + 1);
    st.momentum[static_cast<std::size_t>(stage)] = opt.buffers();
    if (hooks.on_epoch_end && !hooks.on_epoch_end(st)) return false;
  }
  return true;
}

}  // namespace detail

template <typename T>
TrainState<T> initial_train_state(const TrainConfig& cfg, const FusionConfig& fusion_cfg) {
  TrainState<T> st;
  st.nets.emplace_back(fusion_cfg, derive_seed(cfg.seed, "fusion/0"));
  return st;
}

// Continues `st` until finished, diverged or stopped by a hook.
template <typename T>
void continue_training(TrainState<T>& st, const TrainConfig& cfg, const EpisodeSource<T>& source,
                       const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  const bool shared = cfg.cascade.weight_mode == WeightMode::identical;
  const int stages = shared ? 1 : cfg.cascade.steps;
  while (!st.finished && !st.diverged) {
    if (st.epochs_done >= cfg.stage_epochs(st.stage)) {
      if (st.stage + 1 >= stages) {
        st.finished = true;
        break;
      }
      ++st.stage;
      st.epochs_done = 0;
    }
    if (st.nets.size() <= static_cast<std::size_t>(st.stage)) {
      const FusionNet<T>& prev = st.nets.back();
      st.nets.push_back(cfg.warm_start ? prev.clone()
                                       : FusionNet<T>(prev.config(), derive_seed(cfg.seed, detail::concat("fusion/", st.stage))));
    }
    if (!detail::run_stage(st, cfg, source, hooks, shared)) break;
  }
}

// Resumable training state: every network, its momentum buffers, progress
// counters and the log so far.
template <typename T>
io::Container train_state_container(const TrainState<T>& st, nlohmann::json meta = nlohmann::json::object()) {
  io::Container c;
  c.meta = std::move(meta);
  c.meta["kind"] = "train_state";
  c.meta["fusion"] = fusion_config_json(st.nets.front().config());
  c.meta["n_nets"] = st.nets.size();
  c.meta["stage"] = st.stage;
  c.meta["epochs_done"] = st.epochs_done;
  c.meta["global_step"] = st.global_step;
  c.meta["diverged"] = st.diverged;
  c.meta["finished"] = st.finished;
  nlohmann::json steps = nlohmann::json::array(), epochs = nlohmann::json::array();
  for (const auto& r : st.log.steps) steps.push_back({r.step, r.stage, r.epoch, r.lr, r.loss, r.wall_ms});
  for (const auto& e : st.log.epochs) {
    epochs.push_back({e.stage, e.epoch, e.mean_loss, e.val_miou ? nlohmann::json(*e.val_miou) : nlohmann::json()});
  }
  c.meta["steps"] = std::move(steps);
  c.meta["epochs"] = std::move(epochs);
  std::vector<std::size_t> momentum_sizes;
  for (std::size_t k = 0; k < st.nets.size(); ++k) {
    nn::store(c, detail::concat("net", k, "/"), st.nets[k].parameters());
  }
  for (std::size_t k = 0; k < st.momentum.size(); ++k) {
    momentum_sizes.push_back(st.momentum[k].size());
    for (std::size_t i = 0; i < st.momentum[k].size(); ++i) {
      c.tensors[detail::concat("momentum", k, "/", i)] = tensor_cast<float>(st.momentum[k][i]);
    }
  }
  c.meta["momentum_sizes"] = momentum_sizes;
  return c;
}

template <typename T>
TrainState<T> train_state_from_container(const io::Container& c) {
  if (c.meta.value("kind", "") != "train_state") throw IoError("container does not hold a training state");
  TrainState<T> st;
  try {
    const FusionConfig fcfg = fusion_config_from_json(c.meta.at("fusion"));
    const auto n = c.meta.at("n_nets").get<std::size_t>();
    for (std::size_t k = 0; k < n; ++k) {
      FusionNet<T> net(fcfg, 0);
      auto params = net.parameters();
      nn::restore(c, detail::concat("net", k, "/"), params);
      st.nets.push_back(std::move(net));
    }
    const auto sizes = c.meta.at("momentum_sizes").get<std::vector<std::size_t>>();
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      std::vector<Tensor<T>> bufs;
      for (std::size_t i = 0; i < sizes[k]; ++i) {
        const auto it = c.tensors.find(detail::concat("momentum", k, "/", i));
        if (it == c.tensors.end()) throw IoError(detail::concat("training state is missing momentum", k, "/", i));
        bufs.push_back(tensor_cast<T>(it->second));
      }
      st.momentum.push_back(std::move(bufs));
    }
    st.stage = c.meta.at("stage").get<int>();
    st.epochs_done = c.meta.at("epochs_done").get<int>();
    st.global_step = c.meta.at("global_step").get<long>();
    st.diverged = c.meta.at("diverged").get<bool>();
    st.finished = c.meta.at("finished").get<bool>();
    for (const auto& r : c.meta.at("steps")) {
      st.log.steps.push_back({r[0].get<long>(), r[1].get<int>(), r[2].get<int>(), r[3].get<double>(), r[4].get<double>(),
                              r[5].get<double>()});
    }
    for (const auto& e : c.meta.at("epochs")) {
      EpochRecord rec{e[0].get<int>(), e[1].get<int>(), e[2].get<double>(), std::nullopt};
      if (!e[3].is_null()) rec.val_miou = e[3].get<double>();
      st.log.epochs.push_back(rec);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed training state: ") + e.what());
  }
  return st;
}

template <typename T>
struct TrainOutcome {
  std::vector<FusionNet<T>> nets;
  TrainLog log;
  bool diverged = false;
};

// Shared weights: one network, mean CE over all T cascade steps.
template <typename T>
TrainOutcome<T> train_shared(const TrainConfig& cfg, const FusionConfig& fusion_cfg, const EpisodeSource<T>& source,
                             const TrainHooks<T>& hooks = {}) {
  if (cfg.cascade.weight_mode != WeightMode::identical) {
    throw std::invalid_argument("train_shared requires cascade.weight_mode = identical");
  }
  auto st = initial_train_state<T>(cfg, fusion_cfg);
  continue_training(st, cfg, source, hooks);
  return {std::move(st.nets), std::move(st.log), st.diverged};
}

// Different weights: G^(1) ... G^(T) trained one after another, each
// stage frozen before the next starts.
template <typename T>
TrainOutcome<T> train_sequential(const TrainConfig& cfg, const FusionConfig& fusion_cfg, const EpisodeSource<T>& source,
                                 const TrainHooks<T>& hooks = {}) {
  if (cfg.cascade.weight_mode != WeightMode::different) {
    throw std::invalid_argument("train_sequential requires cascade.weight_mode = different");
  }
  auto st = initial_train_state<T>(cfg, fusion_cfg);
  continue_training(st, cfg, source, hooks);
  return {std::move(st.nets), std::move(st.log), st.diverged};
}

}  // namespace iterseg
