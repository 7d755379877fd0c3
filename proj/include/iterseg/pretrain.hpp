#pragma once

#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "iterseg/backbone.hpp"
#include "iterseg/training.hpp"

namespace iterseg {

class LeakageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double holdout_fraction = 0.2;
  AugmentConfig augment{};
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("pretrain.epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("pretrain.batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("pretrain.lr must be positive");
    if (momentum < 0 || momentum >= 1) throw std::invalid_argument("pretrain.momentum must be in [0,1)");
    if (weight_decay < 0) throw std::invalid_argument("pretrain.weight_decay must be >= 0");
    if (!(holdout_fraction > 0 && holdout_fraction < 1)) {
      throw std::invalid_argument("pretrain.holdout_fraction must be in (0,1)");
    }
  }
};

template <typename T>
struct PretrainResult {
  Backbone<T> backbone;
  std::set<int> seen_classes;
  double holdout_accuracy = 0;
  double chance = 0;
  std::vector<double> epoch_losses;
};

// Throws LeakageError if any sample belongs to a test class of `split`.
inline void check_no_leakage(std::span<const Sample> stream, const SplitPlan& split) {
  const std::set<int> test(split.test_classes.begin(), split.test_classes.end());
  for (const Sample& s : stream) {
    if (test.count(s.class_id)) {
      throw LeakageError(detail::concat("pretraining stream contains test class ", s.class_id, " (sample ",
                                        s.sample_id, ") of split ", split.split_index));
    }
  }
}

// Classifier over the train classes: backbone trunk, global average pool of
// the high stage, linear layer. The head is dropped afterwards and the trunk
// frozen. The last holdout_fraction of each class's samples is held out.
template <typename T>
PretrainResult<T> pretrain_backbone(std::span<const Sample> stream, const SplitPlan& split,
                                    const BackboneConfig& bcfg, const PretrainConfig& cfg) {
  cfg.validate();
  check_no_leakage(stream, split);
  std::map<int, std::vector<const Sample*>> by_class;
  for (const Sample& s : stream) by_class[s.class_id].push_back(&s);
  for (int c : split.train_classes) {
    if (!by_class.count(c)) throw std::invalid_argument(detail::concat("pretraining stream lacks train class ", c));
  }
  std::map<int, int> label;
  for (const auto& [c, _] : by_class) label.emplace(c, static_cast<int>(label.size()));

  std::vector<const Sample*> train, holdout;
  for (const auto& [c, items] : by_class) {
    const std::size_t n_hold =
        items.size() < 2 ? 0
                         : std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cfg.holdout_fraction * items.size())));
    for (std::size_t i = 0; i < items.size(); ++i) (i + n_hold < items.size() ? train : holdout).push_back(items[i]);
  }

  BackboneConfig trunk_cfg = bcfg;
  trunk_cfg.frozen = false;
  PretrainResult<T> r;
  r.backbone = Backbone<T>(trunk_cfg, derive_seed(cfg.seed, "pretrain/init"));
  Rng init_rng(derive_seed(cfg.seed, "pretrain/head"));
  const int high = bcfg.high_stage;
  nn::Conv2d<T> head(bcfg.widths[static_cast<std::size_t>(high)], static_cast<int>(label.size()), 1, 1, init_rng);

  nn::NamedParameters<T> params = r.backbone.parameters();
  nn::append_conv(params, "head", head);
  Sgd<T> opt(params, cfg.momentum, cfg.weight_decay);

  const auto logits_of = [&](const Sample& s) {
    return head(ops::global_avg_pool(r.backbone.forward_stages(Var<T>::constant(tensor_cast<T>(s.image)), high).back()));
  };

  const long steps_per_epoch = static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = steps_per_epoch * cfg.epochs;
  long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    Rng rng(derive_seed(cfg.seed, detail::concat("pretrain/epoch", e)));
    std::vector<const Sample*> order = train;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Var<T>> terms;
      for (std::size_t i = b; i < end; ++i) {
        const Sample s = augment(*order[i], cfg.augment, rng);
        terms.push_back(ops::softmax_cross_entropy(logits_of(s), label.at(s.class_id)));
      }
      const Var<T> loss =
          ops::weighted_sum(terms, std::vector<T>(terms.size(), T(1) / static_cast<T>(terms.size())));
      opt.zero_grad();
      backward(loss);
      opt.step(poly_lr(step, total, cfg.lr, 0.9));
      ++step;
      epoch_loss += static_cast<double>(loss.value()[0]) * static_cast<double>(end - b);
    }
    r.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
  }

  {
    NoGradGuard no_grad;
    std::size_t correct = 0;
    for (const Sample* s : holdout) {
      const Tensor<T> z = logits_of(*s).value();
      const auto best = std::max_element(z.values().begin(), z.values().end()) - z.values().begin();
      correct += best == label.at(s->class_id);
    }
    r.holdout_accuracy = holdout.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(holdout.size());
  }
  r.chance = 1.0 / static_cast<double>(label.size());
  for (const auto& [c, _] : label) r.seen_classes.insert(c);
  r.backbone.set_frozen(true);
  return r;
}

// Samples of the train classes only.
inline std::vector<Sample> pretraining_stream(const Dataset& data, const SplitPlan& split) {
  std::vector<Sample> out;
  for (int c : split.train_classes) {
    for (std::size_t i : data.indices_of(c)) out.push_back(data.samples()[i]);
  }
  return out;
}

// Re-verifies the leakage invariant for a stored backbone.
inline void verify_seen_classes(const std::set<int>& seen, const SplitPlan& split) {
  for (int c : split.test_classes) {
    if (seen.count(c)) {
      throw LeakageError(detail::concat("backbone was pretrained on class ", c, ", a test class of split ",
                                        split.split_index));
    }
  }
}

}  // namespace iterseg
