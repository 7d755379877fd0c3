#pragma once

#include <concepts>
#include <span>
#include <string>
#include <vector>

#include "iterseg/fusion.hpp"
#include "iterseg/prior.hpp"

namespace iterseg {

enum class WeightMode { identical, different };
enum class PriorMode { plain, augmented };

inline std::string to_string(WeightMode m) { return m == WeightMode::identical ? "identical" : "different"; }
inline std::string to_string(PriorMode m) { return m == PriorMode::plain ? "plain" : "augmented"; }

inline WeightMode parse_weight_mode(const std::string& s) {
  if (s == "identical") return WeightMode::identical;
  if (s == "different") return WeightMode::different;
  throw std::invalid_argument("cascade.weight_mode must be \"identical\" or \"different\", got \"" + s + "\"");
}

inline PriorMode parse_prior_mode(const std::string& s) {
  if (s == "plain") return PriorMode::plain;
  if (s == "augmented") return PriorMode::augmented;
  throw std::invalid_argument("cascade.prior_mode must be \"plain\" or \"augmented\", got \"" + s + "\"");
}

struct CascadeConfig {
  int steps = 2;  // refinement count T
  WeightMode weight_mode = WeightMode::different;
  PriorMode prior_mode = PriorMode::augmented;
  double threshold = 0.5;

  void validate() const {
    if (steps < 1) throw std::invalid_argument("cascade.steps must be >= 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("cascade.threshold must be in (0,1)");
  }

  std::size_t network_count() const { return weight_mode == WeightMode::identical ? 1 : static_cast<std::size_t>(steps); }

  std::string describe() const {
    return detail::concat("T=", steps, ";weights=", to_string(weight_mode), ";prior=", to_string(prior_mode),
                          ";threshold=", threshold);
  }

  friend bool operator==(const CascadeConfig&, const CascadeConfig&) = default;
};

inline nlohmann::json cascade_config_json(const CascadeConfig& c) {
  return {{"steps", c.steps},
          {"weight_mode", to_string(c.weight_mode)},
          {"prior_mode", to_string(c.prior_mode)},
          {"threshold", c.threshold}};
}

inline CascadeConfig cascade_config_from_json(const nlohmann::json& j) {
  CascadeConfig c;
  c.steps = j.at("steps").get<int>();
  c.weight_mode = parse_weight_mode(j.at("weight_mode").get<std::string>());
  c.prior_mode = parse_prior_mode(j.at("prior_mode").get<std::string>());
  c.threshold = j.at("threshold").get<double>();
  c.validate();
  return c;
}

// Anything that maps (prior, support, query) Vars to 2 x h x w logits.
template <typename N, typename T>
concept CascadeNetwork = requires(const N& net, const Var<T>& v) {
  { net.forward(v, v, v) } -> std::convertible_to<Var<T>>;
};

template <typename T>
ProbMap<T> softmax_binary(const Tensor<T>& logits) {
  NoGradGuard no_grad;
  return {ops::softmax_binary(Var<T>::constant(logits)).value(), ProbKind::estimate};
}

// p_aug = minmax(p * p_sim).
template <typename T>
ProbMap<T> augment_prior(const ProbMap<T>& p, const ProbMap<T>& p_sim) {
  require_same_shape(p.data, p_sim.data, "augment_prior");
  NoGradGuard no_grad;
  const Var<T> prod = ops::mul(Var<T>::constant(p.data), Var<T>::constant(p_sim.data));
  return {ops::minmax_normalize(prod, kMinMaxEps).value(), ProbKind::augmented};
}

// 1 where p > threshold (strict).
template <typename T>
Mask binarize(const ProbMap<T>& p, double threshold = 0.5) {
  return threshold_mask(p.data, threshold);
}

// Interpolates p to out_h x out_w (bilinear), then thresholds.
template <typename T>
Mask binarize(const ProbMap<T>& p, double threshold, int out_h, int out_w) {
  return threshold_mask(resize_bilinear(p.data, out_h, out_w), threshold);
}

// Graph-level cascade, shared by inference and training.
template <typename T>
struct CascadeUnroll {
  std::vector<Var<T>> inputs;     // prior channel fed to step t (t = 1..T)
  std::vector<Var<T>> logits;     // z^(t)
  std::vector<Var<T>> estimates;  // p^(t)
  std::vector<Var<T>> augmented;  // p_aug^(t)
};

template <typename N>
void check_network_count(std::span<const N> nets, const CascadeConfig& cfg) {
  cfg.validate();
  if (nets.size() != cfg.network_count()) {
    throw std::invalid_argument(detail::concat("cascade with weight_mode=", to_string(cfg.weight_mode), " and T=",
                                               cfg.steps, " needs ", cfg.network_count(), " network(s), got ",
                                               nets.size()));
  }
}

// Step 1 consumes p^(0) = prior; step t >= 2 consumes p^(t-1) (plain) or
// p_aug^(t-1) (augmented). With detach_between_steps the fed-forward
// estimate carries no gradient.
template <typename T, typename N>
  requires CascadeNetwork<N, T>
CascadeUnroll<T> unroll_cascade(std::span<const N> nets, const Var<T>& prior, const Var<T>& support, const Var<T>& query,
                                const CascadeConfig& cfg, bool detach_between_steps = false) {
  check_network_count(nets, cfg);
  CascadeUnroll<T> u;
  Var<T> input = prior;
  for (int t = 1; t <= cfg.steps; ++t) {
    const N& net = cfg.weight_mode == WeightMode::identical ? nets[0] : nets[static_cast<std::size_t>(t - 1)];
    u.inputs.push_back(input);
    Var<T> z = net.forward(input, support, query);
    Var<T> p = ops::softmax_binary(z);
    Var<T> aug = ops::minmax_normalize(ops::mul(p, prior), kMinMaxEps);
    // non-finite logits (a diverged network) are left for the trainer to report
    assert(!all_finite(z.value()) || (in_unit_interval(p.value()) && in_unit_interval(aug.value())));
    input = cfg.prior_mode == PriorMode::augmented ? aug : p;
    if (detach_between_steps) input = ops::detach(input);
    u.logits.push_back(std::move(z));
    u.estimates.push_back(std::move(p));
    u.augmented.push_back(std::move(aug));
  }
  return u;
}

template <typename T>
struct CascadeTrace {
  ProbMap<T> prior;                     // p^(0)
  std::vector<ProbMap<T>> estimates;    // p^(1..T)
  std::vector<ProbMap<T>> augmented;    // p_aug^(1..T)
  Mask final_mask;                      // on the estimate grid
  Mask final_mask_full;                 // at image resolution
  const ProbMap<T>& final_estimate() const { return estimates.back(); }
};

template <typename T, typename N>
  requires CascadeNetwork<N, T>
CascadeTrace<T> run_cascade(std::span<const N> nets, const ProbMap<T>& prior, const FeatureMap<T>& support_mid,
                            const FeatureMap<T>& query_mid, const CascadeConfig& cfg, int image_h, int image_w) {
  NoGradGuard no_grad;
  const auto u = unroll_cascade<T, N>(nets, Var<T>::constant(prior.data), Var<T>::constant(support_mid.data),
                                      Var<T>::constant(query_mid.data), cfg);
  CascadeTrace<T> trace;
  trace.prior = prior;
  for (std::size_t t = 0; t < u.estimates.size(); ++t) {
    trace.estimates.push_back({u.estimates[t].value(), ProbKind::estimate});
    trace.augmented.push_back({u.augmented[t].value(), ProbKind::augmented});
  }
  trace.final_mask = binarize(trace.final_estimate(), cfg.threshold);
  trace.final_mask_full = binarize(trace.final_estimate(), cfg.threshold, image_h, image_w);
  return trace;
}

namespace detail {

// Element-wise mean accumulated in double, so K identical inputs reproduce
// the input exactly.
template <typename T>
Tensor<T> mean_tensor(const std::vector<const Tensor<T>*>& items) {
  if (items.empty()) throw std::invalid_argument("mean of an empty list");
  const Tensor<T>& first = *items.front();
  std::vector<double> acc(first.size(), 0.0);
  for (const Tensor<T>* t : items) {
    require_same_shape(first, *t, "kshot_aggregate");
    for (std::size_t j = 0; j < t->size(); ++j) acc[j] += static_cast<double>((*t)[j]);
  }
  Tensor<T> out(first.shape());
  const double k = static_cast<double>(items.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(acc[j] / k);
  return out;
}

}  // namespace detail

// Mean of K masked mid-level maps and of the K priors.
template <typename T>
std::pair<FeatureMap<T>, ProbMap<T>> kshot_aggregate(const std::vector<FeatureMap<T>>& mids,
                                                     const std::vector<ProbMap<T>>& priors) {
  if (mids.empty() || priors.empty()) throw std::invalid_argument("kshot_aggregate: no support inputs");
  if (mids.size() != priors.size()) throw std::invalid_argument("kshot_aggregate: feature/prior count mismatch");
  std::vector<const Tensor<T>*> fs, ps;
  for (const auto& m : mids) fs.push_back(&m.data);
  for (const auto& p : priors) ps.push_back(&p.data);
  FeatureMap<T> f = mids[0];
  f.data = detail::mean_tensor(fs);
  return {std::move(f), ProbMap<T>{detail::mean_tensor(ps), ProbKind::prior}};
}

}  // namespace iterseg
