#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "iterseg/backbone.hpp"
#include "iterseg/episodes.hpp"
#include "iterseg/fusion.hpp"
#include "iterseg/prior.hpp"
#include "iterseg/refine.hpp"

namespace iterseg {

template <typename T>
using FeaturePair = std::pair<FeatureMap<T>, FeatureMap<T>>;

// Maps a sample to its (mid, high) features.
template <typename T>
using FeatureExtractor = std::function<FeaturePair<T>(const Sample&)>;

template <typename T>
FeatureExtractor<T> backbone_extractor(const Backbone<T>& backbone) {
  return [&backbone](const Sample& s) { return backbone.extract_features(tensor_cast<T>(s.image)); };
}

// Everything the cascade needs for one episode, on the query's mid grid.
template <typename T>
struct PreparedEpisode {
  ProbMap<T> prior_high;        // p_sim on the high-level grid (K-shot mean)
  ProbMap<T> prior;             // p_sim resized to the mid grid
  FeatureMap<T> support_mid;    // condensed support prototype, broadcast
  FeatureMap<T> query_mid;
  Tensor<T> target;             // query mask, nearest-resized to the mid grid
  Mask query_mask;              // full resolution ground truth
  int image_h = 0, image_w = 0;
  bool support_empty = false;   // support foreground vanished on the grid
};

template <typename T>
PreparedEpisode<T> prepare_episode(const FeatureExtractor<T>& extract, const Episode& ep) {
  if (ep.support.empty()) throw std::invalid_argument("episode has no support samples");
  auto [fmq, fhq] = extract(ep.query);
  std::vector<FeatureMap<T>> mids;
  std::vector<ProbMap<T>> priors;
  std::vector<Tensor<T>> grid_masks;
  for (const Sample& s : ep.support) {
    auto [fms, fhs] = extract(s);
    Tensor<T> m_mid = mask_on_grid<T>(s.mask, fms.height(), fms.width());
    Tensor<T> m_high = mask_on_grid<T>(s.mask, fhs.height(), fhs.width());
    mids.push_back(mask_features(fms, m_mid));
    priors.push_back(generate_prior(fhq, mask_features(fhs, m_high)));
    grid_masks.push_back(std::move(m_mid));
  }
  auto [mean_mid, mean_prior] = kshot_aggregate(mids, priors);
  std::vector<const Tensor<T>*> mask_ptrs;
  for (const auto& m : grid_masks) mask_ptrs.push_back(&m);
  const Tensor<T> mean_mask = detail::mean_tensor(mask_ptrs);

  const CondensedSupport<T> condensed = condense_support(mean_mid, mean_mask);
  PreparedEpisode<T> out;
  const int h = fmq.height(), w = fmq.width();
  out.prior_high = mean_prior;
  out.prior = {resize_bilinear(mean_prior.data, h, w), ProbKind::prior};
  out.support_mid = {Tensor<T>::chw(fmq.channels(), h, w), FeatureLevel::mid, fmq.stride};
  for (int c = 0; c < fmq.channels(); ++c) {
    std::fill(out.support_mid.data.channel(c), out.support_mid.data.channel(c) + out.support_mid.data.plane(),
              condensed.prototype[static_cast<std::size_t>(c)]);
  }
  out.query_mid = std::move(fmq);
  out.target = resize_nearest(mask_to_tensor<T>(ep.query.mask), h, w);
  out.query_mask = ep.query.mask;
  out.image_h = ep.query.height();
  out.image_w = ep.query.width();
  out.support_empty = condensed.empty_foreground;
  return out;
}

template <typename T>
FusionInput<T> fusion_input(const PreparedEpisode<T>& p) {
  return {p.prior, p.support_mid, p.query_mid};
}

template <typename T, typename N>
  requires CascadeNetwork<N, T>
CascadeTrace<T> run_cascade(std::span<const N> nets, const PreparedEpisode<T>& p, const CascadeConfig& cfg) {
  return run_cascade<T, N>(nets, p.prior, p.support_mid, p.query_mid, cfg, p.image_h, p.image_w);
}

}  // namespace iterseg
