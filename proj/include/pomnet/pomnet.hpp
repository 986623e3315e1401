#pragma once

#include "pomnet/autograd.hpp"
#include "pomnet/heatmap.hpp"
#include "pomnet/layers.hpp"
#include "pomnet/model_config.hpp"
#include "pomnet/params.hpp"
#include "pomnet/preprocess.hpp"

#include <cstdint>
#include <memory>
#include <vector>

namespace pomnet {

enum class Branch { Support, Query };

// Per-keypoint rows before padding: rows [J, D] (or [J, C] before the
// projection) and which of them carry a real keypoint.
template <typename T>
struct KeypointRows {
  ag::Var<T> rows;
  std::vector<std::uint8_t> valid;
};

// Padded to L slots; mask[i] != 0 for real keypoints.
template <typename T>
struct KeypointSlots {
  ag::Var<T> slots;
  std::vector<std::uint8_t> mask;
  int joints = 0;
};

// Heatmap-weighted mean: features [1, C, h, w] upsampled by `upsample`
// ([h*w, H*W], see bilinear_matrix) and averaged under each heatmap channel
// normalized to unit mass. Returns rows [J, C]; zero-mass channels invalid.
template <typename T>
KeypointRows<T> heatmap_pool(ag::Graph<T>& g, ag::Var<T> features, const HeatmapStack& heatmaps,
                             const std::vector<double>& upsample);

struct EpisodeInput {
  std::vector<const ProcessedSample*> supports;
  const ProcessedSample* query = nullptr;
};

template <typename T>
class PomNet {
 public:
  PomNet(const ModelConfig& config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return *store_; }
  const ParamStore<T>& params() const { return *store_; }

  ag::Var<T> image_var(ag::Graph<T>& g, const ProcessedSample& sample) const;
  // image [1, 3, S, S] -> [1, C, h, w]
  ag::Var<T> extract_features(ag::Graph<T>& g, ag::Var<T> image, Branch branch) const;

  // Heatmap-weighted mean of the upsampled feature map per keypoint, [J, C].
  // Channels with zero mass come back invalid.
  KeypointRows<T> pool_raw(ag::Graph<T>& g, ag::Var<T> features, const HeatmapStack& heatmaps) const;
  // pool_raw followed by the channel reduction to D.
  KeypointRows<T> pool_keypoint_features(ag::Graph<T>& g, ag::Var<T> features, const HeatmapStack& heatmaps) const;
  // Masked mean over supports, padded to L slots with the placeholder.
  KeypointSlots<T> aggregate_kshot(ag::Graph<T>& g, const std::vector<KeypointRows<T>>& per_support) const;
  // Returns refined slots [L, D].
  ag::Var<T> kim_forward(ag::Graph<T>& g, const KeypointSlots<T>& slots, ag::Var<T> query_features) const;
  // First `joints` refined rows against the query features -> [J, H, W].
  ag::Var<T> matching_head(ag::Graph<T>& g, ag::Var<T> refined, int joints, ag::Var<T> query_features) const;

  ag::Var<T> forward(ag::Graph<T>& g, const EpisodeInput& input) const;
  HeatmapStack predict(const EpisodeInput& input) const;

  // Support heatmaps as used for pooling (encoded at heatmap resolution).
  HeatmapStack support_heatmaps(const ProcessedSample& sample) const;

 private:
  ModelConfig config_;
  std::unique_ptr<ParamStore<T>> store_;
  std::unique_ptr<Backbone<T>> support_backbone_;
  std::unique_ptr<Backbone<T>> query_backbone_;
  std::vector<InteractionBlock<T>> blocks_;
  std::vector<double> position_embedding_;
  std::vector<double> upsample_;  // [h*w, H*W]
};

}  // namespace pomnet
