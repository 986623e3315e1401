#pragma once

#include "pomnet/pomnet.hpp"

#include <optional>

namespace pomnet {

template <typename T>
struct PrototypeSet {
  ag::Var<T> vectors;  // [J, C]
  std::vector<std::uint8_t> valid;
};

// Nearest-prototype keypoint matcher on an intermediate backbone stage.
template <typename T>
class ProtoNet {
 public:
  // Cosine similarity logits are multiplied by this.
  static constexpr double kCosineScale = 10.0;

  ProtoNet(const ModelConfig& config, std::uint64_t init_seed, bool cosine = false);

  const ModelConfig& config() const { return config_; }
  bool cosine() const { return cosine_; }
  ParamStore<T>& params() { return *store_; }
  const ParamStore<T>& params() const { return *store_; }
  int feature_size() const { return feature_size_; }

  // [1, C, h, w] at config.prototype_stage.
  ag::Var<T> stage_features(ag::Graph<T>& g, const ProcessedSample& sample) const;
  PrototypeSet<T> build_prototypes(ag::Graph<T>& g, const std::vector<const ProcessedSample*>& supports) const;
  // Similarity of every prototype to every query cell, [J, h*w].
  ag::Var<T> similarity(const PrototypeSet<T>& prototypes, ag::Var<T> query_features) const;
  // Heatmap-coordinate estimates; invalid prototypes give nullopt.
  std::vector<std::optional<KeypointEstimate>> match_prototypes(const PrototypeSet<T>& prototypes,
                                                                ag::Var<T> query_features) const;
  std::vector<std::optional<KeypointEstimate>> predict(const EpisodeInput& input) const;

  // Cross-entropy of the similarity map against each supervised query
  // keypoint's nearest feature cell. Invalid Var when nothing is supervised.
  ag::Var<T> training_loss(ag::Graph<T>& g, const EpisodeInput& input) const;
  // Feature cell (row-major index) nearest a heatmap-coordinate point.
  int nearest_cell(Point2 hm) const;

 private:
  ModelConfig config_;
  bool cosine_;
  int feature_size_;
  std::unique_ptr<ParamStore<T>> store_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::vector<double> upsample_;
};

}  // namespace pomnet
