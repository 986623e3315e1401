#pragma once

#include "pomnet/autograd.hpp"
#include "pomnet/model_config.hpp"
#include "pomnet/params.hpp"

#include <string>
#include <vector>

namespace pomnet {

// Convolutional feature extractor; every stage output is available so the
// baseline can tap an intermediate stage.
template <typename T>
class Backbone {
 public:
  Backbone(const ModelConfig& config, std::string prefix, ParamStore<T>& store, Rng& rng);

  // image [1, 3, S, S] -> outputs of stages 1..up_to_stage.
  std::vector<ag::Var<T>> forward(ag::Graph<T>& g, ag::Var<T> image, int up_to_stage) const;
  int stage_count() const { return static_cast<int>(config_.channels.size()); }

 private:
  ag::Var<T> bottleneck(ag::Graph<T>& g, ag::Var<T> x, const std::string& name, int stride, bool project) const;

  ModelConfig config_;
  std::string prefix_;
  ParamStore<T>* store_;
};

// Fixed 2-D sinusoidal embedding for an h x w grid: the first D/2 channels
// encode the row, the last D/2 the column. Row-major cells, [h*w, D].
std::vector<double> sine_position_embedding(int h, int w, int dim, double temperature = 10000.0);

// One keypoint interaction block: masked self-attention over slots,
// cross-attention from slots into the query feature cells, and an FFN,
// each as a post-norm residual sub-layer.
template <typename T>
class InteractionBlock {
 public:
  InteractionBlock(const ModelConfig& config, std::string prefix, ParamStore<T>& store, Rng& rng);

  // slots [L, D]; memory_keys/values [h*w, D].
  ag::Var<T> forward(ag::Graph<T>& g, ag::Var<T> slots, const std::vector<std::uint8_t>& mask,
                     ag::Var<T> memory_keys, ag::Var<T> memory_values) const;

 private:
  ag::Var<T> attend(ag::Graph<T>& g, const std::string& name, ag::Var<T> q, ag::Var<T> k, ag::Var<T> v,
                    const std::vector<std::uint8_t>& mask) const;

  int heads_;
  std::string prefix_;
  ParamStore<T>* store_;
};

}  // namespace pomnet
