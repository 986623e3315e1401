#pragma once

#include "pomnet/heatmap.hpp"

#include <cstdint>
#include <vector>

namespace pomnet {

struct LossReport {
  double loss = 0.0;
  std::vector<double> per_keypoint;  // mean squared error per channel; 0 if unsupervised
  int supervised = 0;
};

// (1 / (J_sup H W)) sum over supervised channels of squared error.
// Throws TrainingError when nothing is supervised.
LossReport mse_loss(const HeatmapStack& pred, const HeatmapStack& target, const std::vector<std::uint8_t>& supervised);

}  // namespace pomnet
