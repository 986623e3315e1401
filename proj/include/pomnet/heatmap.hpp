#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace pomnet {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct Resolution {
  int height = 0;
  int width = 0;
  int cells() const { return height * width; }
  bool operator==(const Resolution&) const = default;
};

struct GaussianSpec {
  double sigma = 2.0;  // heatmap pixels
};

// J channels of H x W likelihoods, channel-major.
struct HeatmapStack {
  int joints = 0;
  Resolution resolution;
  std::vector<double> values;

  HeatmapStack() = default;
  HeatmapStack(int j, Resolution res)
      : joints(j), resolution(res), values(static_cast<std::size_t>(j) * res.cells(), 0.0) {}

  double& at(int j, int y, int x) {
    return values[(static_cast<std::size_t>(j) * resolution.height + y) * resolution.width + x];
  }
  double at(int j, int y, int x) const {
    return values[(static_cast<std::size_t>(j) * resolution.height + y) * resolution.width + x];
  }
  std::span<const double> channel(int j) const {
    return {values.data() + static_cast<std::size_t>(j) * resolution.cells(),
            static_cast<std::size_t>(resolution.cells())};
  }
};

struct KeypointEstimate {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;
};

// Unnormalized Gaussians (peak 1) at integer grid points; channels with
// visibility 0 stay zero.
HeatmapStack encode_heatmaps(std::span<const Point2> keypoints, std::span<const std::uint8_t> visible,
                             GaussianSpec spec, Resolution resolution);

// Argmax per channel, shifted a quarter cell toward the larger neighbour on
// each axis; cells beyond the border count as 0. Confidence is the channel
// maximum.
std::vector<KeypointEstimate> decode_heatmaps(const HeatmapStack& stack);
KeypointEstimate decode_channel(std::span<const double> channel, Resolution resolution);

// Corner-aligned bilinear resampling of C x h x w (h, w >= 2) to the target
// resolution.
std::vector<double> resample_bilinear(std::span<const double> map, int channels, int h, int w,
                                      Resolution target);

// Matrix M [h*w, H*W] with resample_bilinear(F) = F * M for F [C, h*w].
std::vector<double> bilinear_matrix(int h, int w, Resolution target);

}  // namespace pomnet
