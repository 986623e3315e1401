#include "pomnet/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pomnet {

HeatmapStack encode_heatmaps(std::span<const Point2> keypoints, std::span<const std::uint8_t> visible,
                             GaussianSpec spec, Resolution resolution) {
  if (keypoints.size() != visible.size())
    throw std::invalid_argument("encode_heatmaps: keypoint and visibility counts differ");
  if (!(spec.sigma > 0.0)) throw std::invalid_argument("encode_heatmaps: sigma must be positive");
  HeatmapStack stack(static_cast<int>(keypoints.size()), resolution);
  const double denom = 2.0 * spec.sigma * spec.sigma;
  for (int j = 0; j < stack.joints; ++j) {
    if (!visible[j]) continue;
    const Point2 p = keypoints[j];
    for (int v = 0; v < resolution.height; ++v) {
      const double dy = v - p.y;
      for (int u = 0; u < resolution.width; ++u) {
        const double dx = u - p.x;
        stack.at(j, v, u) = std::exp(-(dx * dx + dy * dy) / denom);
      }
    }
  }
  return stack;
}

KeypointEstimate decode_channel(std::span<const double> channel, Resolution res) {
  const auto it = std::max_element(channel.begin(), channel.end());
  const int idx = static_cast<int>(it - channel.begin());
  const int px = idx % res.width, py = idx / res.width;
  KeypointEstimate est{static_cast<double>(px), static_cast<double>(py), *it};
  // cells beyond the border count as 0
  auto val = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= res.width || y >= res.height) return 0.0;
    return channel[static_cast<std::size_t>(y) * res.width + x];
  };
  const double dx = val(px + 1, py) - val(px - 1, py);
  const double dy = val(px, py + 1) - val(px, py - 1);
  if (dx > 0) est.x += 0.25;
  else if (dx < 0) est.x -= 0.25;
  if (dy > 0) est.y += 0.25;
  else if (dy < 0) est.y -= 0.25;
  return est;
}

std::vector<KeypointEstimate> decode_heatmaps(const HeatmapStack& stack) {
  std::vector<KeypointEstimate> out;
  out.reserve(stack.joints);
  for (int j = 0; j < stack.joints; ++j) out.push_back(decode_channel(stack.channel(j), stack.resolution));
  return out;
}

namespace {

struct Tap {
  int lo, hi;
  double frac;  // weight of hi
};

std::vector<Tap> taps(int src, int dst) {
  std::vector<Tap> t(dst);
  for (int i = 0; i < dst; ++i) {
    const double s = dst == 1 ? 0.0 : static_cast<double>(i) * (src - 1) / (dst - 1);
    int lo = static_cast<int>(std::floor(s));
    lo = std::clamp(lo, 0, src - 2);
    t[i] = {lo, lo + 1, s - lo};
  }
  return t;
}

}  // namespace

std::vector<double> resample_bilinear(std::span<const double> map, int channels, int h, int w,
                                      Resolution target) {
  if (h < 2 || w < 2) throw std::invalid_argument("resample_bilinear: source must be at least 2x2");
  if (map.size() != static_cast<std::size_t>(channels) * h * w)
    throw std::invalid_argument("resample_bilinear: map size " + std::to_string(map.size()) +
                                " does not match " + std::to_string(channels) + "x" + std::to_string(h) +
                                "x" + std::to_string(w));
  const auto ty = taps(h, target.height), tx = taps(w, target.width);
  std::vector<double> out(static_cast<std::size_t>(channels) * target.cells());
  for (int c = 0; c < channels; ++c) {
    const double* src = map.data() + static_cast<std::size_t>(c) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(c) * target.cells();
    for (int y = 0; y < target.height; ++y) {
      const Tap a = ty[y];
      for (int x = 0; x < target.width; ++x) {
        const Tap b = tx[x];
        const double top = src[a.lo * w + b.lo] * (1 - b.frac) + src[a.lo * w + b.hi] * b.frac;
        const double bot = src[a.hi * w + b.lo] * (1 - b.frac) + src[a.hi * w + b.hi] * b.frac;
        dst[y * target.width + x] = top * (1 - a.frac) + bot * a.frac;
      }
    }
  }
  return out;
}

std::vector<double> bilinear_matrix(int h, int w, Resolution target) {
  if (h < 2 || w < 2) throw std::invalid_argument("bilinear_matrix: source must be at least 2x2");
  const auto ty = taps(h, target.height), tx = taps(w, target.width);
  const std::size_t cols = static_cast<std::size_t>(target.cells());
  std::vector<double> m(static_cast<std::size_t>(h) * w * cols, 0.0);
  for (int y = 0; y < target.height; ++y)
    for (int x = 0; x < target.width; ++x) {
      const std::size_t col = static_cast<std::size_t>(y) * target.width + x;
      const Tap a = ty[y], b = tx[x];
      m[(a.lo * w + b.lo) * cols + col] += (1 - a.frac) * (1 - b.frac);
      m[(a.lo * w + b.hi) * cols + col] += (1 - a.frac) * b.frac;
      m[(a.hi * w + b.lo) * cols + col] += a.frac * (1 - b.frac);
      m[(a.hi * w + b.hi) * cols + col] += a.frac * b.frac;
    }
  return m;
}

}  // namespace pomnet
