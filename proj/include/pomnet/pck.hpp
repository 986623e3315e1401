#pragma once

#include "pomnet/annotations.hpp"

#include <optional>
#include <span>

namespace pomnet {

struct PckCount {
  long long correct = 0;
  long long evaluated = 0;

  PckCount& operator+=(const PckCount& o) {
    correct += o.correct;
    evaluated += o.evaluated;
    return *this;
  }
  bool operator==(const PckCount&) const = default;
};

// Keypoints with v > 0 are evaluated; one is correct iff
// |pred - gt| / max(w, h) <= sigma. A missing prediction is incorrect.
PckCount pck(std::span<const std::optional<Point2>> pred, std::span<const Keypoint> gt, const BBox& bbox, double sigma);
PckCount pck(std::span<const Point2> pred, std::span<const Keypoint> gt, const BBox& bbox, double sigma);

}  // namespace pomnet
