#pragma once

#include "pomnet/annotations.hpp"
#include "pomnet/heatmap.hpp"

#include <cstdint>
#include <vector>

namespace pomnet {

// p' = [a b; c d] p + t
struct Affine2 {
  double a = 1.0, b = 0.0, c = 0.0, d = 1.0;
  double tx = 0.0, ty = 0.0;

  Point2 apply(Point2 p) const { return {a * p.x + b * p.y + tx, c * p.x + d * p.y + ty}; }
  double determinant() const { return a * d - b * c; }
  Affine2 inverse() const;
};

struct SampleGeometry {
  int input_size = 64;    // S
  int heatmap_size = 16;  // S / 4
  double max_scale_jitter = 0.15;
  double max_rotation_deg = 15.0;
};

struct ProcessedSample {
  int size = 0;                          // S
  std::vector<float> image;              // 3 x S x S, normalized
  std::vector<Point2> keypoints_hm;      // heatmap coordinates
  std::vector<std::uint8_t> visibility;  // 0 / 1 / 2 after crop
  Affine2 transform;                     // original pixels -> crop pixels
  double heatmap_scale = 0.25;           // heatmap px per crop px

  int num_keypoints() const { return static_cast<int>(keypoints_hm.size()); }
  std::vector<std::uint8_t> valid_mask() const;
  // Heatmap coordinates back to original-image pixels.
  Point2 to_original(Point2 hm) const;
  Point2 to_heatmap(Point2 original) const;
};

// Crop-and-resize map for a bbox, optionally composed with a scale factor
// and a rotation (degrees) about the crop centre.
Affine2 crop_transform(const BBox& box, int input_size, double scale = 1.0, double rotation_deg = 0.0);

// Crops the instance by its bbox (whole image when absent) to S x S. With
// augment, a random scale in [1 - j, 1 + j] and rotation in [-r, r] drawn
// from the seed are composed in. Keypoints leaving the crop drop to v = 0.
ProcessedSample preprocess(const InstanceAnnotation& instance, const Image& image, const SampleGeometry& geometry,
                           bool augment, std::uint64_t seed);

}  // namespace pomnet
