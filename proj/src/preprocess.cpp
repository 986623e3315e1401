#include "pomnet/preprocess.hpp"

#include "pomnet/errors.hpp"
#include "pomnet/random.hpp"

#include <cmath>
#include <numbers>

namespace pomnet {

namespace {
constexpr float kMean[3] = {0.485f, 0.456f, 0.406f};
constexpr float kStd[3] = {0.229f, 0.224f, 0.225f};
}  // namespace

Affine2 Affine2::inverse() const {
  const double det = determinant();
  if (det == 0.0) throw PreprocessError("affine transform is singular");
  Affine2 inv;
  inv.a = d / det;
  inv.b = -b / det;
  inv.c = -c / det;
  inv.d = a / det;
  inv.tx = -(inv.a * tx + inv.b * ty);
  inv.ty = -(inv.c * tx + inv.d * ty);
  return inv;
}

std::vector<std::uint8_t> ProcessedSample::valid_mask() const {
  std::vector<std::uint8_t> m(visibility.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = visibility[i] > 0 ? 1 : 0;
  return m;
}

Point2 ProcessedSample::to_original(Point2 hm) const {
  return transform.inverse().apply({hm.x / heatmap_scale, hm.y / heatmap_scale});
}

Point2 ProcessedSample::to_heatmap(Point2 original) const {
  const Point2 p = transform.apply(original);
  return {p.x * heatmap_scale, p.y * heatmap_scale};
}

Affine2 crop_transform(const BBox& box, int input_size, double scale, double rotation_deg) {
  if (!(box.w > 0.0 && box.h > 0.0)) throw PreprocessError("degenerate bbox (zero area)");
  const double s = scale * input_size / box.longest_side();
  const double th = rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cx = box.x + box.w / 2.0, cy = box.y + box.h / 2.0;
  const double half = input_size / 2.0;
  Affine2 t;
  t.a = s * cs;
  t.b = -s * sn;
  t.c = s * sn;
  t.d = s * cs;
  t.tx = half - (t.a * cx + t.b * cy);
  t.ty = half - (t.c * cx + t.d * cy);
  return t;
}

ProcessedSample preprocess(const InstanceAnnotation& instance, const Image& image, const SampleGeometry& geo,
                           bool augment, std::uint64_t seed) {
  const BBox box = instance.effective_bbox();
  if (!(box.w > 0.0 && box.h > 0.0))
    throw PreprocessError("annotation " + std::to_string(instance.id) + ": degenerate bbox (zero area)");
  if (image.empty()) throw PreprocessError("annotation " + std::to_string(instance.id) + ": empty image");
  double scale = 1.0, rot = 0.0;
  if (augment) {
    Rng rng(seed);
    scale = rng.uniform(1.0 - geo.max_scale_jitter, 1.0 + geo.max_scale_jitter);
    rot = rng.uniform(-geo.max_rotation_deg, geo.max_rotation_deg);
  }
  const int S = geo.input_size;
  ProcessedSample out;
  out.size = S;
  out.transform = crop_transform(box, S, scale, rot);
  out.heatmap_scale = static_cast<double>(geo.heatmap_size) / S;
  const Affine2 inv = out.transform.inverse();

  out.image.assign(static_cast<std::size_t>(3) * S * S, 0.0f);
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  for (int v = 0; v < S; ++v) {
    for (int u = 0; u < S; ++u) {
      const Point2 src = inv.apply({static_cast<double>(u), static_cast<double>(v)});
      const int x0 = static_cast<int>(std::floor(src.x)), y0 = static_cast<int>(std::floor(src.y));
      const double fx = src.x - x0, fy = src.y - y0;
      float rgb[3] = {0, 0, 0};
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int x = x0 + dx, y = y0 + dy;
          if (x < 0 || y < 0 || x >= image.width || y >= image.height) continue;
          const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
          for (int ch = 0; ch < 3; ++ch) rgb[ch] += static_cast<float>(w * image.at(x, y, ch));
        }
      for (int ch = 0; ch < 3; ++ch)
        out.image[ch * plane + static_cast<std::size_t>(v) * S + u] = (rgb[ch] / 255.0f - kMean[ch]) / kStd[ch];
    }
  }

  for (const auto& kp : instance.keypoints) {
    const Point2 p = out.transform.apply({kp.x, kp.y});
    std::uint8_t vis = static_cast<std::uint8_t>(kp.visibility);
    if (p.x < 0.0 || p.y < 0.0 || p.x >= S || p.y >= S) vis = 0;
    out.keypoints_hm.push_back({p.x * out.heatmap_scale, p.y * out.heatmap_scale});
    out.visibility.push_back(vis);
  }
  return out;
}

}  // namespace pomnet
