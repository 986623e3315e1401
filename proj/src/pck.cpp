#include "pomnet/pck.hpp"

#include "pomnet/errors.hpp"

#include <cmath>

namespace pomnet {

PckCount pck(std::span<const std::optional<Point2>> pred, std::span<const Keypoint> gt, const BBox& bbox, double sigma) {
  if (pred.size() != gt.size()) throw ValidationError("pck: prediction and ground truth differ in length");
  if (!(bbox.w > 0 && bbox.h > 0)) throw ValidationError("pck: bounding box has no area");
  const double d = bbox.longest_side();
  PckCount c;
  for (std::size_t j = 0; j < gt.size(); ++j) {
    if (gt[j].visibility <= 0) continue;
    ++c.evaluated;
    if (!pred[j]) continue;
    const double dist = std::hypot(pred[j]->x - gt[j].x, pred[j]->y - gt[j].y);
    if (dist / d <= sigma) ++c.correct;
  }
  return c;
}

PckCount pck(std::span<const Point2> pred, std::span<const Keypoint> gt, const BBox& bbox, double sigma) {
  std::vector<std::optional<Point2>> wrapped(pred.begin(), pred.end());
  return pck(std::span<const std::optional<Point2>>(wrapped), gt, bbox, sigma);
}

}  // namespace pomnet
