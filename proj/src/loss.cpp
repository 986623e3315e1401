#include "pomnet/loss.hpp"

#include "pomnet/errors.hpp"

namespace pomnet {

LossReport mse_loss(const HeatmapStack& pred, const HeatmapStack& target, const std::vector<std::uint8_t>& supervised) {
  if (pred.joints != target.joints || !(pred.resolution == target.resolution))
    throw TrainingError("mse_loss: prediction and target stacks differ in shape");
  if (static_cast<int>(supervised.size()) != pred.joints)
    throw TrainingError("mse_loss: supervised flags do not match the keypoint count");
  LossReport r;
  r.per_keypoint.assign(pred.joints, 0.0);
  const double cells = pred.resolution.cells();
  double total = 0.0;
  for (int j = 0; j < pred.joints; ++j) {
    if (!supervised[j]) continue;
    auto p = pred.channel(j), t = target.channel(j);
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
    r.per_keypoint[j] = acc / cells;
    total += acc;
    ++r.supervised;
  }
  if (r.supervised == 0) throw TrainingError("mse_loss: no supervised keypoints");
  r.loss = total / (r.supervised * cells);
  return r;
}

}  // namespace pomnet
