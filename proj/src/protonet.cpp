#include "pomnet/protonet.hpp"

#include "pomnet/errors.hpp"

#include <algorithm>
#include <cmath>

namespace pomnet {

using ag::Var;

template <typename T>
ProtoNet<T>::ProtoNet(const ModelConfig& config, std::uint64_t init_seed, bool cosine)
    : config_(config), cosine_(cosine), store_(std::make_unique<ParamStore<T>>()) {
  config_.validate();
  Rng rng(init_seed);
  ModelConfig trunk = config_;
  trunk.channels.resize(config_.prototype_stage);
  if (trunk.backbone == BackboneKind::Plain) trunk.strides.resize(config_.prototype_stage);
  backbone_ = std::make_unique<Backbone<T>>(trunk, "proto", *store_, rng);
  feature_size_ = config_.input_size / config_.stage_stride(config_.prototype_stage);
  upsample_ = bilinear_matrix(feature_size_, feature_size_, config_.heatmap_resolution());
}

template <typename T>
Var<T> ProtoNet<T>::stage_features(ag::Graph<T>& g, const ProcessedSample& sample) const {
  const int S = config_.input_size;
  if (sample.size != S) throw ag::ShapeError("image of size " + std::to_string(sample.size) + " given to a model with input size " + std::to_string(S));
  Var<T> image = g.constant({1, 3, S, S}, std::vector<T>(sample.image.begin(), sample.image.end()));
  return backbone_->forward(g, image, config_.prototype_stage).back();
}

template <typename T>
PrototypeSet<T> ProtoNet<T>::build_prototypes(ag::Graph<T>& g, const std::vector<const ProcessedSample*>& supports) const {
  if (supports.empty()) throw ContractViolation("build_prototypes: no supports");
  std::vector<Var<T>> sets;
  std::vector<std::vector<std::uint8_t>> valid;
  const int J = supports.front()->num_keypoints();
  PrototypeSet<T> out;
  out.valid.assign(J, 0);
  for (const ProcessedSample* s : supports) {
    if (s->num_keypoints() != J) throw ContractViolation("build_prototypes: supports disagree on keypoint count");
    const HeatmapStack hm = encode_heatmaps(s->keypoints_hm, s->valid_mask(), config_.gaussian(), config_.heatmap_resolution());
    KeypointRows<T> rows = heatmap_pool(g, stage_features(g, *s), hm, upsample_);
    for (int j = 0; j < J; ++j) out.valid[j] |= rows.valid[j] ? 1 : 0;
    sets.push_back(rows.rows);
    valid.push_back(std::move(rows.valid));
  }
  out.vectors = sets.size() == 1 ? sets.front() : ag::masked_mean_rows(sets, valid);
  return out;
}

template <typename T>
Var<T> ProtoNet<T>::similarity(const PrototypeSet<T>& prototypes, Var<T> query_features) const {
  const int C = query_features.dim(1), P = query_features.dim(2) * query_features.dim(3);
  Var<T> cells = ag::transpose(ag::reshape(query_features, {C, P}));
  if (!cosine_) return ag::neg_l2_distance(prototypes.vectors, cells);
  Var<T> sim = ag::matmul(ag::l2_normalize_rows(prototypes.vectors), ag::l2_normalize_rows(cells), false, true);
  return ag::scale(sim, T(kCosineScale));
}

template <typename T>
std::vector<std::optional<KeypointEstimate>> ProtoNet<T>::match_prototypes(const PrototypeSet<T>& prototypes,
                                                                           Var<T> query_features) const {
  Var<T> sim = similarity(prototypes, query_features);
  const int J = sim.dim(0), P = sim.dim(1), h = query_features.dim(2), w = query_features.dim(3);
  const int up = 4;
  const Resolution fine{up * h, up * w};
  const Resolution hm = config_.heatmap_resolution();
  auto values = sim.value();
  std::vector<std::optional<KeypointEstimate>> out(J);
  for (int j = 0; j < J; ++j) {
    if (!prototypes.valid[j]) continue;
    std::vector<double> map(values.begin() + static_cast<std::ptrdiff_t>(j) * P,
                            values.begin() + static_cast<std::ptrdiff_t>(j + 1) * P);
    const double peak = *std::max_element(map.begin(), map.end());
    double z = 0.0;
    for (double s : map) z += std::exp(s - peak);
    const auto dense = resample_bilinear(map, 1, h, w, fine);
    const auto best = static_cast<int>(std::max_element(dense.begin(), dense.end()) - dense.begin());
    KeypointEstimate e;
    e.x = (best % fine.width) * static_cast<double>(hm.width - 1) / (fine.width - 1);
    e.y = (best / fine.width) * static_cast<double>(hm.height - 1) / (fine.height - 1);
    e.confidence = 1.0 / z;
    out[j] = e;
  }
  return out;
}

template <typename T>
std::vector<std::optional<KeypointEstimate>> ProtoNet<T>::predict(const EpisodeInput& input) const {
  ag::Graph<T> g(false);
  PrototypeSet<T> protos = build_prototypes(g, input.supports);
  return match_prototypes(protos, stage_features(g, *input.query));
}

template <typename T>
int ProtoNet<T>::nearest_cell(Point2 p) const {
  const Resolution hm = config_.heatmap_resolution();
  const int n = feature_size_;
  auto axis = [n](double v, int size) {
    const int i = static_cast<int>(std::lround(v * (n - 1) / (size - 1)));
    return std::clamp(i, 0, n - 1);
  };
  return axis(p.y, hm.height) * n + axis(p.x, hm.width);
}

template <typename T>
Var<T> ProtoNet<T>::training_loss(ag::Graph<T>& g, const EpisodeInput& input) const {
  PrototypeSet<T> protos = build_prototypes(g, input.supports);
  const ProcessedSample& q = *input.query;
  if (q.num_keypoints() != static_cast<int>(protos.valid.size()))
    throw ContractViolation("query and supports disagree on keypoint count");
  const auto qvalid = q.valid_mask();
  std::vector<int> target(q.num_keypoints(), 0);
  std::vector<std::uint8_t> mask(q.num_keypoints(), 0);
  bool any = false;
  for (int j = 0; j < q.num_keypoints(); ++j) {
    target[j] = nearest_cell(q.keypoints_hm[j]);
    mask[j] = qvalid[j] && protos.valid[j];
    any = any || mask[j];
  }
  if (!any) return {};
  return ag::softmax_cross_entropy(similarity(protos, stage_features(g, q)), target, mask);
}

template class ProtoNet<float>;
template class ProtoNet<double>;

}  // namespace pomnet
