#include "pomnet/pomnet.hpp"

#include "pomnet/errors.hpp"

#include <algorithm>
#include <cmath>

namespace pomnet {

using ag::Var;

template <typename T>
PomNet<T>::PomNet(const ModelConfig& config, std::uint64_t init_seed)
    : config_(config), store_(std::make_unique<ParamStore<T>>()) {
  config_.validate();
  Rng rng(init_seed);
  auto& s = *store_;
  const int C = config_.feature_channels(), D = config_.embed_dim, Cm = config_.decoder_channels;

  support_backbone_ = std::make_unique<Backbone<T>>(config_, "support", s, rng);
  query_backbone_ = std::make_unique<Backbone<T>>(config_, "query", s, rng);

  s.add_normal("reduce.weight", {D, C}, std::sqrt(2.0 / (C + D)), rng);
  s.add_constant("reduce.bias", {D}, T(0));
  s.add_normal("placeholder", {D}, 0.02, rng);
  s.add_normal("memory.weight", {D, C}, std::sqrt(2.0 / (C + D)), rng);
  s.add_constant("memory.bias", {D}, T(0));
  for (int b = 0; b < config_.kim_blocks; ++b) blocks_.emplace_back(config_, "kim" + std::to_string(b), s, rng);

  s.add_normal("head.kp.weight", {Cm, D, 3, 3}, std::sqrt(2.0 / ((C + D) * 9)), rng);
  s.add_normal("head.query.weight", {Cm, C, 3, 3}, std::sqrt(2.0 / ((C + D) * 9)), rng);
  s.add_constant("head.query.bias", {Cm}, T(0));
  s.add_constant("head.norm0.gamma", {Cm}, T(1));
  s.add_constant("head.norm0.beta", {Cm}, T(0));
  for (int i = 0; i < config_.decoder_deconv_count; ++i) {
    const std::string n = "head.deconv" + std::to_string(i);
    s.add_normal(n + ".weight", {Cm, Cm, 4, 4}, std::sqrt(2.0 / (Cm * 4)), rng);
    s.add_constant(n + ".gamma", {Cm}, T(1));
    s.add_constant(n + ".beta", {Cm}, T(0));
  }
  s.add_normal("head.out.weight", {1, Cm, 1, 1}, 0.001, rng);
  s.add_constant("head.out.bias", {1}, T(0));

  const int h = config_.feature_size();
  position_embedding_ = sine_position_embedding(h, h, D);
  upsample_ = bilinear_matrix(h, h, config_.heatmap_resolution());
}

template <typename T>
Var<T> PomNet<T>::image_var(ag::Graph<T>& g, const ProcessedSample& sample) const {
  const int S = config_.input_size;
  if (sample.size != S || sample.image.size() != static_cast<std::size_t>(3) * S * S)
    throw ag::ShapeError("image of size " + std::to_string(sample.size) + " given to a model with input size " +
                         std::to_string(S));
  return g.constant({1, 3, S, S}, std::vector<T>(sample.image.begin(), sample.image.end()));
}

template <typename T>
Var<T> PomNet<T>::extract_features(ag::Graph<T>& g, Var<T> image, Branch branch) const {
  const int S = config_.input_size;
  if (image.shape() != ag::Shape{1, 3, S, S})
    throw ag::ShapeError("extract_features: expected [1, 3, " + std::to_string(S) + ", " + std::to_string(S) +
                         "], got " + ag::shape_str(image.shape()));
  const auto& net = branch == Branch::Support ? *support_backbone_ : *query_backbone_;
  return net.forward(g, image, net.stage_count()).back();
}

template <typename T>
HeatmapStack PomNet<T>::support_heatmaps(const ProcessedSample& sample) const {
  const auto valid = sample.valid_mask();
  return encode_heatmaps(sample.keypoints_hm, valid, config_.gaussian(), config_.heatmap_resolution());
}

template <typename T>
KeypointRows<T> heatmap_pool(ag::Graph<T>& g, Var<T> features, const HeatmapStack& heatmaps,
                             const std::vector<double>& upsample) {
  if (features.rank() != 4 || features.dim(0) != 1) throw ag::ShapeError("pool: unexpected feature map " + ag::shape_str(features.shape()));
  const int C = features.dim(1), P = features.dim(2) * features.dim(3), J = heatmaps.joints;
  const int Q = heatmaps.resolution.cells();
  if (upsample.size() != static_cast<std::size_t>(P) * Q)
    throw ag::ShapeError("pool: heatmap resolution does not match the upsampling map");

  // weights[p, j] = sum_q M[p, q] * H_j(q) / sum_q H_j(q)
  std::vector<double> weights(static_cast<std::size_t>(P) * J, 0.0);
  KeypointRows<T> out;
  out.valid.assign(J, 0);
  for (int j = 0; j < J; ++j) {
    auto hj = heatmaps.channel(j);
    double mass = 0.0;
    for (double v : hj) mass += v;
    if (!(mass > 0.0)) continue;
    out.valid[j] = 1;
    for (int p = 0; p < P; ++p) {
      const double* row = upsample.data() + static_cast<std::size_t>(p) * Q;
      double acc = 0.0;
      for (int q = 0; q < Q; ++q) acc += row[q] * hj[q];
      weights[static_cast<std::size_t>(p) * J + j] = acc / mass;
    }
  }
  Var<T> wv = g.constant({P, J}, std::vector<T>(weights.begin(), weights.end()));
  out.rows = ag::matmul(wv, ag::reshape(features, {C, P}), true, true);
  return out;
}

template <typename T>
KeypointRows<T> PomNet<T>::pool_raw(ag::Graph<T>& g, Var<T> features, const HeatmapStack& heatmaps) const {
  if (features.rank() != 4 || features.dim(2) != config_.feature_size() || features.dim(3) != config_.feature_size())
    throw ag::ShapeError("pool: unexpected feature map " + ag::shape_str(features.shape()));
  if (!(heatmaps.resolution == config_.heatmap_resolution()))
    throw ag::ShapeError("pool: heatmap resolution does not match the model");
  return heatmap_pool(g, features, heatmaps, upsample_);
}

template <typename T>
KeypointRows<T> PomNet<T>::pool_keypoint_features(ag::Graph<T>& g, Var<T> features,
                                                  const HeatmapStack& heatmaps) const {
  KeypointRows<T> raw = pool_raw(g, features, heatmaps);
  Bound<T> p{g, *store_};
  raw.rows = ag::linear(raw.rows, p("reduce.weight"), p("reduce.bias"));
  return raw;
}

template <typename T>
KeypointSlots<T> PomNet<T>::aggregate_kshot(ag::Graph<T>& g, const std::vector<KeypointRows<T>>& per_support) const {
  if (per_support.empty()) throw ContractViolation("aggregate_kshot: no supports");
  const int J = per_support.front().rows.dim(0);
  const int L = config_.slot_count;
  if (J > L)
    throw ContractViolation("category has " + std::to_string(J) + " keypoints but the model has " +
                            std::to_string(L) + " slots");
  std::vector<Var<T>> sets;
  std::vector<std::vector<std::uint8_t>> valid;
  KeypointSlots<T> out;
  out.joints = J;
  out.mask.assign(L, 0);
  for (const auto& s : per_support) {
    if (s.rows.dim(0) != J) throw ContractViolation("aggregate_kshot: supports disagree on keypoint count");
    sets.push_back(s.rows);
    valid.push_back(s.valid);
    for (int j = 0; j < J; ++j) out.mask[j] |= s.valid[j] ? 1 : 0;
  }
  Var<T> mean = sets.size() == 1 ? sets.front() : ag::masked_mean_rows(sets, valid);
  std::vector<int> source(L, -1);
  for (int j = 0; j < J; ++j)
    if (out.mask[j]) source[j] = j;
  Bound<T> p{g, *store_};
  out.slots = ag::assemble_rows(mean, p("placeholder"), source);
  return out;
}

template <typename T>
Var<T> PomNet<T>::kim_forward(ag::Graph<T>& g, const KeypointSlots<T>& slots, Var<T> query_features) const {
  if (std::none_of(slots.mask.begin(), slots.mask.end(), [](std::uint8_t m) { return m != 0; }))
    throw ContractViolation("kim_forward: no valid keypoints in the support");
  const int C = query_features.dim(1), P = query_features.dim(2) * query_features.dim(3);
  Bound<T> p{g, *store_};
  Var<T> cells = ag::transpose(ag::reshape(query_features, {C, P}));
  Var<T> memory = ag::linear(cells, p("memory.weight"), p("memory.bias"));
  Var<T> keys = ag::add(memory, g.constant({P, config_.embed_dim},
                                           std::vector<T>(position_embedding_.begin(), position_embedding_.end())));
  Var<T> x = slots.slots;
  for (const auto& block : blocks_) x = block.forward(g, x, slots.mask, keys, memory);
  return x;
}

template <typename T>
Var<T> PomNet<T>::matching_head(ag::Graph<T>& g, Var<T> refined, int joints, Var<T> query_features) const {
  Bound<T> p{g, *store_};
  const int h = query_features.dim(2), w = query_features.dim(3), G = config_.norm_groups;
  Var<T> kp = ag::expand_spatial(ag::slice_rows(refined, 0, joints), h, w);
  // conv over [expanded ; F_Q] split into its two channel blocks
  Var<T> a = ag::conv2d(kp, p("head.kp.weight"), 1, 1);
  Var<T> b = ag::add_channel_bias(ag::conv2d(query_features, p("head.query.weight"), 1, 1), p("head.query.bias"));
  Var<T> x = ag::relu(ag::group_norm(ag::add_broadcast_batch(a, b), p("head.norm0.gamma"), p("head.norm0.beta"), G));
  for (int i = 0; i < config_.decoder_deconv_count; ++i) {
    const std::string n = "head.deconv" + std::to_string(i);
    x = ag::conv_transpose2d(x, p(n + ".weight"), 2, 1);
    x = ag::relu(ag::group_norm(x, p(n + ".gamma"), p(n + ".beta"), G));
  }
  x = ag::add_channel_bias(ag::conv2d(x, p("head.out.weight"), 1, 0), p("head.out.bias"));
  return ag::reshape(x, {joints, x.dim(2), x.dim(3)});
}

template <typename T>
Var<T> PomNet<T>::forward(ag::Graph<T>& g, const EpisodeInput& input) const {
  if (input.supports.empty() || input.query == nullptr) throw ContractViolation("forward: empty episode");
  std::vector<KeypointRows<T>> rows;
  for (const ProcessedSample* s : input.supports) {
    Var<T> f = extract_features(g, image_var(g, *s), Branch::Support);
    rows.push_back(pool_keypoint_features(g, f, support_heatmaps(*s)));
  }
  KeypointSlots<T> slots = aggregate_kshot(g, rows);
  Var<T> qf = extract_features(g, image_var(g, *input.query), Branch::Query);
  return matching_head(g, kim_forward(g, slots, qf), slots.joints, qf);
}

template <typename T>
HeatmapStack PomNet<T>::predict(const EpisodeInput& input) const {
  ag::Graph<T> g(false);
  Var<T> out = forward(g, input);
  HeatmapStack stack(out.dim(0), {out.dim(1), out.dim(2)});
  auto v = out.value();
  std::copy(v.begin(), v.end(), stack.values.begin());
  return stack;
}

template KeypointRows<float> heatmap_pool(ag::Graph<float>&, Var<float>, const HeatmapStack&, const std::vector<double>&);
template KeypointRows<double> heatmap_pool(ag::Graph<double>&, Var<double>, const HeatmapStack&,
                                           const std::vector<double>&);
template class PomNet<float>;
template class PomNet<double>;

}  // namespace pomnet
