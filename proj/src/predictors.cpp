#include "pomnet/predictors.hpp"

#include "pomnet/errors.hpp"
#include "pomnet/random.hpp"

#include <json.hpp>

namespace pomnet {

using nlohmann::ordered_json;

std::string OraclePredictor::describe_json() const { return ordered_json{{"name", "oracle"}}.dump(); }

std::vector<std::optional<Point2>> OraclePredictor::predict(const Episode& episode, const std::vector<ProcessedSample>&,
                                                            const ProcessedSample&) const {
  std::vector<std::optional<Point2>> out;
  for (const auto& k : episode.query->keypoints) out.emplace_back(Point2{k.x, k.y});
  return out;
}

std::string RandomPredictor::describe_json() const {
  return ordered_json{{"name", "random"}, {"seed", seed_}}.dump();
}

std::vector<std::optional<Point2>> RandomPredictor::predict(const Episode& episode, const std::vector<ProcessedSample>&,
                                                            const ProcessedSample&) const {
  std::uint64_t s = derive_seed(seed_, {static_cast<std::uint64_t>(episode.query->id)});
  for (const auto* sup : episode.supports) s = derive_seed(s, {static_cast<std::uint64_t>(sup->id)});
  Rng rng(s);
  const BBox box = episode.query->effective_bbox();
  std::vector<std::optional<Point2>> out;
  for (std::size_t j = 0; j < episode.query->keypoints.size(); ++j) {
    const double x = rng.uniform(box.x, box.x + box.w);
    const double y = rng.uniform(box.y, box.y + box.h);
    out.emplace_back(Point2{x, y});
  }
  return out;
}

namespace {

std::vector<const ProcessedSample*> pointers(const std::vector<ProcessedSample>& v) {
  std::vector<const ProcessedSample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace

PomNetPredictor::PomNetPredictor(std::shared_ptr<const PomNet<float>> model, std::string model_id)
    : model_(std::move(model)), model_id_(std::move(model_id)) {}

std::string PomNetPredictor::describe_json() const {
  return ordered_json{{"name", "pomnet"}, {"model_id", model_id_}, {"config", model_->config().name}}.dump();
}

std::vector<std::optional<KeypointEstimate>> PomNetPredictor::estimate(const std::vector<ProcessedSample>& supports,
                                                                       const ProcessedSample& query) const {
  EpisodeInput input{pointers(supports), &query};
  const HeatmapStack stack = model_->predict(input);
  const auto decoded = decode_heatmaps(stack);
  std::vector<std::uint8_t> any(stack.joints, 0);
  for (const auto& s : supports) {
    const auto v = s.valid_mask();
    for (int j = 0; j < stack.joints; ++j) any[j] |= v[j];
  }
  std::vector<std::optional<KeypointEstimate>> out(stack.joints);
  for (int j = 0; j < stack.joints; ++j) {
    if (!any[j]) continue;
    const Point2 p = query.to_original({decoded[j].x, decoded[j].y});
    out[j] = KeypointEstimate{p.x, p.y, decoded[j].confidence};
  }
  return out;
}

std::vector<std::optional<Point2>> PomNetPredictor::predict(const Episode&, const std::vector<ProcessedSample>& supports,
                                                            const ProcessedSample& query) const {
  std::vector<std::optional<Point2>> out;
  for (const auto& e : estimate(supports, query)) {
    if (e) out.emplace_back(Point2{e->x, e->y});
    else out.emplace_back();
  }
  return out;
}

ProtoNetPredictor::ProtoNetPredictor(std::shared_ptr<const ProtoNet<float>> model, std::string model_id)
    : model_(std::move(model)), model_id_(std::move(model_id)) {}

std::string ProtoNetPredictor::describe_json() const {
  return ordered_json{{"name", "protonet"},
                      {"model_id", model_id_},
                      {"similarity", model_->cosine() ? "cosine" : "negative_l2"},
                      {"feature_stage", model_->config().prototype_stage},
                      {"training_objective", "episodic cross-entropy over the similarity map (assumed)"},
                      {"backbone_training", "trained episodically from scratch (assumed)"}}
      .dump();
}

std::vector<std::optional<Point2>> ProtoNetPredictor::predict(const Episode&, const std::vector<ProcessedSample>& supports,
                                                              const ProcessedSample& query) const {
  EpisodeInput input{pointers(supports), &query};
  std::vector<std::optional<Point2>> out;
  for (const auto& e : model_->predict(input)) {
    if (e) out.emplace_back(query.to_original({e->x, e->y}));
    else out.emplace_back();
  }
  return out;
}

std::shared_ptr<PomNet<float>> pomnet_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "pomnet") throw CheckpointError("checkpoint holds a " + ckpt.kind + " model, not pomnet");
  auto model = std::make_shared<PomNet<float>>(ckpt.config, 0);
  restore_params(model->params(), ckpt.params);
  return model;
}

std::shared_ptr<ProtoNet<float>> protonet_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "protonet") throw CheckpointError("checkpoint holds a " + ckpt.kind + " model, not protonet");
  const auto meta = ordered_json::parse(ckpt.meta_json);
  const bool cosine = meta.value("cosine", false);
  auto model = std::make_shared<ProtoNet<float>>(ckpt.config, 0, cosine);
  restore_params(model->params(), ckpt.params);
  return model;
}

std::unique_ptr<Predictor> load_predictor(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const std::string id = checkpoint_id(ckpt);
  if (ckpt.kind == "pomnet") return std::make_unique<PomNetPredictor>(pomnet_from_checkpoint(ckpt), id);
  if (ckpt.kind == "protonet") return std::make_unique<ProtoNetPredictor>(protonet_from_checkpoint(ckpt), id);
  throw CheckpointError("unknown model kind " + ckpt.kind);
}

}  // namespace pomnet
