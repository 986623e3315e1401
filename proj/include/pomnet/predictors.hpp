#pragma once

#include "pomnet/checkpoint.hpp"
#include "pomnet/evaluate.hpp"
#include "pomnet/pomnet.hpp"
#include "pomnet/protonet.hpp"

#include <filesystem>
#include <memory>

namespace pomnet {

// Returns the query's ground truth.
class OraclePredictor : public Predictor {
 public:
  std::string name() const override { return "oracle"; }
  std::string describe_json() const override;
  std::vector<std::optional<Point2>> predict(const Episode& episode, const std::vector<ProcessedSample>& supports,
                                             const ProcessedSample& query) const override;
};

// Uniform over the query's bounding box, seeded per episode.
class RandomPredictor : public Predictor {
 public:
  explicit RandomPredictor(std::uint64_t seed) : seed_(seed) {}
  std::string name() const override { return "random"; }
  std::string describe_json() const override;
  std::vector<std::optional<Point2>> predict(const Episode& episode, const std::vector<ProcessedSample>& supports,
                                             const ProcessedSample& query) const override;

 private:
  std::uint64_t seed_;
};

class PomNetPredictor : public Predictor {
 public:
  PomNetPredictor(std::shared_ptr<const PomNet<float>> model, std::string model_id);
  std::string name() const override { return "pomnet"; }
  std::string describe_json() const override;
  SampleGeometry geometry() const override { return model_->config().geometry(); }
  std::vector<std::optional<Point2>> predict(const Episode& episode, const std::vector<ProcessedSample>& supports,
                                             const ProcessedSample& query) const override;
  // Original-pixel estimates with confidences; keypoints valid in no support
  // come back as nullopt.
  std::vector<std::optional<KeypointEstimate>> estimate(const std::vector<ProcessedSample>& supports,
                                                        const ProcessedSample& query) const;
  const PomNet<float>& model() const { return *model_; }

 private:
  std::shared_ptr<const PomNet<float>> model_;
  std::string model_id_;
};

class ProtoNetPredictor : public Predictor {
 public:
  ProtoNetPredictor(std::shared_ptr<const ProtoNet<float>> model, std::string model_id);
  std::string name() const override { return "protonet"; }
  std::string describe_json() const override;
  SampleGeometry geometry() const override { return model_->config().geometry(); }
  std::vector<std::optional<Point2>> predict(const Episode& episode, const std::vector<ProcessedSample>& supports,
                                             const ProcessedSample& query) const override;

 private:
  std::shared_ptr<const ProtoNet<float>> model_;
  std::string model_id_;
};

std::shared_ptr<PomNet<float>> pomnet_from_checkpoint(const Checkpoint& ckpt);
std::shared_ptr<ProtoNet<float>> protonet_from_checkpoint(const Checkpoint& ckpt);
// Dispatches on the checkpoint kind.
std::unique_ptr<Predictor> load_predictor(const std::filesystem::path& checkpoint);

}  // namespace pomnet
