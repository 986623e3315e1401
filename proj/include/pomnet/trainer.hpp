#pragma once

#include "pomnet/annotations.hpp"
#include "pomnet/evaluate.hpp"
#include "pomnet/pomnet.hpp"
#include "pomnet/protonet.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace pomnet {

struct TrainConfig {
  int epochs = 40;
  int episodes_per_epoch = 500;
  int batch_size = 8;
  double base_lr = 1e-3;
  std::vector<int> lr_decay_epochs = {30, 36};
  double lr_decay_factor = 0.1;
  int shots = 1;
  std::uint64_t seed = 0;
  bool augment = true;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::filesystem::path metric_log;      // empty: checkpoint_dir / metrics.ndjson
  int val_every = 1;                     // epochs; 0 disables
  int val_episodes = 20;                 // per val category
  double val_sigma = 0.2;

  int steps_per_epoch() const { return (episodes_per_epoch + batch_size - 1) / batch_size; }
  void validate() const;
  std::string to_json() const;
  // Missing keys keep the defaults above.
  static TrainConfig from_json(const std::string& text);
  static TrainConfig desk() { return {}; }
  static TrainConfig full();  // 210 epochs, decay at 170 and 200
};

// A trainable model seen by the episodic loop.
class EpisodicLearner {
 public:
  virtual ~EpisodicLearner() = default;
  virtual std::string kind() const = 0;
  virtual const ModelConfig& config() const = 0;
  virtual ParamStore<float>& params() = 0;
  // Extra checkpoint metadata (JSON object).
  virtual std::string meta_json() const { return "{}"; }
  // Scalar loss of one episode; an invalid Var if nothing is supervised.
  virtual ag::Var<float> episode_loss(ag::Graph<float>& g, const EpisodeInput& input) const = 0;
  // Predictor sharing the live parameters.
  virtual std::unique_ptr<Predictor> predictor() const = 0;
};

class PomNetLearner : public EpisodicLearner {
 public:
  explicit PomNetLearner(std::shared_ptr<PomNet<float>> model) : model_(std::move(model)) {}
  std::string kind() const override { return "pomnet"; }
  const ModelConfig& config() const override { return model_->config(); }
  ParamStore<float>& params() override { return model_->params(); }
  ag::Var<float> episode_loss(ag::Graph<float>& g, const EpisodeInput& input) const override;
  std::unique_ptr<Predictor> predictor() const override;
  const std::shared_ptr<PomNet<float>>& model() const { return model_; }

 private:
  std::shared_ptr<PomNet<float>> model_;
};

class ProtoNetLearner : public EpisodicLearner {
 public:
  explicit ProtoNetLearner(std::shared_ptr<ProtoNet<float>> model) : model_(std::move(model)) {}
  std::string kind() const override { return "protonet"; }
  const ModelConfig& config() const override { return model_->config(); }
  ParamStore<float>& params() override { return model_->params(); }
  std::string meta_json() const override;
  ag::Var<float> episode_loss(ag::Graph<float>& g, const EpisodeInput& input) const override;
  std::unique_ptr<Predictor> predictor() const override;
  const std::shared_ptr<ProtoNet<float>>& model() const { return model_; }

 private:
  std::shared_ptr<ProtoNet<float>> model_;
};

// "pomnet" or "protonet"; parameters initialised from derive_seed(seed, init).
std::unique_ptr<EpisodicLearner> make_learner(const std::string& kind, const ModelConfig& config, std::uint64_t seed,
                                              bool cosine = false);

struct TrainResult {
  int epochs_completed = 0;
  long long steps = 0;
  double last_epoch_loss = 0.0;  // mean step loss over the final epoch
  std::vector<std::filesystem::path> checkpoints;
};

// Episodic training with Adam and step decay. Episode draws depend only on
// (seed, epoch, step, slot), so resuming from an epoch checkpoint continues
// the uninterrupted run bit for bit. Throws TrainingError on a non-finite
// loss.
TrainResult train(EpisodicLearner& learner, const AnnotationSet& pool, const DatasetSplit& split,
                  const TrainConfig& config, const std::optional<std::filesystem::path>& resume_from = std::nullopt);

std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& dir, int epoch);

}  // namespace pomnet
