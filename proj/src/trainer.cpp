#include "pomnet/trainer.hpp"

#include "pomnet/checkpoint.hpp"
#include "pomnet/errors.hpp"
#include "pomnet/optimizer.hpp"
#include "pomnet/predictors.hpp"
#include "pomnet/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pomnet {

using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kInitTag = 0x494e4954;
constexpr std::uint64_t kTrainTag = 0x5452414e;
constexpr std::uint64_t kValTag = 0x56414c44;

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (epochs < 1) fail("epochs must be at least 1");
  if (episodes_per_epoch < 1) fail("episodes_per_epoch must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (!(lr_decay_factor > 0)) fail("lr_decay_factor must be positive");
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) fail("lr_decay_epochs must be strictly increasing");
    if (lr_decay_epochs[i] >= epochs) fail("lr_decay_epochs must be smaller than epochs");
  }
  if (shots < 1) fail("K must be at least 1");
  if (val_every < 0) fail("val_every must be non-negative");
  if (val_episodes < 1) fail("val_episodes must be at least 1");
  if (!(val_sigma > 0 && val_sigma <= 1)) fail("val_sigma must lie in (0, 1]");
}

std::string TrainConfig::to_json() const {
  ordered_json j;
  j["epochs"] = epochs;
  j["episodes_per_epoch"] = episodes_per_epoch;
  j["batch_size"] = batch_size;
  j["base_lr"] = base_lr;
  j["lr_decay_epochs"] = lr_decay_epochs;
  j["lr_decay_factor"] = lr_decay_factor;
  j["K"] = shots;
  j["seed"] = seed;
  j["augment"] = augment;
  j["checkpoint_dir"] = checkpoint_dir.string();
  j["metric_log"] = metric_log.string();
  j["val_every"] = val_every;
  j["val_episodes"] = val_episodes;
  j["val_sigma"] = val_sigma;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = ordered_json::parse(text);
    c.epochs = j.value("epochs", c.epochs);
    c.episodes_per_epoch = j.value("episodes_per_epoch", c.episodes_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.lr_decay_epochs = j.value("lr_decay_epochs", c.lr_decay_epochs);
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.shots = j.value("K", c.shots);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir.string());
    c.metric_log = j.value("metric_log", c.metric_log.string());
    c.val_every = j.value("val_every", c.val_every);
    c.val_episodes = j.value("val_episodes", c.val_episodes);
    c.val_sigma = j.value("val_sigma", c.val_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::full() {
  TrainConfig c;
  c.epochs = 210;
  c.lr_decay_epochs = {170, 200};
  c.batch_size = 16;
  return c;
}

ag::Var<float> PomNetLearner::episode_loss(ag::Graph<float>& g, const EpisodeInput& input) const {
  const ProcessedSample& q = *input.query;
  const auto supervised = q.valid_mask();
  if (std::none_of(supervised.begin(), supervised.end(), [](std::uint8_t v) { return v != 0; })) return {};
  const bool any_support = std::any_of(input.supports.begin(), input.supports.end(), [](const ProcessedSample* s) {
    const auto v = s->valid_mask();
    return std::any_of(v.begin(), v.end(), [](std::uint8_t x) { return x != 0; });
  });
  if (!any_support) return {};
  const ModelConfig& c = model_->config();
  const HeatmapStack target = encode_heatmaps(q.keypoints_hm, supervised, c.gaussian(), c.heatmap_resolution());
  ag::Var<float> pred = model_->forward(g, input);
  return ag::masked_mse(pred, std::vector<float>(target.values.begin(), target.values.end()), supervised);
}

std::unique_ptr<Predictor> PomNetLearner::predictor() const {
  return std::make_unique<PomNetPredictor>(model_, "training");
}

std::string ProtoNetLearner::meta_json() const { return ordered_json{{"cosine", model_->cosine()}}.dump(); }

ag::Var<float> ProtoNetLearner::episode_loss(ag::Graph<float>& g, const EpisodeInput& input) const {
  return model_->training_loss(g, input);
}

std::unique_ptr<Predictor> ProtoNetLearner::predictor() const {
  return std::make_unique<ProtoNetPredictor>(model_, "training");
}

std::unique_ptr<EpisodicLearner> make_learner(const std::string& kind, const ModelConfig& config, std::uint64_t seed,
                                              bool cosine) {
  const std::uint64_t init = derive_seed(seed, {kInitTag});
  if (kind == "pomnet") return std::make_unique<PomNetLearner>(std::make_shared<PomNet<float>>(config, init));
  if (kind == "protonet")
    return std::make_unique<ProtoNetLearner>(std::make_shared<ProtoNet<float>>(config, init, cosine));
  throw ConfigError("unknown model kind '" + kind + "' (expected pomnet or protonet)");
}

std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
  return dir / name;
}

namespace {

struct PreparedEpisode {
  Episode episode;
  std::vector<ProcessedSample> supports;
  ProcessedSample query;
};

std::string describe(const Episode& ep) {
  std::string s = "category " + std::to_string(ep.category_id) + " query " + std::to_string(ep.query->id) + " supports [";
  for (std::size_t i = 0; i < ep.supports.size(); ++i) s += (i ? "," : "") + std::to_string(ep.supports[i]->id);
  return s + "]";
}

// Keeps log records from epochs <= last_epoch.
void truncate_log(const std::filesystem::path& path, int last_epoch) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (ordered_json::parse(line).at("epoch").get<int>() <= last_epoch) kept += line + "\n";
  }
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

}  // namespace

TrainResult train(EpisodicLearner& learner, const AnnotationSet& pool, const DatasetSplit& split,
                  const TrainConfig& config, const std::optional<std::filesystem::path>& resume_from) {
  config.validate();
  split.validate();
  if (split.train.empty()) throw ConfigError("split has no training categories");
  std::vector<int> categories = split.train;
  std::sort(categories.begin(), categories.end());
  for (int c : categories) {
    const auto n = pool.instances_of(c).size();
    if (n < static_cast<std::size_t>(config.shots) + 1)
      throw SamplingError("training category " + std::to_string(c) + " has " + std::to_string(n) +
                          " instances, need at least " + std::to_string(config.shots + 1));
  }
  const SampleGeometry geometry = learner.config().geometry();
  ParamStore<float>& params = learner.params();
  Adam adam(params);

  int start_epoch = 0;
  long long step = 0;
  if (resume_from) {
    const Checkpoint ckpt = load_checkpoint(*resume_from);
    if (ckpt.kind != learner.kind() || ckpt.config.hash() != learner.config().hash())
      throw CheckpointError("checkpoint " + resume_from->string() + " does not match the model being trained");
    restore_params(params, ckpt.params);
    adam.load_state(ckpt.optimizer);
    const auto meta = ordered_json::parse(ckpt.meta_json);
    start_epoch = meta.at("epoch").get<int>() + 1;
    step = meta.at("step").get<long long>();
  }

  std::filesystem::path log_path = config.metric_log;
  if (log_path.empty() && !config.checkpoint_dir.empty()) log_path = config.checkpoint_dir / "metrics.ndjson";
  std::ofstream log;
  if (!log_path.empty()) {
    if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
    if (resume_from) truncate_log(log_path, start_epoch - 1);
    log.open(log_path, resume_from ? std::ios::app : std::ios::trunc);
    if (!log) throw TrainingError("cannot open metric log " + log_path.string());
  }

  TrainResult result;
  result.epochs_completed = start_epoch;
  result.steps = step;
  const int steps_per_epoch = config.steps_per_epoch();
  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const double lr = step_decay_lr(config.base_lr, config.lr_decay_epochs, config.lr_decay_factor, epoch);
    double epoch_loss = 0.0;
    int epoch_steps = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      const int in_batch = std::min(config.batch_size, config.episodes_per_epoch - s * config.batch_size);
      std::vector<PreparedEpisode> batch;
      for (int b = 0; b < in_batch; ++b) {
        const std::uint64_t es = derive_seed(config.seed, {kTrainTag, static_cast<std::uint64_t>(epoch),
                                                           static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(b)});
        Rng rng(es);
        const int category = categories[rng.index(categories.size())];
        PreparedEpisode pe{sample_episode(split, pool, category, config.shots, derive_seed(es, {1})), {}, {}};
        for (int k = 0; k < pe.episode.shots(); ++k) {
          const auto* inst = pe.episode.supports[k];
          pe.supports.push_back(preprocess(*inst, *pool.image_for(*inst), geometry, config.augment,
                                           derive_seed(es, {2, static_cast<std::uint64_t>(k)})));
        }
        pe.query = preprocess(*pe.episode.query, *pool.image_for(*pe.episode.query), geometry, config.augment,
                              derive_seed(es, {3}));
        batch.push_back(std::move(pe));
      }

      ag::Graph<float> g;
      std::vector<ag::Var<float>> losses;
      for (const auto& pe : batch) {
        EpisodeInput input;
        for (const auto& sp : pe.supports) input.supports.push_back(&sp);
        input.query = &pe.query;
        ag::Var<float> l = learner.episode_loss(g, input);
        if (!l.valid()) continue;
        if (!std::isfinite(l.value()[0]))
          throw TrainingError("non-finite loss at step " + std::to_string(step + 1) + " (epoch " +
                              std::to_string(epoch) + "), episode " + describe(pe.episode));
        losses.push_back(l);
      }
      ++step;
      ordered_json rec;
      rec["step"] = step;
      rec["epoch"] = epoch;
      if (losses.empty()) {
        rec["loss"] = nullptr;
        rec["skipped"] = true;
      } else {
        ag::Var<float> total = ag::mean_of(losses);
        params.zero_grad();
        g.backward(total);
        adam.step(lr);
        if (!params.all_finite())
          throw TrainingError("non-finite parameters after step " + std::to_string(step) + " (epoch " +
                              std::to_string(epoch) + ")");
        const double value = total.value()[0];
        rec["loss"] = value;
        epoch_loss += value;
        ++epoch_steps;
      }
      rec["lr"] = lr;
      const bool last = s + 1 == steps_per_epoch;
      if (last && config.val_every > 0 && (epoch + 1) % config.val_every == 0 && !split.val.empty()) {
        PckConfig pc;
        pc.sigma = config.val_sigma;
        pc.episodes_per_category = config.val_episodes;
        pc.shots = config.shots;
        pc.seed = derive_seed(config.seed, {kValTag});
        rec["val_pck"] = evaluate(*learner.predictor(), pool, split, split.val, pc).mean;
      }
      if (log) log << rec.dump() << "\n" << std::flush;
    }
    result.epochs_completed = epoch + 1;
    result.steps = step;
    result.last_epoch_loss = epoch_steps > 0 ? epoch_loss / epoch_steps : 0.0;

    if (!config.checkpoint_dir.empty()) {
      Checkpoint ckpt;
      ckpt.kind = learner.kind();
      ckpt.config = learner.config();
      ckpt.params = capture_params(params);
      ckpt.optimizer = adam.state();
      auto meta = ordered_json::parse(learner.meta_json());
      meta["epoch"] = epoch;
      meta["step"] = step;
      meta["train_config"] = ordered_json::parse(config.to_json());
      ckpt.meta_json = meta.dump();
      const auto path = epoch_checkpoint_path(config.checkpoint_dir, epoch);
      save_checkpoint(ckpt, path);
      std::filesystem::copy_file(path, config.checkpoint_dir / "last.ckpt",
                                 std::filesystem::copy_options::overwrite_existing);
      result.checkpoints.push_back(path);
    }
  }
  return result;
}

}  // namespace pomnet
