#include "pomnet/evaluate.hpp"

#include "pomnet/errors.hpp"
#include "pomnet/random.hpp"

#include <json.hpp>

namespace pomnet {

void PckConfig::validate() const {
  if (!(sigma > 0 && sigma <= 1)) throw ConfigError("pck sigma must lie in (0, 1]");
  if (episodes_per_category < 1) throw ConfigError("episodes_per_category must be at least 1");
  if (shots < 1) throw ConfigError("K must be at least 1");
}

std::string PckResult::to_json() const {
  nlohmann::ordered_json j;
  j["sigma"] = sigma;
  j["K"] = shots;
  j["per_category"] = nlohmann::ordered_json::object();
  for (const auto& [id, c] : per_category)
    j["per_category"][std::to_string(id)] = {{"pck", c.pck}, {"count", c.count}, {"correct", c.correct}};
  j["mean"] = mean;
  j["seed"] = seed;
  j["episodes_per_category"] = episodes_per_category;
  j["failed_episodes"] = failed_episodes;
  j["predictor"] = nlohmann::ordered_json::parse(predictor_json);
  return j.dump(2);
}

std::uint64_t evaluation_episode_seed(std::uint64_t seed, int category, int episode) {
  return derive_seed(seed, {0x4556414cULL, static_cast<std::uint64_t>(category), static_cast<std::uint64_t>(episode)});
}

PckResult evaluate(const Predictor& predictor, const AnnotationSet& pool, const DatasetSplit& split,
                   const std::vector<int>& categories, const PckConfig& config) {
  config.validate();
  const SampleGeometry geometry = predictor.geometry();
  PckResult result;
  result.sigma = config.sigma;
  result.shots = config.shots;
  result.seed = config.seed;
  result.episodes_per_category = config.episodes_per_category;
  result.predictor_json = predictor.describe_json();

  long long attempted = 0;
  for (int category : categories) {
    PckCount total;
    for (int e = 0; e < config.episodes_per_category; ++e) {
      const Episode ep = sample_episode(split, pool, category, config.shots, evaluation_episode_seed(config.seed, category, e));
      ++attempted;
      try {
        std::vector<ProcessedSample> supports;
        for (const auto* s : ep.supports) supports.push_back(preprocess(*s, *pool.image_for(*s), geometry, false, 0));
        const ProcessedSample query = preprocess(*ep.query, *pool.image_for(*ep.query), geometry, false, 0);
        const auto pred = predictor.predict(ep, supports, query);
        total += pck(pred, ep.query->keypoints, ep.query->effective_bbox(), config.sigma);
      } catch (const std::exception&) {
        ++result.failed_episodes;
      }
    }
    CategoryPck c;
    c.correct = total.correct;
    c.count = total.evaluated;
    c.pck = total.evaluated > 0 ? static_cast<double>(total.correct) / static_cast<double>(total.evaluated) : 0.0;
    result.per_category[category] = c;
  }
  if (result.failed_episodes * 100 > attempted)
    throw EvaluationError(std::to_string(result.failed_episodes) + " of " + std::to_string(attempted) +
                          " episodes failed (limit 1%)");
  double sum = 0.0;
  for (const auto& [id, c] : result.per_category) sum += c.pck;
  result.mean = result.per_category.empty() ? 0.0 : sum / static_cast<double>(result.per_category.size());
  return result;
}

PckResult evaluate(const Predictor& predictor, const AnnotationSet& pool, const DatasetSplit& split,
                   const PckConfig& config) {
  return evaluate(predictor, pool, split, split.test, config);
}

}  // namespace pomnet
