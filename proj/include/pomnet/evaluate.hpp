#pragma once

#include "pomnet/annotations.hpp"
#include "pomnet/episode.hpp"
#include "pomnet/pck.hpp"
#include "pomnet/preprocess.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pomnet {

// Anything that maps an episode to query keypoints in original pixels.
// Implementations must be safe to call concurrently.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string name() const = 0;
  // JSON object describing the predictor, copied into results.
  virtual std::string describe_json() const { return "{}"; }
  virtual SampleGeometry geometry() const { return {}; }
  // supports / query are preprocessed without augmentation.
  virtual std::vector<std::optional<Point2>> predict(const Episode& episode, const std::vector<ProcessedSample>& supports,
                                                     const ProcessedSample& query) const = 0;
};

struct PckConfig {
  double sigma = 0.2;
  int episodes_per_category = 100;
  int shots = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CategoryPck {
  double pck = 0.0;
  long long correct = 0;
  long long count = 0;
};

struct PckResult {
  double sigma = 0.2;
  int shots = 1;
  std::map<int, CategoryPck> per_category;
  double mean = 0.0;
  std::uint64_t seed = 0;
  int episodes_per_category = 0;
  int failed_episodes = 0;
  std::string predictor_json = "{}";

  std::string to_json() const;
};

// Samples episodes_per_category episodes for each category, preprocesses
// without augmentation and accumulates PCK against the original annotations.
// Failed episodes are skipped; more than 1% failures is an EvaluationError.
PckResult evaluate(const Predictor& predictor, const AnnotationSet& pool, const DatasetSplit& split,
                   const std::vector<int>& categories, const PckConfig& config);
// Over split.test.
PckResult evaluate(const Predictor& predictor, const AnnotationSet& pool, const DatasetSplit& split,
                   const PckConfig& config);

// Seeds used for episode e of a category; shared with the CLI predict path.
std::uint64_t evaluation_episode_seed(std::uint64_t seed, int category, int episode);

}  // namespace pomnet
