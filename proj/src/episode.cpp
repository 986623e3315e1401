#include "pomnet/episode.hpp"

#include "pomnet/errors.hpp"
#include "pomnet/random.hpp"

namespace pomnet {

Episode sample_episode(const DatasetSplit& split, const AnnotationSet& pool, int category, int shots,
                       std::uint64_t seed) {
  if (shots < 1) throw SamplingError("episode needs at least one support, got K=" + std::to_string(shots));
  if (!split.contains(category))
    throw SamplingError("category " + std::to_string(category) + " is not part of the split");
  auto candidates = pool.instances_of(category);
  if (static_cast<int>(candidates.size()) < shots + 1)
    throw SamplingError("category " + std::to_string(category) + " has " + std::to_string(candidates.size()) +
                        " instances, episode with K=" + std::to_string(shots) + " needs " +
                        std::to_string(shots + 1));
  Rng rng(seed);
  // partial Fisher-Yates
  for (int i = 0; i <= shots; ++i) {
    const auto j = i + static_cast<int>(rng.index(candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
  }
  Episode ep;
  ep.category_id = category;
  ep.query = candidates[0];
  ep.supports.assign(candidates.begin() + 1, candidates.begin() + 1 + shots);
  return ep;
}

}  // namespace pomnet
