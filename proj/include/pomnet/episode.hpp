#pragma once

#include "pomnet/annotations.hpp"

#include <cstdint>
#include <vector>

namespace pomnet {

// One few-shot task: K supports and one query of a single category.
struct Episode {
  int category_id = 0;
  std::vector<const InstanceAnnotation*> supports;
  const InstanceAnnotation* query = nullptr;

  int shots() const { return static_cast<int>(supports.size()); }
};

// Draws K + 1 distinct instances of `category` uniformly without replacement;
// the first draw is the query. Pure function of the seed.
Episode sample_episode(const DatasetSplit& split, const AnnotationSet& pool, int category, int shots,
                       std::uint64_t seed);

}  // namespace pomnet
