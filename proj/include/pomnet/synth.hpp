#pragma once

#include "pomnet/annotations.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pomnet {

struct SynthFamily {
  std::string name;
  int instances = 0;
};

struct SynthConfig {
  std::vector<SynthFamily> families;
  int image_size = 96;
  int k_max = 5;  // every family needs at least k_max + 1 instances
  double max_rotation_deg = 25.0;
  double background_noise = 10.0;
  // Families held out as novel categories. When both are empty the last
  // max(1, n/3) families become test (n >= 2).
  std::vector<std::string> val_families;
  std::vector<std::string> test_families;

  static SynthConfig from_json(const std::string& text);
};

struct SynthDataset {
  AnnotationSet annotations;  // images attached in memory
  DatasetSplit split;
  std::vector<std::vector<std::uint8_t>> masks;  // per instance, coverage >= 0.5
};

// Names of every renderable family, in category-id order (id = index + 1).
const std::vector<std::string>& synth_family_names();
int synth_category_id(const std::string& family);
int synth_family_keypoints(const std::string& family);

SynthDataset generate_synthetic(const SynthConfig& config, std::uint64_t seed);
// Writes images/*.png, annotations.json and split.json under out_dir.
void write_synthetic(const SynthDataset& dataset, const std::filesystem::path& out_dir);

}  // namespace pomnet
