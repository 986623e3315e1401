#pragma once

#include "pomnet/heatmap.hpp"
#include "pomnet/preprocess.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace pomnet {

enum class BackboneKind { Plain, ResNet50 };

struct ModelConfig {
  std::string name = "tiny";
  int input_size = 64;
  BackboneKind backbone = BackboneKind::Plain;
  // Plain: one 3x3 conv + ReLU per stage. ResNet50: stage widths are the
  // bottleneck output channels (x4 expansion already applied).
  std::vector<int> channels = {16, 32, 64, 128};
  std::vector<int> strides = {2, 2, 2, 1};
  std::vector<int> blocks = {3, 4, 6, 3};  // ResNet50 only
  int norm_groups = 4;
  int embed_dim = 16;
  int slot_count = 8;
  int kim_blocks = 1;
  int attention_heads = 4;
  int ffn_dim = 32;
  int decoder_channels = 32;
  int decoder_deconv_count = 1;
  double heatmap_sigma = 1.5;
  int prototype_stage = 3;  // 1-based stage feeding the ProtoNet baseline

  int feature_stride() const;
  int feature_size() const { return input_size / feature_stride(); }
  int feature_channels() const { return channels.back(); }
  int heatmap_size() const { return input_size / 4; }
  Resolution heatmap_resolution() const { return {heatmap_size(), heatmap_size()}; }
  int stage_stride(int stage) const;  // 1-based, cumulative
  SampleGeometry geometry() const;
  GaussianSpec gaussian() const { return {heatmap_sigma}; }

  // Throws ConfigError naming the violated constraint.
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  // FNV-1a over the canonical JSON.
  std::uint64_t hash() const;

  static ModelConfig tiny();   // S=64, L=8, D=16, 1 block
  static ModelConfig desk();   // tiny with room for 12-keypoint families
  static ModelConfig full();   // ResNet-50, S=256, L=100, D=256, 3 blocks
  static ModelConfig preset(const std::string& name);
};

}  // namespace pomnet
