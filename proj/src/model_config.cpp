#include "pomnet/model_config.hpp"

#include "pomnet/errors.hpp"

#include <json.hpp>

namespace pomnet {

using nlohmann::ordered_json;

int ModelConfig::stage_stride(int stage) const {
  if (backbone == BackboneKind::ResNet50) {
    static constexpr int kStride[] = {4, 8, 16, 32};
    return kStride[stage - 1];
  }
  int s = 1;
  for (int i = 0; i < stage; ++i) s *= strides[i];
  return s;
}

int ModelConfig::feature_stride() const { return stage_stride(static_cast<int>(channels.size())); }

SampleGeometry ModelConfig::geometry() const {
  SampleGeometry g;
  g.input_size = input_size;
  g.heatmap_size = heatmap_size();
  return g;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (channels.empty()) fail("empty channel plan");
  if (backbone == BackboneKind::Plain && strides.size() != channels.size())
    fail("strides and channels differ in length");
  if (backbone == BackboneKind::ResNet50 && (channels.size() != 4 || blocks.size() != 4))
    fail("resnet50 needs 4 stages");
  if (input_size % 4 != 0) fail("input_size must be divisible by 4");
  if (input_size % feature_stride() != 0) fail("input_size must be divisible by the feature stride");
  if (slot_count < 1) fail("slot_count must be positive");
  if (kim_blocks < 1) fail("kim_blocks must be at least 1");
  if (attention_heads < 1 || embed_dim % attention_heads != 0) fail("embed_dim must be divisible by attention_heads");
  if (embed_dim % 4 != 0) fail("embed_dim must be divisible by 4 for the 2-D position embedding");
  if (feature_size() < 2) fail("feature map must be at least 2x2");
  if (feature_size() << decoder_deconv_count != heatmap_size())
    fail("feature size " + std::to_string(feature_size()) + " with " + std::to_string(decoder_deconv_count) +
         " deconvolutions does not reach heatmap size " + std::to_string(heatmap_size()));
  if (decoder_channels % norm_groups != 0) fail("decoder_channels must be divisible by norm_groups");
  if (!(heatmap_sigma > 0)) fail("heatmap_sigma must be positive");
  if (prototype_stage < 1 || prototype_stage > static_cast<int>(channels.size())) fail("prototype_stage out of range");
  if (input_size / stage_stride(prototype_stage) < 2) fail("prototype stage map smaller than 2x2");
}

std::string ModelConfig::to_json() const {
  ordered_json j;
  j["name"] = name;
  j["input_size"] = input_size;
  j["backbone"] = backbone == BackboneKind::Plain ? "plain" : "resnet50";
  j["channels"] = channels;
  j["strides"] = strides;
  j["blocks"] = blocks;
  j["norm_groups"] = norm_groups;
  j["embed_dim"] = embed_dim;
  j["slot_count"] = slot_count;
  j["kim_blocks"] = kim_blocks;
  j["attention_heads"] = attention_heads;
  j["ffn_dim"] = ffn_dim;
  j["decoder_channels"] = decoder_channels;
  j["decoder_deconv_count"] = decoder_deconv_count;
  j["heatmap_sigma"] = heatmap_sigma;
  j["prototype_stage"] = prototype_stage;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::parse_error& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  ModelConfig c = j.contains("preset") ? preset(j["preset"].get<std::string>()) : ModelConfig{};
  try {
    c.name = j.value("name", c.name);
    c.input_size = j.value("input_size", c.input_size);
    if (j.contains("backbone")) {
      const auto b = j["backbone"].get<std::string>();
      if (b == "plain") c.backbone = BackboneKind::Plain;
      else if (b == "resnet50") c.backbone = BackboneKind::ResNet50;
      else throw ConfigError("model config: unknown backbone '" + b + "'");
    }
    c.channels = j.value("channels", c.channels);
    c.strides = j.value("strides", c.strides);
    c.blocks = j.value("blocks", c.blocks);
    c.norm_groups = j.value("norm_groups", c.norm_groups);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.slot_count = j.value("slot_count", c.slot_count);
    c.kim_blocks = j.value("kim_blocks", c.kim_blocks);
    c.attention_heads = j.value("attention_heads", c.attention_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
    c.decoder_deconv_count = j.value("decoder_deconv_count", c.decoder_deconv_count);
    c.heatmap_sigma = j.value("heatmap_sigma", c.heatmap_sigma);
    c.prototype_stage = j.value("prototype_stage", c.prototype_stage);
  } catch (const ordered_json::type_error& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t ModelConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.name = "desk";
  c.slot_count = 16;
  return c;
}

ModelConfig ModelConfig::full() {
  ModelConfig c;
  c.name = "full";
  c.input_size = 256;
  c.backbone = BackboneKind::ResNet50;
  c.channels = {256, 512, 1024, 2048};
  c.strides = {};
  c.blocks = {3, 4, 6, 3};
  c.norm_groups = 32;
  c.embed_dim = 256;
  c.slot_count = 100;
  c.kim_blocks = 3;
  c.attention_heads = 8;
  c.ffn_dim = 1024;
  c.decoder_channels = 256;
  c.decoder_deconv_count = 3;
  c.heatmap_sigma = 2.0;
  c.prototype_stage = 3;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "tiny") return tiny();
  if (name == "desk") return desk();
  if (name == "full") return full();
  throw ConfigError("unknown model preset '" + name + "'");
}

}  // namespace pomnet
