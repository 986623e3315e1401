#pragma once

#include "pomnet/model_config.hpp"
#include "pomnet/params.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace pomnet {

struct NamedTensor {
  std::string name;
  ag::Shape shape;
  std::vector<float> data;
};

// One archive: model config (verified by hash on load), parameters, optional
// optimizer state, and free-form metadata as a JSON object.
struct Checkpoint {
  std::string kind = "pomnet";  // or "protonet"
  ModelConfig config;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> optimizer;
  std::string meta_json = "{}";
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<NamedTensor> capture_params(const ParamStore<float>& store);
// Names and shapes must match the store exactly.
void restore_params(ParamStore<float>& store, const std::vector<NamedTensor>& tensors);

// Short identifier derived from the config hash and parameter bytes.
std::string checkpoint_id(const Checkpoint& ckpt);

}  // namespace pomnet
