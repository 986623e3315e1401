#include "pomnet/checkpoint.hpp"

#include "pomnet/errors.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pomnet {

using nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'P', 'O', 'M', 'N', 'E', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

ordered_json table(const std::vector<NamedTensor>& tensors, std::uint64_t& offset) {
  ordered_json arr = ordered_json::array();
  for (const auto& t : tensors) {
    if (t.data.size() != ag::numel(t.shape))
      throw CheckpointError("tensor " + t.name + " holds " + std::to_string(t.data.size()) + " values for shape " +
                            ag::shape_str(t.shape));
    arr.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.data.size()}});
    offset += t.data.size();
  }
  return arr;
}

std::vector<NamedTensor> read_table(const ordered_json& arr, const std::vector<float>& blob) {
  std::vector<NamedTensor> out;
  for (const auto& e : arr) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<ag::Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto count = e.at("count").get<std::uint64_t>();
    if (count != ag::numel(t.shape) || offset + count > blob.size())
      throw CheckpointError("tensor table entry " + t.name + " is inconsistent");
    t.data.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                  blob.begin() + static_cast<std::ptrdiff_t>(offset + count));
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::uint64_t offset = 0;
  ordered_json header;
  header["kind"] = ckpt.kind;
  header["config"] = ordered_json::parse(ckpt.config.to_json());
  header["config_hash"] = hex64(ckpt.config.hash());
  header["dtype"] = "float32";
  header["params"] = table(ckpt.params, offset);
  header["optimizer"] = table(ckpt.optimizer, offset);
  header["meta"] = ordered_json::parse(ckpt.meta_json);
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp);
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(len));
    for (const auto* group : {&ckpt.params, &ckpt.optimizer})
      for (const auto& t : *group)
        out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
    if (!out) throw CheckpointError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  std::stringstream rest;
  rest << in.rdbuf();
  const std::string bytes = rest.str();
  if (!in || bytes.size() % 4 != 0) throw CheckpointError("truncated checkpoint " + path.string());
  std::vector<float> blob(bytes.size() / 4);
  std::memcpy(blob.data(), bytes.data(), bytes.size());

  Checkpoint ckpt;
  try {
    const auto header = ordered_json::parse(text);
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = ModelConfig::from_json(header.at("config").dump());
    if (header.at("config_hash").get<std::string>() != hex64(ckpt.config.hash()))
      throw CheckpointError("config hash mismatch in " + path.string());
    if (header.at("dtype").get<std::string>() != "float32") throw CheckpointError("unsupported dtype");
    ckpt.params = read_table(header.at("params"), blob);
    ckpt.optimizer = read_table(header.at("optimizer"), blob);
    ckpt.meta_json = header.at("meta").dump();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  return ckpt;
}

std::vector<NamedTensor> capture_params(const ParamStore<float>& store) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < store.count(); ++i) {
    const auto& p = store.at(i);
    out.push_back({p.name, p.shape, p.value});
  }
  return out;
}

void restore_params(ParamStore<float>& store, const std::vector<NamedTensor>& tensors) {
  if (tensors.size() != store.count())
    throw CheckpointError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
                          std::to_string(store.count()));
  for (const auto& t : tensors) {
    if (!store.contains(t.name)) throw CheckpointError("unexpected tensor " + t.name);
    auto& p = store.get(t.name);
    if (p.shape != t.shape)
      throw CheckpointError("tensor " + t.name + " has shape " + ag::shape_str(t.shape) + ", model expects " +
                            ag::shape_str(p.shape));
    p.value = t.data;
  }
}

std::string checkpoint_id(const Checkpoint& ckpt) {
  std::uint64_t h = ckpt.config.hash();
  for (const auto& t : ckpt.params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
    for (std::size_t i = 0; i < t.data.size() * 4; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return ckpt.kind + "-" + hex64(h).substr(0, 12);
}

}  // namespace pomnet
