#include "pomnet/annotations.hpp"

#include "pomnet/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace pomnet {

using nlohmann::json;
using nlohmann::ordered_json;

BBox InstanceAnnotation::effective_bbox() const {
  if (bbox) return *bbox;
  return BBox{0.0, 0.0, static_cast<double>(width), static_cast<double>(height)};
}

bool InstanceAnnotation::same_record(const InstanceAnnotation& o) const {
  return id == o.id && image_id == o.image_id && file == o.file && width == o.width &&
         height == o.height && category_id == o.category_id && bbox == o.bbox && keypoints == o.keypoints;
}

void DatasetSplit::validate() const {
  auto check = [](const std::vector<int>& a, const std::vector<int>& b, const char* na, const char* nb) {
    for (int x : a)
      if (std::find(b.begin(), b.end(), x) != b.end())
        throw ValidationError("split: category " + std::to_string(x) + " appears in both " + na + " and " + nb);
  };
  check(train, val, "train", "val");
  check(train, test, "train", "test");
  check(val, test, "val", "test");
}

bool DatasetSplit::contains(int category) const {
  for (const auto* set : {&train, &val, &test})
    if (std::find(set->begin(), set->end(), category) != set->end()) return true;
  return false;
}

const CategoryDef& AnnotationSet::category(int id) const {
  for (const auto& c : categories)
    if (c.id == id) return c;
  throw ValidationError("unknown category id " + std::to_string(id));
}

bool AnnotationSet::has_category(int id) const {
  return std::any_of(categories.begin(), categories.end(), [id](const auto& c) { return c.id == id; });
}

std::vector<const InstanceAnnotation*> AnnotationSet::instances_of(int category) const {
  std::vector<const InstanceAnnotation*> out;
  for (const auto& inst : instances)
    if (inst.category_id == category) out.push_back(&inst);
  return out;
}

const InstanceAnnotation& AnnotationSet::instance(int id) const {
  for (const auto& inst : instances)
    if (inst.id == id) return inst;
  throw ValidationError("unknown annotation id " + std::to_string(id));
}

std::shared_ptr<const Image> AnnotationSet::image_for(const InstanceAnnotation& inst) const {
  if (inst.image) return inst.image;
  return std::make_shared<const Image>(read_image(root / inst.file));
}

void AnnotationSet::preload_images() {
  std::unordered_map<std::string, std::shared_ptr<const Image>> cache;
  for (auto& inst : instances) {
    if (inst.image) continue;
    auto& slot = cache[inst.file];
    if (!slot) slot = std::make_shared<const Image>(read_image(root / inst.file));
    inst.image = slot;
  }
}

void AnnotationSet::validate() const {
  std::set<int> ids;
  for (const auto& c : categories) {
    if (!ids.insert(c.id).second) throw ValidationError("duplicate category id " + std::to_string(c.id));
    if (c.keypoint_names.empty())
      throw ValidationError("category " + std::to_string(c.id) + " declares no keypoints");
    std::set<std::string> names(c.keypoint_names.begin(), c.keypoint_names.end());
    if (names.size() != c.keypoint_names.size())
      throw ValidationError("category " + std::to_string(c.id) + " has duplicate keypoint names");
  }
  for (const auto& inst : instances) {
    const std::string where = "annotation " + std::to_string(inst.id);
    if (!has_category(inst.category_id))
      throw ValidationError(where + ": references undeclared category " + std::to_string(inst.category_id));
    const auto& cat = category(inst.category_id);
    if (static_cast<int>(inst.keypoints.size()) != cat.num_keypoints())
      throw ValidationError(where + ": " + std::to_string(inst.keypoints.size()) + " keypoints, category " +
                            std::to_string(cat.id) + " defines " + std::to_string(cat.num_keypoints()));
    if (inst.bbox && !(inst.bbox->w > 0.0 && inst.bbox->h > 0.0))
      throw ValidationError(where + ": bbox has non-positive size");
    for (std::size_t k = 0; k < inst.keypoints.size(); ++k) {
      const auto& kp = inst.keypoints[k];
      if (kp.visibility < 0 || kp.visibility > 2)
        throw ValidationError(where + ": keypoint " + std::to_string(k) + " has visibility " +
                              std::to_string(kp.visibility));
      if (kp.visibility > 0 && (kp.x < 0 || kp.y < 0 || kp.x > inst.width || kp.y > inst.height))
        throw ValidationError(where + ": keypoint " + std::to_string(k) + " lies outside the image");
    }
  }
}

namespace {

template <typename J>
const J& field(const J& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  return obj.at(key);
}

int int_field(const json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_number_integer()) throw ParseError(where + ": field '" + key + "' must be an integer");
  return v.get<int>();
}

std::string str_field(const json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_string()) throw ParseError(where + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

const json& array_field(const json& obj, const char* key, const std::string& where) {
  const auto& v = field(obj, key, where);
  if (!v.is_array()) throw ParseError(where + ": field '" + key + "' must be an array");
  return v;
}

double number(const json& v, const std::string& where) {
  if (!v.is_number()) throw ParseError(where + ": expected a number");
  return v.get<double>();
}

}  // namespace

AnnotationSet parse_annotations(const std::string& text, const std::filesystem::path& root) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("annotation file is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("annotation file: top level must be an object");
  AnnotationSet set;
  set.root = root;

  const auto& cats = array_field(doc, "categories", "annotation file");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string where = "categories[" + std::to_string(i) + "]";
    CategoryDef c;
    c.id = int_field(cats[i], "id", where);
    c.name = str_field(cats[i], "name", where);
    for (const auto& n : array_field(cats[i], "keypoint_names", where)) {
      if (!n.is_string()) throw ParseError(where + ": keypoint_names must be strings");
      c.keypoint_names.push_back(n.get<std::string>());
    }
    set.categories.push_back(std::move(c));
  }

  struct ImageRow {
    std::string file;
    int width, height;
  };
  std::unordered_map<int, ImageRow> images;
  const auto& imgs = array_field(doc, "images", "annotation file");
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    const int id = int_field(imgs[i], "id", where);
    ImageRow row{str_field(imgs[i], "file", where), int_field(imgs[i], "width", where),
                 int_field(imgs[i], "height", where)};
    if (row.width <= 0 || row.height <= 0) throw ParseError(where + ": non-positive image size");
    if (!images.emplace(id, row).second) throw ParseError(where + ": duplicate image id " + std::to_string(id));
  }

  const auto& anns = array_field(doc, "annotations", "annotation file");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const auto& a = anns[i];
    std::string where = "annotations[" + std::to_string(i) + "]";
    InstanceAnnotation inst;
    inst.id = int_field(a, "id", where);
    where += " (id " + std::to_string(inst.id) + ")";
    inst.image_id = int_field(a, "image_id", where);
    inst.category_id = int_field(a, "category_id", where);
    auto img = images.find(inst.image_id);
    if (img == images.end()) throw ParseError(where + ": unknown image_id " + std::to_string(inst.image_id));
    inst.file = img->second.file;
    inst.width = img->second.width;
    inst.height = img->second.height;
    if (a.contains("bbox") && !a.at("bbox").is_null()) {
      const auto& b = array_field(a, "bbox", where);
      if (b.size() != 4) throw ParseError(where + ": bbox must have 4 numbers");
      inst.bbox = BBox{number(b[0], where), number(b[1], where), number(b[2], where), number(b[3], where)};
    }
    const auto& kps = array_field(a, "keypoints", where);
    if (kps.size() % 3 != 0)
      throw ValidationError(where + ": keypoints array has " + std::to_string(kps.size()) +
                            " numbers, not a multiple of 3");
    for (std::size_t k = 0; k < kps.size(); k += 3) {
      const double v = number(kps[k + 2], where);
      if (v != 0 && v != 1 && v != 2) throw ValidationError(where + ": visibility must be 0, 1 or 2");
      inst.keypoints.push_back({number(kps[k], where), number(kps[k + 1], where), static_cast<int>(v)});
    }
    set.instances.push_back(std::move(inst));
  }
  set.validate();
  return set;
}

AnnotationSet load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open annotation file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_annotations(ss.str(), path.parent_path());
}

std::string serialize_annotations(const AnnotationSet& set) {
  ordered_json doc;
  doc["categories"] = ordered_json::array();
  for (const auto& c : set.categories) {
    ordered_json jc;
    jc["id"] = c.id;
    jc["name"] = c.name;
    jc["keypoint_names"] = c.keypoint_names;
    doc["categories"].push_back(jc);
  }
  doc["images"] = ordered_json::array();
  std::set<int> seen;
  for (const auto& inst : set.instances) {
    if (!seen.insert(inst.image_id).second) continue;
    ordered_json ji;
    ji["id"] = inst.image_id;
    ji["file"] = inst.file;
    ji["width"] = inst.width;
    ji["height"] = inst.height;
    doc["images"].push_back(ji);
  }
  doc["annotations"] = ordered_json::array();
  for (const auto& inst : set.instances) {
    ordered_json ja;
    ja["id"] = inst.id;
    ja["image_id"] = inst.image_id;
    ja["category_id"] = inst.category_id;
    if (inst.bbox) ja["bbox"] = {inst.bbox->x, inst.bbox->y, inst.bbox->w, inst.bbox->h};
    ordered_json kps = ordered_json::array();
    for (const auto& kp : inst.keypoints) {
      kps.push_back(kp.x);
      kps.push_back(kp.y);
      kps.push_back(kp.visibility);
    }
    ja["keypoints"] = kps;
    doc["annotations"].push_back(ja);
  }
  return doc.dump(1) + "\n";
}

void save_annotations(const AnnotationSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << serialize_annotations(set);
}

DatasetSplit load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open split file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("split file is not valid JSON: " + std::string(e.what()));
  }
  DatasetSplit split;
  auto read = [&](const char* key, std::vector<int>& dst) {
    if (!doc.contains(key)) return;
    const auto& arr = doc.at(key);
    if (!arr.is_array()) throw ParseError(std::string("split file: '") + key + "' must be an array");
    for (const auto& v : arr) {
      if (!v.is_number_integer()) throw ParseError(std::string("split file: '") + key + "' must hold integers");
      dst.push_back(v.get<int>());
    }
  };
  read("train", split.train);
  read("val", split.val);
  read("test", split.test);
  split.validate();
  return split;
}

std::string serialize_split(const DatasetSplit& split) {
  ordered_json doc;
  doc["train"] = split.train;
  doc["val"] = split.val;
  doc["test"] = split.test;
  return doc.dump() + "\n";
}

void save_split(const DatasetSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << serialize_split(split);
}

}  // namespace pomnet
