#pragma once

#include "pomnet/heatmap.hpp"
#include "pomnet/image.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace pomnet {

struct CategoryDef {
  int id = 0;
  std::string name;
  std::vector<std::string> keypoint_names;

  int num_keypoints() const { return static_cast<int>(keypoint_names.size()); }
  bool operator==(const CategoryDef&) const = default;
};

// 0 unlabeled, 1 labeled but occluded, 2 visible.
struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  int visibility = 0;
  bool operator==(const Keypoint&) const = default;
};

struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
  double longest_side() const { return w > h ? w : h; }
  bool operator==(const BBox&) const = default;
};

struct InstanceAnnotation {
  int id = 0;
  int image_id = 0;
  std::string file;                    // relative to the dataset root
  std::shared_ptr<const Image> image;  // in-memory pixels, takes precedence over file
  int width = 0;
  int height = 0;
  int category_id = 0;
  std::optional<BBox> bbox;  // absent: the whole image
  std::vector<Keypoint> keypoints;

  BBox effective_bbox() const;
  // Compares annotation fields only, not pixel storage.
  bool same_record(const InstanceAnnotation& other) const;
};

struct DatasetSplit {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;

  // Throws ValidationError if any two sets intersect.
  void validate() const;
  bool contains(int category) const;
};

// Categories plus annotated instances, with image lookup relative to root.
class AnnotationSet {
 public:
  std::vector<CategoryDef> categories;
  std::vector<InstanceAnnotation> instances;
  std::filesystem::path root;

  const CategoryDef& category(int id) const;
  bool has_category(int id) const;
  std::vector<const InstanceAnnotation*> instances_of(int category) const;
  const InstanceAnnotation& instance(int id) const;

  // Pixels for an instance: in-memory image if present, else read from disk.
  std::shared_ptr<const Image> image_for(const InstanceAnnotation& inst) const;
  // Reads every referenced file once and attaches it to its instances.
  void preload_images();

  // Checks every record against its category (keypoint count, bbox, bounds).
  void validate() const;
};

AnnotationSet load_annotations(const std::filesystem::path& path);
AnnotationSet parse_annotations(const std::string& json_text, const std::filesystem::path& root = {});
std::string serialize_annotations(const AnnotationSet& set);
void save_annotations(const AnnotationSet& set, const std::filesystem::path& path);

DatasetSplit load_split(const std::filesystem::path& path);
std::string serialize_split(const DatasetSplit& split);
void save_split(const DatasetSplit& split, const std::filesystem::path& path);

}  // namespace pomnet
