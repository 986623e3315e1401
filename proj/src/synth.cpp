#include "pomnet/synth.hpp"

#include "pomnet/errors.hpp"
#include "pomnet/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>

namespace pomnet {

namespace {

struct Shape {
  std::vector<Point2> vertices;  // unit frame, y down; also the keypoints
  bool ellipse = false;          // vertices are the axis extremes
  double rx = 1.0, ry = 1.0;
  std::vector<std::string> names;
};

std::vector<Point2> regular(int n, double start_deg = -90.0) {
  std::vector<Point2> v;
  for (int i = 0; i < n; ++i) {
    const double a = (start_deg + 360.0 * i / n) * std::numbers::pi / 180.0;
    v.push_back({std::cos(a), std::sin(a)});
  }
  return v;
}

std::vector<Point2> star(int points, double inner) {
  std::vector<Point2> v;
  for (int i = 0; i < 2 * points; ++i) {
    const double a = (-90.0 + 180.0 * i / points) * std::numbers::pi / 180.0;
    const double r = i % 2 == 0 ? 1.0 : inner;
    v.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return v;
}

std::vector<std::string> numbered(const std::string& stem, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(stem + "_" + std::to_string(i));
  return out;
}

const std::map<std::string, Shape>& registry() {
  static const std::map<std::string, Shape> shapes = [] {
    std::map<std::string, Shape> m;
    auto poly = [&](const std::string& name, std::vector<Point2> v, const std::string& stem) {
      Shape s;
      s.names = numbered(stem, v.size());
      s.vertices = std::move(v);
      m[name] = std::move(s);
    };
    poly("triangle", regular(3), "corner");
    poly("square", {{-0.8, -0.8}, {0.8, -0.8}, {0.8, 0.8}, {-0.8, 0.8}}, "corner");
    poly("pentagon", regular(5), "corner");
    poly("hexagon", regular(6), "corner");
    poly("star5", star(5, 0.45), "point");
    poly("star6", star(6, 0.55), "point");
    poly("tshape", {{-1, -1}, {1, -1}, {1, -0.4}, {0.3, -0.4}, {0.3, 1}, {-0.3, 1}, {-0.3, -0.4}, {-1, -0.4}},
         "corner");
    poly("arrow", {{-1, -0.3}, {0.2, -0.3}, {0.2, -0.75}, {1, 0}, {0.2, 0.75}, {0.2, 0.3}, {-1, 0.3}}, "corner");
    poly("cross", {{-0.3, -1}, {0.3, -1}, {0.3, -0.3}, {1, -0.3}, {1, 0.3}, {0.3, 0.3},
                   {0.3, 1}, {-0.3, 1}, {-0.3, 0.3}, {-1, 0.3}, {-1, -0.3}, {-0.3, -0.3}},
         "corner");
    poly("house", {{0, -1}, {1, -0.2}, {1, 1}, {-1, 1}, {-1, -0.2}}, "corner");
    poly("lshape", {{-1, -1}, {-0.3, -1}, {-0.3, 0.4}, {1, 0.4}, {1, 1}, {-1, 1}}, "corner");
    poly("trapezoid", {{-0.5, -0.7}, {0.5, -0.7}, {1, 0.7}, {-1, 0.7}}, "corner");
    Shape e;
    e.ellipse = true;
    e.rx = 1.0;
    e.ry = 0.6;
    e.vertices = {{0, -0.6}, {1, 0}, {0, 0.6}, {-1, 0}};
    e.names = {"top", "right", "bottom", "left"};
    m["ellipse"] = std::move(e);
    return m;
  }();
  return shapes;
}

const Shape& shape_of(const std::string& family) {
  const auto& reg = registry();
  auto it = reg.find(family);
  if (it == reg.end()) throw ConfigError("unknown shape family '" + family + "'");
  return it->second;
}

bool inside_polygon(const std::vector<Point2>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point2 a = poly[i], b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

struct Placement {
  double cx, cy, sx, sy, theta;
  Point2 map(Point2 u) const {
    const double x = u.x * sx, y = u.y * sy;
    return {cx + x * std::cos(theta) - y * std::sin(theta), cy + x * std::sin(theta) + y * std::cos(theta)};
  }
  Point2 unmap(Point2 p) const {
    const double dx = p.x - cx, dy = p.y - cy;
    return {(dx * std::cos(theta) + dy * std::sin(theta)) / sx, (-dx * std::sin(theta) + dy * std::cos(theta)) / sy};
  }
};

double luma(const double c[3]) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

const std::vector<std::string>& synth_family_names() {
  static const std::vector<std::string> names = {"triangle", "square",  "pentagon", "hexagon", "star5",
                                                 "star6",    "tshape",  "ellipse",  "arrow",   "cross",
                                                 "house",    "lshape",  "trapezoid"};
  return names;
}

int synth_category_id(const std::string& family) {
  const auto& names = synth_family_names();
  auto it = std::find(names.begin(), names.end(), family);
  if (it == names.end()) throw ConfigError("unknown shape family '" + family + "'");
  return static_cast<int>(it - names.begin()) + 1;
}

int synth_family_keypoints(const std::string& family) {
  return static_cast<int>(shape_of(family).vertices.size());
}

SynthConfig SynthConfig::from_json(const std::string& text) {
  using nlohmann::ordered_json;
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const ordered_json::parse_error& e) {
    throw ConfigError(std::string("synth config is not valid JSON: ") + e.what());
  }
  SynthConfig cfg;
  if (!doc.contains("families") || !doc["families"].is_object())
    throw ConfigError("synth config: 'families' must map family names to instance counts");
  for (const auto& [name, count] : doc["families"].items()) {
    if (!count.is_number_integer()) throw ConfigError("synth config: count for '" + name + "' must be an integer");
    cfg.families.push_back({name, count.get<int>()});
  }
  cfg.image_size = doc.value("image_size", cfg.image_size);
  cfg.k_max = doc.value("k_max", cfg.k_max);
  cfg.max_rotation_deg = doc.value("max_rotation_deg", cfg.max_rotation_deg);
  cfg.background_noise = doc.value("background_noise", cfg.background_noise);
  cfg.val_families = doc.value("val_families", std::vector<std::string>{});
  cfg.test_families = doc.value("test_families", std::vector<std::string>{});
  return cfg;
}

SynthDataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.families.empty()) throw ConfigError("synth config names no shape families");
  if (cfg.image_size < 16) throw ConfigError("synth image_size must be at least 16");
  std::vector<std::string> seen;
  for (const auto& f : cfg.families) {
    shape_of(f.name);
    if (std::find(seen.begin(), seen.end(), f.name) != seen.end())
      throw ConfigError("shape family '" + f.name + "' listed twice");
    seen.push_back(f.name);
    if (f.instances < cfg.k_max + 1)
      throw ConfigError("family '" + f.name + "' requests " + std::to_string(f.instances) +
                        " instances; at least k_max + 1 = " + std::to_string(cfg.k_max + 1) + " are needed");
  }
  for (const auto* list : {&cfg.val_families, &cfg.test_families})
    for (const auto& name : *list)
      if (std::find(seen.begin(), seen.end(), name) == seen.end())
        throw ConfigError("held-out family '" + name + "' is not generated");

  SynthDataset ds;
  const int N = cfg.image_size;
  int next_id = 1;
  for (std::size_t fi = 0; fi < cfg.families.size(); ++fi) {
    const auto& fam = cfg.families[fi];
    const Shape& shape = shape_of(fam.name);
    const int cat_id = synth_category_id(fam.name);
    ds.annotations.categories.push_back({cat_id, fam.name, shape.names});

    for (int n = 0; n < fam.instances; ++n) {
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(cat_id), static_cast<std::uint64_t>(n)}));
      Placement pl{};
      const double size = rng.uniform(0.22, 0.34) * N;
      const double aspect = rng.uniform(0.8, 1.25);
      pl.sx = size * std::sqrt(aspect);
      pl.sy = size / std::sqrt(aspect);
      pl.theta = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * std::numbers::pi / 180.0;

      // extents of the shape around its centre
      double ex = 0, ey = 0;
      if (shape.ellipse) {
        const double c = std::cos(pl.theta), s = std::sin(pl.theta);
        const double ax = shape.rx * pl.sx, ay = shape.ry * pl.sy;
        ex = std::sqrt(ax * ax * c * c + ay * ay * s * s);
        ey = std::sqrt(ax * ax * s * s + ay * ay * c * c);
      } else {
        pl.cx = pl.cy = 0;
        for (const auto& v : shape.vertices) {
          const Point2 p = pl.map(v);
          ex = std::max(ex, std::abs(p.x));
          ey = std::max(ey, std::abs(p.y));
        }
      }
      const double fit = std::min(1.0, (N / 2.0 - 2) / (1.3 * std::max(ex, ey)));
      pl.sx *= fit;
      pl.sy *= fit;
      ex *= fit;
      ey *= fit;
      const double mx = 1.3 * ex + 2, my = 1.3 * ey + 2;
      pl.cx = rng.uniform(mx, std::max(mx, N - mx));
      pl.cy = rng.uniform(my, std::max(my, N - my));

      // colours
      double bg[3], fg[3];
      for (double& c : bg) c = rng.uniform(0, 255);
      for (int attempt = 0; attempt < 64; ++attempt) {
        for (double& c : fg) c = rng.uniform(0, 255);
        if (std::abs(luma(fg) - luma(bg)) > 60) break;
      }
      if (std::abs(luma(fg) - luma(bg)) <= 60) {
        const double shift = luma(bg) > 127 ? -120 : 120;
        for (double& c : fg) c = std::clamp(c + shift, 0.0, 255.0);
      }

      std::vector<Point2> poly;
      for (const auto& v : shape.vertices) poly.push_back(pl.map(v));
      auto inside = [&](double x, double y) {
        if (shape.ellipse) {
          const Point2 u = pl.unmap({x, y});
          return (u.x * u.x) / (shape.rx * shape.rx) + (u.y * u.y) / (shape.ry * shape.ry) <= 1.0;
        }
        return inside_polygon(poly, x, y);
      };

      auto img = std::make_shared<Image>(N, N);
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(N) * N, 0);
      constexpr int kSub = 4;
      for (int y = 0; y < N; ++y)
        for (int x = 0; x < N; ++x) {
          int hits = 0;
          for (int sy = 0; sy < kSub; ++sy)
            for (int sx = 0; sx < kSub; ++sx)
              hits += inside(x - 0.5 + (sx + 0.5) / kSub, y - 0.5 + (sy + 0.5) / kSub) ? 1 : 0;
          const double cov = static_cast<double>(hits) / (kSub * kSub);
          mask[static_cast<std::size_t>(y) * N + x] = cov >= 0.5 ? 1 : 0;
          const double noise = rng.normal() * cfg.background_noise;
          for (int c = 0; c < 3; ++c) img->at(x, y, c) = clamp_byte(bg[c] * (1 - cov) + fg[c] * cov + noise);
        }

      InstanceAnnotation inst;
      inst.id = next_id;
      inst.image_id = next_id;
      ++next_id;
      char file[32];
      std::snprintf(file, sizeof file, "images/%06d.png", inst.id);
      inst.file = file;
      inst.width = N;
      inst.height = N;
      inst.category_id = cat_id;
      const double bx0 = std::max(0.0, pl.cx - mx), by0 = std::max(0.0, pl.cy - my);
      const double bx1 = std::min<double>(N, pl.cx + mx), by1 = std::min<double>(N, pl.cy + my);
      inst.bbox = BBox{bx0, by0, bx1 - bx0, by1 - by0};
      for (const auto& p : poly) inst.keypoints.push_back({p.x, p.y, 2});
      inst.image = std::move(img);
      ds.annotations.instances.push_back(std::move(inst));
      ds.masks.push_back(std::move(mask));
    }
  }

  std::vector<std::string> val = cfg.val_families, test = cfg.test_families;
  if (val.empty() && test.empty() && cfg.families.size() >= 2) {
    const std::size_t n = cfg.families.size();
    for (std::size_t i = n - std::max<std::size_t>(1, n / 3); i < n; ++i) test.push_back(cfg.families[i].name);
  }
  for (const auto& f : cfg.families) {
    const int id = synth_category_id(f.name);
    if (std::find(test.begin(), test.end(), f.name) != test.end()) ds.split.test.push_back(id);
    else if (std::find(val.begin(), val.end(), f.name) != val.end()) ds.split.val.push_back(id);
    else ds.split.train.push_back(id);
  }
  ds.split.validate();
  ds.annotations.validate();
  return ds;
}

void write_synthetic(const SynthDataset& ds, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "images");
  for (const auto& inst : ds.annotations.instances) write_png(*inst.image, out_dir / inst.file);
  save_annotations(ds.annotations, out_dir / "annotations.json");
  save_split(ds.split, out_dir / "split.json");
}

}  // namespace pomnet
