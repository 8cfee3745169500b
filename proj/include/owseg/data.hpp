#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>

#include <json.hpp>

#include "owseg/core.hpp"

namespace owseg {

using Bytes = std::vector<uint8_t>;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace detail {

inline uint32_t load_le32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline void store_le32(uint32_t v, Bytes& out) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}

}  // namespace detail

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------------------------
// SemanticKITTI layouts
// ---------------------------------------------------------------------------------------------

/// Parses consecutive (x, y, z, remission) little-endian float32 records.
inline Scan read_scan(std::span<const uint8_t> bytes) {
  if (bytes.empty()) throw FormatError("empty scan stream");
  if (bytes.size() % 16 != 0)
    throw FormatError("scan stream length " + std::to_string(bytes.size()) + " is not a multiple of 16");
  const size_t m = bytes.size() / 16;
  Scan scan;
  scan.points.resize(static_cast<Eigen::Index>(m), 3);
  scan.intensity.resize(m);
  scan.instance_ids.assign(m, 0);
  for (size_t i = 0; i < m; ++i) {
    std::array<float, 4> rec{};
    for (size_t k = 0; k < 4; ++k)
      rec[k] = std::bit_cast<float>(detail::load_le32(bytes.data() + 16 * i + 4 * k));
    for (float v : rec)
      if (!std::isfinite(v)) throw FormatError("non-finite value in scan record " + std::to_string(i));
    if (rec[3] < 0.0f || rec[3] > 1.0f)
      throw FormatError("remission outside [0,1] in record " + std::to_string(i));
    for (int k = 0; k < 3; ++k) scan.points(static_cast<Eigen::Index>(i), k) = rec[static_cast<size_t>(k)];
    scan.intensity[i] = rec[3];
  }
  return scan;
}

/// Inverse of read_scan. Coordinates are narrowed to float32; absent intensity is written as 0.
inline Bytes write_scan(const Scan& scan) {
  Bytes out;
  out.reserve(static_cast<size_t>(scan.size()) * 16);
  for (int i = 0; i < scan.size(); ++i) {
    for (int k = 0; k < 3; ++k)
      detail::store_le32(std::bit_cast<uint32_t>(static_cast<float>(scan.points(i, k))), out);
    float r = scan.has_intensity() ? static_cast<float>(scan.intensity[static_cast<size_t>(i)]) : 0.0f;
    detail::store_le32(std::bit_cast<uint32_t>(r), out);
  }
  return out;
}

struct LabelFile {
  LabelSet labels;  // ground-truth domain; semantic 0 marks void
  std::vector<uint32_t> instance_ids;
};

/// Each little-endian uint32 splits into semantic (low 16 bits) and instance (high 16 bits).
inline LabelFile read_labels(std::span<const uint8_t> bytes, int m) {
  if (m <= 0 || bytes.size() != 4 * static_cast<size_t>(m))
    throw FormatError("label stream has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(4 * static_cast<long long>(m)));
  LabelFile out;
  out.labels.domain = LabelDomain::ground_truth;
  out.labels.labels.resize(static_cast<size_t>(m));
  out.labels.void_mask.resize(static_cast<size_t>(m));
  out.instance_ids.resize(static_cast<size_t>(m));
  for (size_t i = 0; i < static_cast<size_t>(m); ++i) {
    uint32_t word = detail::load_le32(bytes.data() + 4 * i);
    auto semantic = static_cast<ClassId>(word & 0xFFFFu);
    out.labels.labels[i] = semantic;
    out.labels.void_mask[i] = semantic == 0;
    out.instance_ids[i] = word >> 16;
  }
  return out;
}

/// Void points are written as semantic 0.
inline Bytes write_labels(const LabelSet& labels, std::span<const uint32_t> instance_ids) {
  if (instance_ids.size() != labels.labels.size()) throw FormatError("instance/label length mismatch");
  Bytes out;
  out.reserve(labels.labels.size() * 4);
  for (size_t i = 0; i < labels.labels.size(); ++i) {
    uint32_t semantic = labels.void_mask[i] ? 0u : static_cast<uint32_t>(labels.labels[i]);
    if (semantic > 0xFFFFu || instance_ids[i] > 0xFFFFu)
      throw FormatError("label or instance id does not fit in 16 bits");
    detail::store_le32(semantic | (instance_ids[i] << 16), out);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------------------------

enum class Shape { plane, box, cylinder, ellipsoid };

NLOHMANN_JSON_SERIALIZE_ENUM(Shape, {{Shape::plane, "plane"},
                                     {Shape::box, "box"},
                                     {Shape::cylinder, "cylinder"},
                                     {Shape::ellipsoid, "ellipsoid"}})

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Range& r) {
  r.lo = j.at(0).get<double>();
  r.hi = j.at(1).get<double>();
}

/// One object family. Sizes are full extents in meters; for cylinders `width` is the diameter.
struct Archetype {
  ClassId class_id = 0;
  std::string name;
  Shape shape = Shape::box;
  Range length;
  Range width;
  Range height;
  Range count;  // objects per scene, inclusive integer range
  double intensity = 0.5;
  double intensity_noise = 0.05;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Archetype, class_id, name, shape, length, width, height,
                                                count, intensity, intensity_noise)

struct SceneConfig {
  int points_per_scan = 4096;
  double scene_extent = 40.0;  // side of the square ground patch
  double noise_sigma = 0.02;
  ClassId ground_class = 1;
  double ground_intensity = 0.2;
  double ground_density = 1.0;  // ground sampling density relative to object surfaces
  std::vector<Archetype> known_shape_classes;
  std::vector<Archetype> novel_shape_classes;
  uint64_t rng_seed = 0;

  /// Ground, building, car and pedestrian are known; an ellipsoid sized between car and
  /// building with vehicle-like reflectance is withheld.
  static SceneConfig defaults() {
    SceneConfig c;
    c.known_shape_classes = {
        {2, "building", Shape::box, {8.0, 12.0}, {6.0, 9.0}, {5.0, 8.0}, {2, 2}, 0.40, 0.05},
        {3, "car", Shape::box, {3.8, 4.6}, {1.6, 2.0}, {1.3, 1.7}, {4, 5}, 0.70, 0.05},
        {4, "pedestrian", Shape::cylinder, {0.5, 0.7}, {0.5, 0.7}, {1.6, 1.9}, {4, 5}, 0.50, 0.05},
    };
    c.novel_shape_classes = {
        {5, "other-vehicle", Shape::ellipsoid, {5.5, 7.5}, {3.0, 4.0}, {2.6, 3.4}, {2, 2}, 0.70, 0.05},
    };
    return c;
  }

  void validate() const {
    if (points_per_scan <= 0) throw ConfigError("points_per_scan must be positive");
    if (!(scene_extent > 0.0)) throw ConfigError("scene_extent must be positive");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
    if (!(ground_density > 0.0)) throw ConfigError("ground_density must be positive");
    std::vector<ClassId> ids{ground_class};
    for (const auto* list : {&known_shape_classes, &novel_shape_classes})
      for (const auto& a : *list) {
        if (a.class_id <= 0) throw ConfigError("archetype class IDs must be positive");
        if (a.shape == Shape::plane) throw ConfigError("only the ground may be a plane");
        for (const Range* r : {&a.length, &a.width, &a.height})
          if (!(r->lo > 0.0 && r->hi >= r->lo)) throw ConfigError("bad size range for " + a.name);
        if (a.count.lo < 0 || a.count.hi < a.count.lo) throw ConfigError("bad count range for " + a.name);
        ids.push_back(a.class_id);
      }
    auto sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ConfigError("archetype class IDs must be distinct");
  }

  /// Known archetypes must be old (or already learned) classes, novel ones must not be old.
  void validate_against(const ClassRegistry& reg) const {
    validate();
    if (!reg.is_known(ground_class)) throw ConfigError("ground class is not a known class");
    for (const auto& a : known_shape_classes)
      if (!reg.is_known(a.class_id)) throw ConfigError("known archetype " + a.name + " not in the registry");
    for (const auto& a : novel_shape_classes)
      if (reg.is_old(a.class_id) || !(reg.is_remaining(a.class_id) || reg.is_learned(a.class_id)))
        throw ConfigError("novel archetype " + a.name + " must be a novel class of the registry");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SceneConfig, points_per_scan, scene_extent, noise_sigma,
                                                ground_class, ground_intensity, ground_density, known_shape_classes,
                                                novel_shape_classes, rng_seed)

struct GeneratedScene {
  Scan scan;
  LabelSet train_labels;  // novel archetypes void
  LabelSet full_labels;   // every point labeled
};

namespace detail {

struct PlacedObject {
  const Archetype* archetype = nullptr;
  bool novel = false;
  uint32_t instance = 0;
  double cx = 0, cy = 0, yaw = 0;
  double length = 0, width = 0, height = 0;

  double footprint_radius() const { return 0.5 * std::hypot(length, width); }

  // Visible surface area; faces touching the ground are not sampled.
  double area() const {
    switch (archetype->shape) {
      case Shape::box: return 2.0 * height * (length + width) + length * width;
      case Shape::cylinder: {
        double r = 0.5 * width;
        return 2.0 * std::numbers::pi * r * height + std::numbers::pi * r * r;
      }
      case Shape::ellipsoid: {
        // Knud Thomsen approximation.
        double a = 0.5 * length, b = 0.5 * width, c = 0.5 * height, p = 1.6075;
        double s = (std::pow(a * b, p) + std::pow(a * c, p) + std::pow(b * c, p)) / 3.0;
        return 4.0 * std::numbers::pi * std::pow(s, 1.0 / p);
      }
      case Shape::plane: break;
    }
    return 0.0;
  }

  bool covers(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    double lx = std::cos(yaw) * dx + std::sin(yaw) * dy;
    double ly = -std::sin(yaw) * dx + std::cos(yaw) * dy;
    switch (archetype->shape) {
      case Shape::box: return std::abs(lx) <= 0.5 * length && std::abs(ly) <= 0.5 * width;
      case Shape::cylinder: return std::hypot(dx, dy) <= 0.5 * width;
      case Shape::ellipsoid: {
        double u = lx / (0.5 * length), v = ly / (0.5 * width);
        return u * u + v * v <= 1.0;
      }
      case Shape::plane: break;
    }
    return false;
  }

  template <class Rng>
  Eigen::Vector3d sample_surface(Rng& rng) const {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Eigen::Vector3d local = Eigen::Vector3d::Zero();
    switch (archetype->shape) {
      case Shape::box: {
        double sides = 2.0 * height * (length + width), top = length * width;
        double pick = u01(rng) * (sides + top);
        if (pick < top) {
          local = {(u01(rng) - 0.5) * length, (u01(rng) - 0.5) * width, height};
        } else {
          // walk the perimeter
          double t = u01(rng) * 2.0 * (length + width);
          double z = u01(rng) * height;
          if (t < length) local = {t - 0.5 * length, -0.5 * width, z};
          else if (t < length + width) local = {0.5 * length, t - length - 0.5 * width, z};
          else if (t < 2 * length + width) local = {t - length - width - 0.5 * length, 0.5 * width, z};
          else local = {-0.5 * length, t - 2 * length - width - 0.5 * width, z};
        }
        break;
      }
      case Shape::cylinder: {
        double r = 0.5 * width;
        double side = 2.0 * std::numbers::pi * r * height, top = std::numbers::pi * r * r;
        double th = 2.0 * std::numbers::pi * u01(rng);
        if (u01(rng) * (side + top) < top) {
          double rr = r * std::sqrt(u01(rng));
          local = {rr * std::cos(th), rr * std::sin(th), height};
        } else {
          local = {r * std::cos(th), r * std::sin(th), u01(rng) * height};
        }
        break;
      }
      case Shape::ellipsoid: {
        // Rejection on the area element gives uniform surface density.
        double a = 0.5 * length, b = 0.5 * width, c = 0.5 * height;
        double gmax = std::max({a * b, a * c, b * c});
        std::normal_distribution<double> n01;
        for (;;) {
          Eigen::Vector3d d(n01(rng), n01(rng), n01(rng));
          d.normalize();
          double g = std::sqrt(std::pow(b * c * d.x(), 2) + std::pow(a * c * d.y(), 2) +
                               std::pow(a * b * d.z(), 2));
          if (u01(rng) * gmax <= g) {
            local = {a * d.x(), b * d.y(), c + c * d.z()};
            break;
          }
        }
        break;
      }
      case Shape::plane: break;
    }
    double cs = std::cos(yaw), sn = std::sin(yaw);
    return {cx + cs * local.x() - sn * local.y(), cy + sn * local.x() + cs * local.y(), local.z()};
  }
};

}  // namespace detail

/// Deterministic in (cfg, cfg.rng_seed). Objects are placed without footprint overlap.
inline GeneratedScene generate_scene(const SceneConfig& cfg, const ClassRegistry& registry) {
  cfg.validate_against(registry);
  std::mt19937_64 rng(cfg.rng_seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double half = 0.5 * cfg.scene_extent;

  std::vector<detail::PlacedObject> objects;
  uint32_t next_instance = 1;
  auto place = [&](const Archetype& a, bool novel) {
    std::uniform_int_distribution<int> count_dist(static_cast<int>(a.count.lo), static_cast<int>(a.count.hi));
    int count = count_dist(rng);
    for (int k = 0; k < count; ++k) {
      detail::PlacedObject o;
      o.archetype = &a;
      o.novel = novel;
      o.instance = next_instance++;
      o.length = a.length.lo + u01(rng) * (a.length.hi - a.length.lo);
      o.width = a.shape == Shape::cylinder ? o.length : a.width.lo + u01(rng) * (a.width.hi - a.width.lo);
      o.height = a.height.lo + u01(rng) * (a.height.hi - a.height.lo);
      o.yaw = u01(rng) * 2.0 * std::numbers::pi;
      const double rad = o.footprint_radius();
      if (rad >= half) throw GenerationError("scene extent too small for " + a.name);
      bool placed = false;
      for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
        o.cx = (2.0 * u01(rng) - 1.0) * (half - rad);
        o.cy = (2.0 * u01(rng) - 1.0) * (half - rad);
        placed = std::all_of(objects.begin(), objects.end(), [&](const detail::PlacedObject& p) {
          return std::hypot(p.cx - o.cx, p.cy - o.cy) > p.footprint_radius() + rad + 0.5;
        });
      }
      if (!placed) throw GenerationError("could not place " + a.name + " without overlap; enlarge scene_extent");
      objects.push_back(o);
    }
  };
  for (const auto& a : cfg.known_shape_classes) place(a, false);
  for (const auto& a : cfg.novel_shape_classes) place(a, true);
  if (next_instance > 0xFFFFu) throw GenerationError("too many instances for 16-bit instance ids");

  // Surface 0 is the ground; the rest follow `objects`.
  std::vector<double> areas{cfg.ground_density * cfg.scene_extent * cfg.scene_extent};
  for (const auto& o : objects) areas.push_back(o.area());
  std::discrete_distribution<size_t> pick(areas.begin(), areas.end());
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  std::normal_distribution<double> n01;

  const int m = cfg.points_per_scan;
  GeneratedScene out;
  out.scan.points.resize(m, 3);
  out.scan.intensity.resize(static_cast<size_t>(m));
  out.scan.instance_ids.resize(static_cast<size_t>(m));
  out.full_labels = LabelSet{std::vector<ClassId>(static_cast<size_t>(m)),
                             std::vector<bool>(static_cast<size_t>(m), false), LabelDomain::ground_truth};
  out.train_labels = out.full_labels;
  out.train_labels.domain = LabelDomain::closed_old;

  for (int i = 0; i < m; ++i) {
    const size_t s = pick(rng);
    Eigen::Vector3d p;
    double base_intensity, spread;
    ClassId cls;
    uint32_t inst = 0;
    bool novel = false;
    if (s == 0) {
      // Ground hidden under footprints is resampled.
      do {
        p = {(2.0 * u01(rng) - 1.0) * half, (2.0 * u01(rng) - 1.0) * half, 0.0};
      } while (std::any_of(objects.begin(), objects.end(),
                           [&](const detail::PlacedObject& o) { return o.covers(p.x(), p.y()); }));
      cls = cfg.ground_class;
      base_intensity = cfg.ground_intensity;
      spread = 0.05;
    } else {
      const auto& o = objects[s - 1];
      p = o.sample_surface(rng);
      cls = o.archetype->class_id;
      base_intensity = o.archetype->intensity;
      spread = o.archetype->intensity_noise;
      inst = o.instance;
      novel = o.novel;
    }
    for (int k = 0; k < 3; ++k) out.scan.points(i, k) = p[k] + noise(rng);
    out.scan.intensity[static_cast<size_t>(i)] = std::clamp(base_intensity + spread * n01(rng), 0.0, 1.0);
    out.scan.instance_ids[static_cast<size_t>(i)] = inst;
    out.full_labels.labels[static_cast<size_t>(i)] = cls;
    if (novel) {
      out.train_labels.labels[static_cast<size_t>(i)] = 0;
      out.train_labels.void_mask[static_cast<size_t>(i)] = true;
    } else {
      out.train_labels.labels[static_cast<size_t>(i)] = cls;
    }
  }
  return out;
}

/// Training labels for a registry: classes the model has not been taught become void.
inline LabelSet training_view(const LabelSet& full, const ClassRegistry& reg) {
  LabelSet out = full;
  for (int i = 0; i < out.size(); ++i) {
    auto& l = out.labels[static_cast<size_t>(i)];
    if (out.is_void(i) || !reg.is_old(l)) {
      l = 0;
      out.void_mask[static_cast<size_t>(i)] = true;
    }
  }
  out.domain = LabelDomain::closed_old;
  return out;
}

/// Labels of a single class only, everything else void (task-IL annotation).
inline LabelSet single_class_view(const LabelSet& full, ClassId cls) {
  LabelSet out = LabelSet::all_void(full.size(), LabelDomain::post_il);
  for (int i = 0; i < full.size(); ++i)
    if (!full.is_void(i) && full.labels[static_cast<size_t>(i)] == cls) {
      out.labels[static_cast<size_t>(i)] = cls;
      out.void_mask[static_cast<size_t>(i)] = false;
    }
  return out;
}

/// One frame with its full ground truth.
struct Sample {
  Scan scan;
  LabelSet full_labels;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Scene i uses seed base_seed + i; even seeds train, odd seeds validate.
inline Dataset generate_dataset(SceneConfig cfg, const ClassRegistry& reg, int scenes) {
  Dataset ds;
  const uint64_t base = cfg.rng_seed;
  for (int i = 0; i < scenes; ++i) {
    cfg.rng_seed = base + static_cast<uint64_t>(i);
    auto g = generate_scene(cfg, reg);
    Sample s{std::move(g.scan), std::move(g.full_labels)};
    (cfg.rng_seed % 2 == 0 ? ds.train : ds.val).push_back(std::move(s));
  }
  return ds;
}

}  // namespace owseg
