#pragma once

#include <random>

#include <json.hpp>

#include "owseg/core.hpp"
#include "owseg/data.hpp"

namespace owseg {

struct SynthesisConfig {
  std::vector<ClassId> source_classes{3};  // K_syn; the synthetic car class by default
  double p_syn = 0.5;
  Range shrink_range{0.25, 0.5};
  Range grow_range{1.5, 3.0};
  uint64_t rng_seed = 0;

  void validate() const {
    if (!(p_syn >= 0.0 && p_syn <= 1.0)) throw ConfigError("synthesis.p_syn must lie in [0,1]");
    for (const Range* r : {&shrink_range, &grow_range}) {
      if (!(r->lo > 0.0 && r->hi >= r->lo)) throw ConfigError("synthesis resize ranges must be positive");
      if (r->lo <= 1.0 && r->hi >= 1.0) throw ConfigError("synthesis resize ranges must exclude 1.0");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthesisConfig, source_classes, p_syn, shrink_range,
                                                grow_range, rng_seed)

/// Scales points about their centroid: c + factor * (p - c).
inline Points resize_instance(const Points& points, double factor) {
  if (points.rows() == 0) throw DomainError("resize_instance needs at least one point");
  if (!std::isfinite(factor) || factor <= 0.0) throw DomainError("resize factor must be finite and positive");
  if (!points.allFinite()) throw DomainError("resize_instance got non-finite points");
  const Eigen::RowVector3d c = points.colwise().mean();
  Points out = points;
  out.rowwise() -= c;
  out *= factor;
  out.rowwise() += c;
  return out;
}

struct SynthesisResult {
  Scan scan;
  std::vector<bool> syn_mask;  // P_syn; the complement is P_nm
  int eligible_instances = 0;
  std::vector<std::pair<uint32_t, double>> resized;  // (instance id, factor)
};

/// Picks every instance whose majority label is in K_syn with probability p_syn and resizes
/// it by a factor from the shrink or grow range (fair coin). Instances are visited in
/// ascending id order so the result is a pure function of the rng state.
inline SynthesisResult apply_synthesis(const Scan& scan, const LabelSet& labels, const SynthesisConfig& cfg,
                                       const ClassRegistry& registry, std::mt19937_64& rng) {
  cfg.validate();
  scan.validate();
  labels.validate(registry, scan.size());
  for (ClassId c : cfg.source_classes)
    if (!registry.is_old(c)) throw ConfigError("synthesis source class " + std::to_string(c) + " is not old");

  std::map<uint32_t, std::vector<Eigen::Index>> members;
  for (int i = 0; i < scan.size(); ++i)
    if (uint32_t id = scan.instance_ids[static_cast<size_t>(i)]; id != 0) members[id].push_back(i);

  SynthesisResult out{scan, std::vector<bool>(static_cast<size_t>(scan.size()), false), 0, {}};
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (const auto& [id, idx] : members) {
    std::map<ClassId, int> votes;
    for (auto i : idx)
      if (!labels.is_void(static_cast<int>(i))) ++votes[labels.labels[static_cast<size_t>(i)]];
    if (votes.empty()) continue;
    auto top = std::max_element(votes.begin(), votes.end(),
                                [](const auto& a, const auto& b) { return a.second < b.second; });
    if (std::find(cfg.source_classes.begin(), cfg.source_classes.end(), top->first) == cfg.source_classes.end())
      continue;
    ++out.eligible_instances;
    if (!(u01(rng) < cfg.p_syn)) continue;
    const Range& r = u01(rng) < 0.5 ? cfg.shrink_range : cfg.grow_range;
    const double factor = r.lo + u01(rng) * (r.hi - r.lo);

    Points pts(static_cast<Eigen::Index>(idx.size()), 3);
    for (size_t k = 0; k < idx.size(); ++k) pts.row(static_cast<Eigen::Index>(k)) = scan.points.row(idx[k]);
    Points moved = resize_instance(pts, factor);
    for (size_t k = 0; k < idx.size(); ++k) {
      out.scan.points.row(idx[k]) = moved.row(static_cast<Eigen::Index>(k));
      out.syn_mask[static_cast<size_t>(idx[k])] = true;
    }
    out.resized.emplace_back(id, factor);
  }
  return out;
}

}  // namespace owseg
