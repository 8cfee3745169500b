#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace owseg {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

using ClassId = int;

/// Label 0 is reserved for the unknown class everywhere in the model's label space.
inline constexpr ClassId kUnknown = 0;

// Error taxonomy. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct GenerationError : Error {
  using Error::Error;
};

enum class Stage { closed, open, post_il };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::closed: return "closed";
    case Stage::open: return "open";
    case Stage::post_il: return "post-il";
  }
  return "?";
}

inline Stage stage_from_string(std::string_view s) {
  if (s == "closed") return Stage::closed;
  if (s == "open") return Stage::open;
  if (s == "post-il") return Stage::post_il;
  throw FormatError("unknown stage tag '" + std::string(s) + "'");
}

/// Partition of class IDs into old (K_0), learned novel (K_n) and remaining novel (K_rn),
/// plus the bookkeeping of which redundancy slot serves which learned class.
///
/// Values are immutable once built; advance() returns a new registry.
class ClassRegistry {
 public:
  ClassRegistry() = default;

  ClassRegistry(std::vector<ClassId> old_classes, std::vector<ClassId> remaining_novel, int rc_total)
      : old_(std::move(old_classes)), remaining_(std::move(remaining_novel)), rc_total_(rc_total) {
    std::sort(old_.begin(), old_.end());
    std::sort(remaining_.begin(), remaining_.end());
    validate();
  }

  /// Rebuild from a snapshot (checkpoints, manifests).
  static ClassRegistry from_parts(std::vector<ClassId> old_classes, std::vector<ClassId> learned,
                                  std::vector<ClassId> remaining, int rc_total,
                                  std::map<int, ClassId> rc_assigned) {
    ClassRegistry r;
    r.old_ = std::move(old_classes);
    r.learned_ = std::move(learned);
    r.remaining_ = std::move(remaining);
    r.rc_total_ = rc_total;
    r.rc_assigned_ = std::move(rc_assigned);
    std::sort(r.old_.begin(), r.old_.end());
    std::sort(r.remaining_.begin(), r.remaining_.end());
    r.validate();
    return r;
  }

  const std::vector<ClassId>& old_classes() const { return old_; }
  /// Learned novel classes in promotion order; column order of y_nv.
  const std::vector<ClassId>& learned_novel() const { return learned_; }
  const std::vector<ClassId>& remaining_novel() const { return remaining_; }
  const std::map<int, ClassId>& rc_assigned() const { return rc_assigned_; }

  int num_old() const { return static_cast<int>(old_.size()); }
  int num_learned() const { return static_cast<int>(learned_.size()); }
  int rc_total() const { return rc_total_; }
  int unknown_slot_count() const { return rc_total_ - num_learned(); }

  /// Redundancy slot indices still scoring the unknown class, ascending.
  std::vector<int> unknown_slots() const {
    std::vector<int> out;
    for (int s = 0; s < rc_total_; ++s)
      if (!rc_assigned_.count(s)) out.push_back(s);
    return out;
  }

  /// Slot serving each learned class, in learned_novel() order.
  std::vector<int> novel_slots() const {
    std::vector<int> out(learned_.size(), -1);
    for (auto [slot, cls] : rc_assigned_) {
      auto it = std::find(learned_.begin(), learned_.end(), cls);
      out[static_cast<size_t>(it - learned_.begin())] = slot;
    }
    return out;
  }

  bool is_old(ClassId c) const { return std::binary_search(old_.begin(), old_.end(), c); }
  bool is_learned(ClassId c) const {
    return std::find(learned_.begin(), learned_.end(), c) != learned_.end();
  }
  bool is_remaining(ClassId c) const {
    return std::binary_search(remaining_.begin(), remaining_.end(), c);
  }
  bool is_known(ClassId c) const { return is_old(c) || is_learned(c); }

  /// Position in the closed output [y_old, y_nv], or -1.
  int closed_index(ClassId c) const {
    auto it = std::lower_bound(old_.begin(), old_.end(), c);
    if (it != old_.end() && *it == c) return static_cast<int>(it - old_.begin());
    auto jt = std::find(learned_.begin(), learned_.end(), c);
    if (jt != learned_.end()) return num_old() + static_cast<int>(jt - learned_.begin());
    return -1;
  }

  /// Inverse of closed_index.
  ClassId closed_class(int index) const {
    if (index < num_old()) return old_[static_cast<size_t>(index)];
    return learned_[static_cast<size_t>(index - num_old())];
  }

  /// Moves `promoted` from remaining to learned, binds each to the lowest free slot and
  /// appends one fresh unknown slot per promotion so the unknown slot count stays fixed.
  ClassRegistry advance(const std::vector<ClassId>& promoted) const {
    ClassRegistry next = *this;
    for (ClassId c : promoted) {
      if (c == kUnknown) throw DomainError("cannot promote the reserved unknown label 0");
      if (next.is_old(c)) throw DomainError("class " + std::to_string(c) + " is already an old class");
      if (next.is_learned(c)) throw DomainError("class " + std::to_string(c) + " was already learned");
      if (!next.is_remaining(c))
        throw DomainError("class " + std::to_string(c) + " is not a remaining novel class");
      int slot = next.unknown_slots().front();
      next.rc_assigned_[slot] = c;
      next.learned_.push_back(c);
      next.remaining_.erase(std::find(next.remaining_.begin(), next.remaining_.end(), c));
      next.rc_total_ += 1;
    }
    next.validate();
    return next;
  }

  bool operator==(const ClassRegistry&) const = default;

 private:
  void validate() const {
    if (rc_total_ < 0) throw DomainError("negative redundancy classifier count");
    std::vector<ClassId> all;
    for (const auto* set : {&old_, &learned_, &remaining_})
      for (ClassId c : *set) {
        if (c <= 0) throw DomainError("class IDs must be positive integers, got " + std::to_string(c));
        all.push_back(c);
      }
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end())
      throw DomainError("old, learned and remaining class sets must be disjoint");
    if (rc_assigned_.size() != learned_.size())
      throw DomainError("every learned class needs exactly one redundancy slot");
    if (num_learned() > rc_total_) throw DomainError("more learned classes than redundancy slots");
    for (auto [slot, cls] : rc_assigned_) {
      if (slot < 0 || slot >= rc_total_) throw DomainError("redundancy slot index out of range");
      if (!is_learned(cls)) throw DomainError("slot bound to a class that is not learned");
    }
  }

  std::vector<ClassId> old_;
  std::vector<ClassId> learned_;
  std::vector<ClassId> remaining_;
  int rc_total_ = 0;
  std::map<int, ClassId> rc_assigned_;
};

/// One LIDAR frame.
struct Scan {
  Points points;
  std::vector<double> intensity;  // empty when the source carries none
  std::vector<uint32_t> instance_ids;

  int size() const { return static_cast<int>(points.rows()); }
  bool has_intensity() const { return !intensity.empty(); }

  void validate() const {
    if (points.rows() == 0) throw DomainError("scan has no points");
    if (!points.allFinite()) throw DomainError("scan contains non-finite coordinates");
    if (instance_ids.size() != static_cast<size_t>(points.rows()))
      throw DomainError("instance id count does not match point count");
    if (has_intensity()) {
      if (intensity.size() != static_cast<size_t>(points.rows()))
        throw DomainError("intensity count does not match point count");
      for (double v : intensity)
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("intensity outside [0,1]");
    }
  }
};

enum class LabelDomain {
  closed_old,    // K_0
  open,          // {0} ∪ K_0
  post_il,       // {0} ∪ K_0 ∪ K_n
  ground_truth,  // any positive dataset class ID
};

inline std::string_view to_string(LabelDomain d) {
  switch (d) {
    case LabelDomain::closed_old: return "closed-old";
    case LabelDomain::open: return "open";
    case LabelDomain::post_il: return "post-il";
    case LabelDomain::ground_truth: return "ground-truth";
  }
  return "?";
}

/// Per-point labels. Void points carry label 0 and are excluded from losses and metrics.
struct LabelSet {
  std::vector<ClassId> labels;
  std::vector<bool> void_mask;
  LabelDomain domain = LabelDomain::ground_truth;

  int size() const { return static_cast<int>(labels.size()); }
  bool is_void(int i) const { return void_mask[static_cast<size_t>(i)]; }

  int non_void_count() const {
    return static_cast<int>(std::count(void_mask.begin(), void_mask.end(), false));
  }

  static LabelSet all_void(int m, LabelDomain d) {
    return LabelSet{std::vector<ClassId>(static_cast<size_t>(m), 0),
                    std::vector<bool>(static_cast<size_t>(m), true), d};
  }

  bool in_domain(ClassId c, const ClassRegistry& reg) const {
    switch (domain) {
      case LabelDomain::closed_old: return reg.is_old(c);
      case LabelDomain::open: return c == kUnknown || reg.is_old(c);
      case LabelDomain::post_il: return c == kUnknown || reg.is_known(c);
      case LabelDomain::ground_truth: return c > 0;
    }
    return false;
  }

  void validate(const ClassRegistry& reg, int expected_size) const {
    if (size() != expected_size || void_mask.size() != labels.size())
      throw DomainError("label count does not match the paired scan");
    for (int i = 0; i < size(); ++i)
      if (!is_void(i) && !in_domain(labels[static_cast<size_t>(i)], reg))
        throw DomainError("label " + std::to_string(labels[static_cast<size_t>(i)]) +
                          " outside declared domain " + std::string(to_string(domain)));
  }

  bool operator==(const LabelSet&) const = default;
};

/// Raw per-point head outputs. y_uk holds only the slots still serving the unknown class.
struct LogitsBundle {
  Matrix y_old;
  Matrix y_uk;
  Matrix y_nv;

  int rows() const { return static_cast<int>(y_old.rows()); }

  bool operator==(const LogitsBundle& o) const {
    auto same = [](const Matrix& a, const Matrix& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
    };
    return same(y_old, o.y_old) && same(y_uk, o.y_uk) && same(y_nv, o.y_nv);
  }
};

}  // namespace owseg
