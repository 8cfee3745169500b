#pragma once

#include <array>
#include <functional>
#include <limits>
#include <random>
#include <unordered_map>

#include <json.hpp>

#include "owseg/core.hpp"

namespace owseg {

/// Desk-scale stand-in for a voxel backbone: a per-point encoder whose output is averaged over
/// a bird's-eye pillar and concatenated back, then one hidden layer with a dropout site.
struct ArchConfig {
  int encoder_width = 32;
  int hidden_width = 64;  // H
  double dropout_rate = 0.1;
  double voxel_size = 1.0;                 // 3D voxel for the local density input
  std::vector<double> pool_cells{1.0, 4.0};  // bird's-eye pooling cell sides (m), fine to coarse
  double redundancy_init_scale = 0.01;  // shrinks the Xavier init of newly added redundancy slots
  double feature_scale = 3.0;  // hidden features are rescaled to this row norm; 0 disables
  double coord_scale = 16.0;   // x, y normalisation (m)
  double height_scale = 4.0;   // z normalisation (m)
  double density_norm = 32.0;  // points per voxel mapped to feature value 1

  std::vector<int> height_rings{0, 1, 2};  // neighbourhood radii (in pillars) of the top-height inputs

  // x, y, z, intensity, local density, then one top height per ring.
  int input_features() const { return 5 + static_cast<int>(height_rings.size()); }

  void validate() const {
    if (encoder_width <= 0 || hidden_width <= 0) throw ConfigError("layer widths must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0,1)");
    if (!(voxel_size > 0.0 && coord_scale > 0.0 && height_scale > 0.0 && density_norm > 0.0))
      throw ConfigError("voxel and normalisation scales must be positive");
    if (!(feature_scale >= 0.0)) throw ConfigError("feature_scale must be >= 0");
    if (pool_cells.empty()) throw ConfigError("at least one pooling cell size is required");
    for (double c : pool_cells)
      if (!(c > 0.0)) throw ConfigError("pooling cell sizes must be positive");
    for (int r : height_rings)
      if (r < 0) throw ConfigError("height ring radii must be >= 0");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ArchConfig, encoder_width, hidden_width, dropout_rate,
                                                voxel_size, pool_cells, height_rings, redundancy_init_scale, feature_scale, coord_scale, height_scale, density_norm)

struct Linear {
  Matrix W;  // in x out
  Matrix b;  // 1 x out

  Matrix apply(const Matrix& x) const {
    Matrix y = x * W;
    y.rowwise() += b.row(0);
    return y;
  }
};

/// All trainable tensors. Gradients and optimizer moments reuse this shape.
struct Weights {
  Linear encoder1;
  Linear encoder2;
  Linear hidden;
  Linear normal;      // g_nm: H -> C
  Linear redundancy;  // g_re: H -> rc_total (all slots, assigned or not)

  static constexpr std::array<const char*, 10> kNames = {
      "encoder1.W", "encoder1.b", "encoder2.W", "encoder2.b", "hidden.W",
      "hidden.b",   "normal.W",   "normal.b",   "redundancy.W", "redundancy.b"};

  template <class F>
  void for_each(F&& f) {
    Matrix* t[] = {&encoder1.W, &encoder1.b, &encoder2.W, &encoder2.b, &hidden.W,
                   &hidden.b,   &normal.W,   &normal.b,   &redundancy.W, &redundancy.b};
    for (size_t i = 0; i < 10; ++i) f(kNames[i], *t[i]);
  }
  template <class F>
  void for_each(F&& f) const {
    const Matrix* t[] = {&encoder1.W, &encoder1.b, &encoder2.W, &encoder2.b, &hidden.W,
                         &hidden.b,   &normal.W,   &normal.b,   &redundancy.W, &redundancy.b};
    for (size_t i = 0; i < 10; ++i) f(kNames[i], *t[i]);
  }

  Weights zeros_like() const {
    Weights z = *this;
    z.for_each([](const char*, Matrix& m) { m.setZero(); });
    return z;
  }

  bool operator==(const Weights& o) const {
    bool eq = true;
    std::vector<const Matrix*> mine;
    for_each([&](const char*, const Matrix& m) { mine.push_back(&m); });
    size_t k = 0;
    o.for_each([&](const char*, const Matrix& m) {
      const Matrix& a = *mine[k++];
      eq = eq && a.rows() == m.rows() && a.cols() == m.cols() && a == m;
    });
    return eq;
  }
};

/// Model parameters plus everything needed to interpret them.
struct Model {
  ArchConfig arch;
  Stage stage = Stage::closed;
  ClassRegistry registry;
  Weights weights;
  std::optional<double> lambda_th;  // calibrated unknown threshold, set after open-set finetuning

  int num_old() const { return registry.num_old(); }
};

namespace detail {

inline Matrix init_block(int in, int out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  return w;
}

inline Linear init_linear(int in, int out, std::mt19937_64& rng) {
  return Linear{init_block(in, out, rng), Matrix::Zero(1, out)};
}

inline Matrix silu(const Matrix& z) {
  return z.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

inline Matrix silu_grad(const Matrix& z) {
  return z.unaryExpr([](double v) {
    double s = 1.0 / (1.0 + std::exp(-v));
    return s * (1.0 + v * (1.0 - s));
  });
}

inline void check_finite(const Matrix& m, const char* layer) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite activations in layer '") + layer + "'");
}

}  // namespace detail

/// Deterministic in `seed`. Closed models carry no redundancy slots; open models get rc_total.
inline Model init_model(const ClassRegistry& registry, const ArchConfig& arch, uint64_t seed,
                        Stage stage = Stage::closed) {
  arch.validate();
  if (registry.num_old() <= 0) throw ConfigError("the registry needs at least one old class");
  std::mt19937_64 rng(seed);
  const int e = arch.encoder_width, h = arch.hidden_width;
  Model m{arch, stage, registry, {}, std::nullopt};
  m.weights.encoder1 = detail::init_linear(arch.input_features(), e, rng);
  m.weights.encoder2 = detail::init_linear(e, e, rng);
  const int pooled = static_cast<int>(arch.pool_cells.size());
  m.weights.hidden = detail::init_linear((1 + pooled) * e, h, rng);
  m.weights.normal = detail::init_linear(h, registry.num_old(), rng);
  const int slots = stage == Stage::closed ? 0 : registry.rc_total();
  m.weights.redundancy = detail::init_linear(h, slots, rng);
  return m;
}

/// Closed -> open: attaches rc_total freshly initialised redundancy slots.
inline Model add_redundancy_heads(const Model& closed, uint64_t seed) {
  if (closed.stage != Stage::closed) throw DomainError("redundancy heads are added to a closed model");
  if (closed.registry.rc_total() <= 0) throw ConfigError("registry must declare r >= 1 redundancy slots");
  std::mt19937_64 rng(seed);
  Model m = closed;
  m.stage = Stage::open;
  m.weights.redundancy = detail::init_linear(closed.arch.hidden_width, closed.registry.rc_total(), rng);
  m.weights.redundancy.W *= closed.arch.redundancy_init_scale;
  return m;
}

/// Rebinds the lowest free unknown slot to each newly promoted class, keeping its weights,
/// and appends one freshly initialised slot per promotion.
inline Model reassign_rc(const Model& model, const ClassRegistry& advanced, uint64_t seed) {
  const ClassRegistry& before = model.registry;
  if (advanced == before) return model;
  if (model.stage == Stage::closed) throw DomainError("closed models have no redundancy slots to rebind");
  const int added = advanced.rc_total() - before.rc_total();
  if (added < 0 || advanced.num_learned() - before.num_learned() != added)
    throw DomainError("registry was not produced by advancing the model's registry");
  if (before.unknown_slot_count() < added) throw Error("no free redundancy slot to rebind");
  for (auto [slot, cls] : before.rc_assigned())
    if (advanced.rc_assigned().count(slot) == 0 || advanced.rc_assigned().at(slot) != cls)
      throw DomainError("existing slot bindings must be preserved");

  std::mt19937_64 rng(seed);
  Model m = model;
  const int h = model.arch.hidden_width;
  Linear fresh = detail::init_linear(h, added, rng);
  fresh.W *= model.arch.redundancy_init_scale;
  Linear& re = m.weights.redundancy;
  Matrix w(h, advanced.rc_total()), b(1, advanced.rc_total());
  w.leftCols(before.rc_total()) = re.W;
  b.leftCols(before.rc_total()) = re.b;
  w.rightCols(added) = fresh.W;
  b.rightCols(added) = fresh.b;
  re.W = std::move(w);
  re.b = std::move(b);
  m.registry = advanced;
  m.stage = Stage::post_il;
  return m;
}

/// Cell membership of every point at one pooling scale.
struct Cells {
  std::vector<int> id;
  std::vector<int> size;
};

/// Per-point inputs and pooling-cell membership derived from geometry.
struct PointFeatures {
  Matrix x;                  // M x ArchConfig::input_features()
  std::vector<Cells> cells;  // one entry per ArchConfig::pool_cells
};

namespace detail {

// 21 bits per axis is plenty for scenes of a few kilometres at metre resolution.
inline int64_t cell_key(double a, double b, double c, double side) {
  auto pack = [&](double v) { return static_cast<uint64_t>(static_cast<int64_t>(std::floor(v / side))) & 0x1FFFFFu; };
  return static_cast<int64_t>((pack(a) << 42) | (pack(b) << 21) | pack(c));
}

}  // namespace detail

inline PointFeatures compute_features(const Scan& scan, const ArchConfig& arch) {
  scan.validate();
  const int m = scan.size();
  PointFeatures f;
  for (double side : arch.pool_cells) {
    Cells c;
    c.id.resize(static_cast<size_t>(m));
    std::unordered_map<int64_t, int> index;
    for (int i = 0; i < m; ++i) {
      auto [it, inserted] = index.try_emplace(detail::cell_key(scan.points(i, 0), scan.points(i, 1), 0.0, side),
                                              static_cast<int>(index.size()));
      if (inserted) c.size.push_back(0);
      c.id[static_cast<size_t>(i)] = it->second;
      ++c.size[static_cast<size_t>(it->second)];
    }
    f.cells.push_back(std::move(c));
  }
  std::unordered_map<int64_t, int> voxels;
  std::vector<int64_t> vkey(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    vkey[static_cast<size_t>(i)] = detail::cell_key(scan.points(i, 0), scan.points(i, 1), scan.points(i, 2), arch.voxel_size);
    ++voxels[vkey[static_cast<size_t>(i)]];
  }
  const double dnorm = std::log1p(arch.density_norm);
  f.x.resize(m, arch.input_features());
  for (int i = 0; i < m; ++i) {
    f.x(i, 0) = scan.points(i, 0) / arch.coord_scale;
    f.x(i, 1) = scan.points(i, 1) / arch.coord_scale;
    f.x(i, 2) = scan.points(i, 2) / arch.height_scale;
    f.x(i, 3) = scan.has_intensity() ? scan.intensity[static_cast<size_t>(i)] : 0.0;
    f.x(i, 4) = std::log1p(static_cast<double>(voxels[vkey[static_cast<size_t>(i)]])) / dnorm;
  }
  // Top height over the (2r+1)^2 block of voxel-size pillars around each point.
  std::map<std::pair<int64_t, int64_t>, double> top;
  auto column = [&](int i) {
    return std::pair<int64_t, int64_t>{static_cast<int64_t>(std::floor(scan.points(i, 0) / arch.voxel_size)),
                                       static_cast<int64_t>(std::floor(scan.points(i, 1) / arch.voxel_size))};
  };
  for (int i = 0; i < m; ++i) {
    auto [it, inserted] = top.try_emplace(column(i), scan.points(i, 2));
    if (!inserted) it->second = std::max(it->second, scan.points(i, 2));
  }
  for (size_t k = 0; k < arch.height_rings.size(); ++k) {
    const int r = arch.height_rings[k];
    std::map<std::pair<int64_t, int64_t>, double> block;
    for (const auto& [cell, z] : top) {
      double best = z;
      for (int64_t dx = -r; dx <= r; ++dx)
        for (int64_t dy = -r; dy <= r; ++dy)
          if (auto it = top.find({cell.first + dx, cell.second + dy}); it != top.end()) best = std::max(best, it->second);
      block[cell] = best;
    }
    for (int i = 0; i < m; ++i) f.x(i, static_cast<Eigen::Index>(5 + k)) = block[column(i)] / arch.height_scale;
  }
  return f;
}

inline constexpr double kNormEps = 1e-6;

/// Intermediate activations kept for the backward pass.
struct ForwardCache {
  PointFeatures features;
  Matrix z1, a1, z2, a2, u, z3, a3, feat;  // u = [a2, pooled a2 per scale]
  Eigen::VectorXd rho;                     // row norms of a3 when features are normalised
  Matrix dropout_scale;  // empty when dropout was off
};

struct ForwardResult {
  LogitsBundle bundle;
  Matrix redundancy;  // all slots, M x rc_total
  ForwardCache cache;
};

namespace detail {

/// Mean over each point's cell, broadcast back to the members. Self-adjoint, so it also
/// routes gradients backwards.
inline Matrix pool_cells(const Matrix& a, const Cells& cells) {
  Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(cells.size.size()), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) sums.row(cells.id[static_cast<size_t>(i)]) += a.row(i);
  for (Eigen::Index c = 0; c < sums.rows(); ++c) sums.row(c) /= static_cast<double>(cells.size[static_cast<size_t>(c)]);
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) out.row(i) = sums.row(cells.id[static_cast<size_t>(i)]);
  return out;
}

}  // namespace detail

/// Splits the full redundancy output into unknown-slot and learned-novel columns.
inline LogitsBundle split_heads(const Model& model, Matrix y_old, const Matrix& redundancy) {
  LogitsBundle b;
  b.y_old = std::move(y_old);
  const auto uk = model.registry.unknown_slots();
  const auto nv = model.registry.novel_slots();
  const Eigen::Index m = b.y_old.rows();
  if (model.stage == Stage::closed) {
    b.y_uk.resize(m, 0);
    b.y_nv.resize(m, 0);
    return b;
  }
  b.y_uk.resize(m, static_cast<Eigen::Index>(uk.size()));
  b.y_nv.resize(m, static_cast<Eigen::Index>(nv.size()));
  for (size_t k = 0; k < uk.size(); ++k) b.y_uk.col(static_cast<Eigen::Index>(k)) = redundancy.col(uk[k]);
  for (size_t k = 0; k < nv.size(); ++k) b.y_nv.col(static_cast<Eigen::Index>(k)) = redundancy.col(nv[k]);
  return b;
}

/// Runs the network. Dropout is applied only when `dropout_rng` is given.
inline ForwardResult forward_with_cache(const Model& model, const Scan& scan, std::mt19937_64* dropout_rng) {
  const Weights& w = model.weights;
  ForwardResult r;
  ForwardCache& c = r.cache;
  c.features = compute_features(scan, model.arch);
  c.z1 = w.encoder1.apply(c.features.x);
  c.a1 = detail::silu(c.z1);
  detail::check_finite(c.a1, "encoder1");
  c.z2 = w.encoder2.apply(c.a1);
  c.a2 = detail::silu(c.z2);
  detail::check_finite(c.a2, "encoder2");
  const Eigen::Index e = c.a2.cols();
  c.u.resize(c.a2.rows(), e * static_cast<Eigen::Index>(1 + c.features.cells.size()));
  c.u.leftCols(e) = c.a2;
  for (size_t k = 0; k < c.features.cells.size(); ++k)
    c.u.middleCols(e * static_cast<Eigen::Index>(k + 1), e) = detail::pool_cells(c.a2, c.features.cells[k]);
  c.z3 = w.hidden.apply(c.u);
  c.a3 = detail::silu(c.z3);
  detail::check_finite(c.a3, "hidden");
  c.feat = c.a3;
  if (model.arch.feature_scale > 0.0) {
    c.rho = (c.a3.rowwise().squaredNorm().array() + kNormEps).sqrt().matrix();
    c.feat = model.arch.feature_scale * (c.a3.array().colwise() / c.rho.array()).matrix();
  }
  if (dropout_rng && model.arch.dropout_rate > 0.0) {
    const double keep = 1.0 - model.arch.dropout_rate;
    std::bernoulli_distribution bern(keep);
    c.dropout_scale.resize(c.feat.rows(), c.feat.cols());
    for (Eigen::Index i = 0; i < c.dropout_scale.size(); ++i)
      c.dropout_scale.data()[i] = bern(*dropout_rng) ? 1.0 / keep : 0.0;
    c.feat = c.feat.cwiseProduct(c.dropout_scale);
  }
  Matrix y_old = w.normal.apply(c.feat);
  detail::check_finite(y_old, "normal");
  r.redundancy = w.redundancy.W.cols() > 0 ? w.redundancy.apply(c.feat) : Matrix(c.feat.rows(), 0);
  detail::check_finite(r.redundancy, "redundancy");
  r.bundle = split_heads(model, std::move(y_old), r.redundancy);
  return r;
}

inline LogitsBundle forward(const Model& model, const Scan& scan, bool dropout_on = false,
                            std::mt19937_64* rng = nullptr) {
  if (dropout_on && !rng) throw DomainError("dropout needs an rng stream");
  return forward_with_cache(model, scan, dropout_on ? rng : nullptr).bundle;
}

/// Backpropagates head gradients (M x C and M x rc_total) to every weight.
inline Weights backward(const Model& model, const ForwardCache& c, const Matrix& d_old, const Matrix& d_re) {
  const Weights& w = model.weights;
  Weights g = w.zeros_like();
  auto head = [&](const Linear& layer, Linear& grad, const Matrix& dy, Matrix& dfeat) {
    if (dy.cols() == 0) return;
    grad.W = c.feat.transpose() * dy;
    grad.b = dy.colwise().sum();
    dfeat += dy * layer.W.transpose();
  };
  Matrix dfeat = Matrix::Zero(c.feat.rows(), c.feat.cols());
  head(w.normal, g.normal, d_old, dfeat);
  head(w.redundancy, g.redundancy, d_re, dfeat);
  if (c.dropout_scale.size()) dfeat = dfeat.cwiseProduct(c.dropout_scale);
  Matrix da3 = dfeat;
  if (model.arch.feature_scale > 0.0) {
    // d(s a / rho) = s/rho (I - a a^T / rho^2) d
    const Eigen::VectorXd proj = c.a3.cwiseProduct(dfeat).rowwise().sum();
    const Eigen::VectorXd r3 = c.rho.array().cube();
    da3 = model.arch.feature_scale *
          ((dfeat.array().colwise() / c.rho.array()) - (c.a3.array().colwise() * (proj.array() / r3.array())))
              .matrix();
  }

  Matrix dz3 = da3.cwiseProduct(detail::silu_grad(c.z3));
  const Eigen::Index e = c.a2.cols();
  g.hidden.W = c.u.transpose() * dz3;
  g.hidden.b = dz3.colwise().sum();
  Matrix du = dz3 * w.hidden.W.transpose();
  Matrix da2 = du.leftCols(e);
  for (size_t k = 0; k < c.features.cells.size(); ++k)
    da2 += detail::pool_cells(du.middleCols(e * static_cast<Eigen::Index>(k + 1), e), c.features.cells[k]);

  Matrix dz2 = da2.cwiseProduct(detail::silu_grad(c.z2));
  g.encoder2.W = c.a1.transpose() * dz2;
  g.encoder2.b = dz2.colwise().sum();
  Matrix dz1 = (dz2 * w.encoder2.W.transpose()).cwiseProduct(detail::silu_grad(c.z1));
  g.encoder1.W = c.features.x.transpose() * dz1;
  g.encoder1.b = dz1.colwise().sum();
  return g;
}

/// Assembled open or post-IL scores plus which unknown slot won each row's max.
struct AssembledScores {
  Matrix scores;             // column 0 = unknown
  std::vector<int> uk_argmax;  // index into y_uk columns
};

/// open: [max y_uk, y_old]; post-IL: [max y_uk, y_old, y_nv]. Ties go to the lowest slot.
inline AssembledScores assemble_scores(const LogitsBundle& b, Stage stage) {
  if (stage == Stage::closed) throw DomainError("closed models have no unknown entry to assemble");
  if (b.y_uk.cols() == 0) throw DomainError("bundle has no unknown slots");
  if (stage == Stage::open && b.y_nv.cols() != 0) throw DomainError("open-stage bundle carries novel slots");
  const Eigen::Index m = b.y_old.rows(), c = b.y_old.cols(), n = b.y_nv.cols();
  AssembledScores out;
  out.scores.resize(m, 1 + c + n);
  out.uk_argmax.resize(static_cast<size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < b.y_uk.cols(); ++k)
      if (b.y_uk(i, k) > b.y_uk(i, best)) best = k;
    out.uk_argmax[static_cast<size_t>(i)] = static_cast<int>(best);
    out.scores(i, 0) = b.y_uk(i, best);
  }
  out.scores.middleCols(1, c) = b.y_old;
  if (n) out.scores.rightCols(n) = b.y_nv;
  return out;
}

/// Routes d(assembled) back to the bundle; only the winning unknown slot receives gradient.
inline LogitsBundle assembled_backward(const AssembledScores& a, const Matrix& d_scores, const LogitsBundle& shape) {
  const Eigen::Index m = shape.y_old.rows(), c = shape.y_old.cols(), n = shape.y_nv.cols();
  LogitsBundle d;
  d.y_old = d_scores.middleCols(1, c);
  d.y_nv = n ? Matrix(d_scores.rightCols(n)) : Matrix(m, 0);
  d.y_uk = Matrix::Zero(m, shape.y_uk.cols());
  for (Eigen::Index i = 0; i < m; ++i) d.y_uk(i, a.uk_argmax[static_cast<size_t>(i)]) = d_scores(i, 0);
  return d;
}

/// Scatters bundle gradients back onto the full redundancy slot layout.
inline Matrix merge_heads(const Model& model, const LogitsBundle& d) {
  const Eigen::Index m = d.y_old.rows();
  Matrix full = Matrix::Zero(m, model.weights.redundancy.W.cols());
  if (model.stage == Stage::closed) return full;
  const auto uk = model.registry.unknown_slots();
  const auto nv = model.registry.novel_slots();
  for (size_t k = 0; k < uk.size(); ++k) full.col(uk[k]) = d.y_uk.col(static_cast<Eigen::Index>(k));
  for (size_t k = 0; k < nv.size(); ++k) full.col(nv[k]) = d.y_nv.col(static_cast<Eigen::Index>(k));
  return full;
}

}  // namespace owseg
