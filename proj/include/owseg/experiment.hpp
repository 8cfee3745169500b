#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <functional>

#include <json.hpp>

#include "owseg/checkpoint.hpp"
#include "owseg/eval.hpp"
#include "owseg/incremental.hpp"

namespace owseg {

namespace fs = std::filesystem;

inline constexpr const char* kRootEnv = "OWSEG_EXPERIMENT_ROOT";

struct RegistryConfig {
  std::vector<ClassId> old_classes{1, 2, 3, 4};
  std::vector<ClassId> novel_classes{5};
  int r = 3;

  ClassRegistry build() const {
    if (r < 1) throw ConfigError("registry.r must be >= 1");
    try {
      return ClassRegistry(old_classes, novel_classes, r);
    } catch (const DomainError& e) {
      throw ConfigError(std::string("registry: ") + e.what());
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RegistryConfig, old_classes, novel_classes, r)

struct DatasetConfig {
  int scenes = 64;  // even seeds train, odd seeds validate
  SceneConfig scene = SceneConfig::defaults();
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, scenes, scene)

/// Everything one experiment directory is built from. `seed` drives the scene seeds and every
/// training stage; the per-section seed fields are overwritten from it.
struct ExperimentConfig {
  uint64_t seed = 0;
  DatasetConfig dataset;
  RegistryConfig registry;
  ArchConfig arch;
  SynthesisConfig synthesis;
  LossConfig loss;
  InferenceConfig inference;
  TrainingConfig training;
  std::string output_dir = "experiment";

  void validate() const {
    if (dataset.scenes < 2) throw ConfigError("dataset.scenes must be >= 2 (one train and one validation scene)");
    const ClassRegistry reg = registry.build();
    dataset.scene.validate_against(reg);
    arch.validate();
    synthesis.validate();
    for (ClassId c : synthesis.source_classes)
      if (!reg.is_old(c)) throw ConfigError("synthesis source class " + std::to_string(c) + " is not old");
    loss.validate();
    inference.validate();
    training.validate();
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"seed", c.seed},           {"dataset", c.dataset},     {"registry", c.registry},
       {"arch", c.arch},           {"synthesis", c.synthesis}, {"loss", c.loss},
       {"inference", c.inference}, {"training", c.training},   {"output_dir", c.output_dir}};
}

namespace detail {
// Typos would otherwise be dropped silently by the merge below.
inline void reject_unknown_keys(const nlohmann::json& user, const nlohmann::json& defaults, const std::string& path) {
  for (const auto& [key, value] : user.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + path + key + "'");
    if (value.is_object() && defaults.at(key).is_object()) reject_unknown_keys(value, defaults.at(key), path + key + ".");
  }
}
}  // namespace detail

/// Missing keys keep their defaults (nested objects are merged, arrays replaced).
inline ExperimentConfig parse_config(const nlohmann::json& user) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  if (!user.contains("seed")) throw ConfigError("config is missing the mandatory 'seed'");
  nlohmann::json merged = ExperimentConfig{};
  detail::reject_unknown_keys(user, merged, "");
  merged.merge_patch(user);
  ExperimentConfig c;
  try {
    c.seed = merged.at("seed").get<uint64_t>();
    c.dataset = merged.at("dataset").get<DatasetConfig>();
    c.registry = merged.at("registry").get<RegistryConfig>();
    c.arch = merged.at("arch").get<ArchConfig>();
    c.synthesis = merged.at("synthesis").get<SynthesisConfig>();
    c.loss = merged.at("loss").get<LossConfig>();
    c.inference = merged.at("inference").get<InferenceConfig>();
    c.training = merged.at("training").get<TrainingConfig>();
    c.output_dir = merged.at("output_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.dataset.scene.rng_seed = c.seed;
  c.training.seed = c.seed;
  c.synthesis.rng_seed = c.seed;
  c.validate();
  return c;
}

inline ExperimentConfig parse_config_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

/// --root beats the environment variable, which beats the config's output_dir.
inline fs::path resolve_root(const std::optional<std::string>& flag, const std::string& config_dir) {
  if (flag) return *flag;
  if (const char* env = std::getenv(kRootEnv); env && *env) return env;
  return config_dir;
}

/// One writer per experiment directory. flock is released by the kernel if the process dies.
class ExperimentLock {
 public:
  explicit ExperimentLock(const fs::path& root) {
    fs::create_directories(root);
    const fs::path p = root / "owseg.lock";
    fd_ = ::open(p.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw ConfigError("cannot open lock file " + p.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw ConfigError("experiment directory " + root.string() + " is locked by another process");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::ftruncate(fd_, 0) == 0 && ::write(fd_, pid.data(), pid.size()) < 0) { /* informational only */ }
  }
  ~ExperimentLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  ExperimentLock(const ExperimentLock&) = delete;
  ExperimentLock& operator=(const ExperimentLock&) = delete;

 private:
  int fd_ = -1;
};

enum class ILMethod { real, finetune, feature_extraction };

inline ILMethod il_method_from_string(std::string_view s) {
  if (s == "real") return ILMethod::real;
  if (s == "finetune") return ILMethod::finetune;
  if (s == "feature-extraction") return ILMethod::feature_extraction;
  throw ConfigError("unknown IL method '" + std::string(s) + "'");
}

inline std::string format_trace(const std::vector<double>& trace) {
  std::string out;
  char buf[40];
  for (double v : trace) {
    std::snprintf(buf, sizeof buf, "%.17g\n", v);
    out += buf;
  }
  return out;
}

struct CommandResult {
  bool reused = false;     // outputs were already present and verified
  std::string stage;       // stage or report name
  nlohmann::json summary;  // headline numbers for logs and tests
};

/// Drives the experiment directory:
///
///   config.json            effective config
///   data/                  scenes + labels + manifest.json
///   checkpoints/<sha>.json content-addressed checkpoints
///   stages/<name>.json     stage manifests, stages/<name>.loss.txt loss traces, stages/HEAD
///   pseudo/<stage>/        pseudo-label cache of IL stages
///   reports/               evaluation reports, histograms, score dumps
///   plots/                 plot-ready CSV/JSON
class Experiment {
 public:
  using Logger = std::function<void(const std::string&)>;

  Experiment(ExperimentConfig cfg, fs::path root, Logger log = {})
      : cfg_(std::move(cfg)), root_(std::move(root)), log_(std::move(log)) {
    cfg_.validate();
    registry_ = cfg_.registry.build();
  }

  const fs::path& root() const { return root_; }
  const ExperimentConfig& config() const { return cfg_; }

  // -------------------------------------------------------------------------------------------
  CommandResult gen_data() {
    ExperimentLock lock(root_);
    const nlohmann::json key = command_key("gen-data", {});
    if (auto r = reuse(root_ / "data" / "manifest.json", key)) return *r;
    write_text("config.json", nlohmann::json(cfg_).dump(2) + "\n");

    nlohmann::json files = nlohmann::json::array();
    Outputs out;
    SceneConfig sc = cfg_.dataset.scene;
    for (int i = 0; i < cfg_.dataset.scenes; ++i) {
      sc.rng_seed = cfg_.seed + static_cast<uint64_t>(i);
      GeneratedScene g = generate_scene(sc, registry_);
      const std::string stem = "data/scene_" + pad(i);
      out.add(*this, stem + ".bin", write_scan(g.scan));
      out.add(*this, stem + ".label", write_labels(g.full_labels, g.scan.instance_ids));
      files.push_back({{"seed", sc.rng_seed},
                       {"split", sc.rng_seed % 2 == 0 ? "train" : "val"},
                       {"scan", stem + ".bin"},
                       {"label", stem + ".label"}});
    }
    nlohmann::json manifest = key;
    manifest["scenes"] = files;
    manifest["scene_config"] = cfg_.dataset.scene;
    manifest["registry"] = registry_to_json(registry_);
    manifest["outputs"] = out.hashes;
    write_manifest(root_ / "data" / "manifest.json", manifest);
    log("generated " + std::to_string(cfg_.dataset.scenes) + " scenes");
    return {false, "data", {{"scenes", cfg_.dataset.scenes}}};
  }

  CommandResult train_closed() {
    ExperimentLock lock(root_);
    const nlohmann::json key = command_key("train-closed", {{"data", data_hash()}});
    if (auto r = reuse(stage_manifest("closed"), key)) return *r;
    const Dataset ds = load_dataset();
    Model m = init_model(registry_, cfg_.arch, cfg_.seed, Stage::closed);
    auto trace = guarded([&] { return owseg::train_closed(m, ds.train, cfg_.training); });
    return finish_stage("closed", key, m, trace, {}, {});
  }

  CommandResult finetune_oseg() {
    ExperimentLock lock(root_);
    const std::string src = stage_checkpoint("closed");
    const nlohmann::json key = command_key("finetune-oseg", {{"data", data_hash()}, {"source", src}});
    if (auto r = reuse(stage_manifest("oseg"), key)) return *r;
    const Dataset ds = load_dataset();
    Model m = add_redundancy_heads(load_model(src), cfg_.seed + 1);
    auto trace = guarded([&] { return owseg::finetune_oseg(m, ds.train, cfg_.synthesis, cfg_.loss, cfg_.training); });
    calibrate_model_threshold(m, ds.val, cfg_.inference.target_tpr);
    return finish_stage("oseg", key, m, trace, {{"source_stage", "closed"}, {"source_checkpoint", src}}, {});
  }

  /// `from` defaults to the stage named in stages/HEAD. Baseline methods do not advance HEAD.
  CommandResult il(ClassId cls, ILMethod method = ILMethod::real, std::optional<std::string> from = {}) {
    ExperimentLock lock(root_);
    const std::string name = il_stage_name(cls, method);
    // An identical re-run resolves its source from the existing manifest rather than HEAD.
    if (!from && fs::exists(stage_manifest(name)))
      from = read_json(stage_manifest(name)).at("source_stage").get<std::string>();
    const std::string source_stage = from ? *from : head();
    const std::string src = stage_checkpoint(source_stage);
    const nlohmann::json key =
        command_key("il", {{"data", data_hash()}, {"source", src}, {"class", cls}, {"method", method_name(method)}});
    if (auto r = reuse(stage_manifest(name), key)) return *r;

    const Model model_o = load_model(src);
    if (model_o.registry.is_learned(cls)) throw ConfigError("class " + std::to_string(cls) + " was already learned");
    if (!model_o.registry.is_remaining(cls))
      throw ConfigError("class " + std::to_string(cls) + " is not a remaining novel class of stage " + source_stage);
    const Dataset ds = load_dataset();
    const ILStagePlan plan{cls, cfg_.training.epochs_il, src};
    ILResult res = guarded([&] {
      switch (method) {
        case ILMethod::real: return run_il_stage(model_o, plan, ds.train, cfg_.synthesis, cfg_.loss, cfg_.training);
        case ILMethod::finetune: return baseline_finetune(model_o, plan, ds.train, cfg_.training);
        case ILMethod::feature_extraction: return baseline_feature_extraction(model_o, plan, ds.train, cfg_.training);
      }
      throw ConfigError("unknown IL method");
    });
    calibrate_model_threshold(res.model, ds.val, cfg_.inference.target_tpr);

    Outputs pseudo;
    const std::string pseudo_dir = "pseudo/" + name;
    for (size_t i = 0; i < res.pseudo_labels.size(); ++i) {
      std::vector<uint32_t> no_instances(res.pseudo_labels[i].labels.size(), 0);
      pseudo.add(*this, pseudo_dir + "/train_" + pad(static_cast<int>(i)) + ".label",
                 write_labels(res.pseudo_labels[i], no_instances));
    }
    nlohmann::json extra = {{"source_stage", source_stage},
                            {"source_checkpoint", src},
                            {"promoted_class", cls},
                            {"method", method_name(method)},
                            {"epochs", plan.epochs}};
    extra["pseudo_label_dir"] = res.pseudo_labels.empty() ? nlohmann::json(nullptr) : nlohmann::json(pseudo_dir);
    return finish_stage(name, key, res.model, res.trace, extra, pseudo.hashes, method == ILMethod::real);
  }

  /// Without a method, closed stages are scored by segmentation alone and other stages use REAL.
  CommandResult evaluate(std::optional<ScoringMethod> method = {}, std::optional<std::string> stage = {}, int bins = 50) {
    ExperimentLock lock(root_);
    const std::string st = stage ? *stage : head();
    const std::string src = stage_checkpoint(st);
    const Model model = load_model(src);
    if (!method && model.stage != Stage::closed) method = ScoringMethod::real;
    check_method(model, method);
    const std::string name = st + "_" + (method ? std::string(to_string(*method)) : std::string("none"));
    const nlohmann::json key =
        command_key("evaluate", {{"data", data_hash()}, {"source", src}, {"method", name}, {"bins", bins}});
    const fs::path manifest_path = root_ / "reports" / (name + ".manifest.json");
    if (auto r = reuse(manifest_path, key)) return *r;

    const Dataset ds = load_dataset();
    Scored sc = score_split(model, ds.val, method);
    EvalReport rep = sc.closed.report();
    nlohmann::json j = rep;
    j["stage"] = std::string(to_string(model.stage));
    j["method"] = method ? nlohmann::json(std::string(to_string(*method))) : nlohmann::json(nullptr);
    Outputs out;
    if (method) {
      if (sc.has_both_classes()) {
        j["auroc"] = auroc(sc.scores, sc.is_unknown);
        j["aupr"] = aupr(sc.scores, sc.is_unknown);
      }
      Histogram h = export_histogram(sc.scores, sc.is_unknown, bins);
      j["histogram"] = h;
      j["mean_score_known"] = sc.mean(false);
      j["mean_score_unknown"] = sc.has_both_classes() ? nlohmann::json(sc.mean(true)) : nlohmann::json(nullptr);
      out.add(*this, "reports/" + name + ".hist.csv", h.to_csv());
      out.add(*this, "reports/" + name + ".scores.csv", sc.dump_csv());
    }
    if (sc.open) {
      EvalReport o = sc.open->report();
      j["open_set"] = {{"lambda_th", sc.lambda_th}, {"confusion", o.confusion}, {"miou", o.miou},
                       {"miou_old", o.miou_old},    {"miou_novel", o.miou_novel}};
    }
    out.add(*this, "reports/" + name + ".json", j.dump(2) + "\n");
    nlohmann::json manifest = key;
    manifest["outputs"] = out.hashes;
    manifest["summary"] = summary_of(j);
    write_manifest(manifest_path, manifest);
    log("evaluated " + name);
    return {false, name, manifest["summary"]};
  }

  /// Per-point (scan, point, score, pred, gt) records; gt -1 marks void points.
  CommandResult dump_scores(ScoringMethod method, std::optional<std::string> stage = {}, bool binary = false) {
    ExperimentLock lock(root_);
    const std::string st = stage ? *stage : head();
    const std::string src = stage_checkpoint(st);
    const Model model = load_model(src);
    check_method(model, method);
    const std::string name = st + "_" + std::string(to_string(method)) + (binary ? ".scores.bin" : ".scores.csv");
    const nlohmann::json key = command_key("dump-scores", {{"data", data_hash()}, {"source", src}, {"name", name}});
    const fs::path manifest_path = root_ / "reports" / (name + ".manifest.json");
    if (auto r = reuse(manifest_path, key)) return *r;
    const Dataset ds = load_dataset();
    Scored sc = score_split(model, ds.val, method);
    Outputs out;
    out.add(*this, "reports/" + name, binary ? sc.dump_binary() : to_bytes(sc.dump_csv()));
    nlohmann::json manifest = key;
    manifest["outputs"] = out.hashes;
    manifest["layout"] = binary ? "little-endian records: u32 scan, u32 point, f64 score, i32 pred, i32 gt"
                                : "csv: scan,point,score,pred,gt";
    write_manifest(manifest_path, manifest);
    return {false, name, {{"points", sc.scores.size()}}};
  }

  /// Loss traces of every completed stage and histograms of every report, as CSV, plus an index.
  CommandResult plot_data() {
    ExperimentLock lock(root_);
    nlohmann::json index = {{"loss", nlohmann::json::array()}, {"histograms", nlohmann::json::array()}};
    std::vector<fs::path> stages, reports;
    if (fs::exists(root_ / "stages"))
      for (const auto& e : fs::directory_iterator(root_ / "stages"))
        if (e.path().extension() == ".json") stages.push_back(e.path());
    if (fs::exists(root_ / "reports"))
      for (const auto& e : fs::directory_iterator(root_ / "reports"))
        if (e.path().string().ends_with(".hist.csv")) reports.push_back(e.path());
    std::sort(stages.begin(), stages.end());
    std::sort(reports.begin(), reports.end());
    for (const auto& p : stages) {
      const auto m = read_json(p);
      std::string csv = "epoch,loss\n";
      const auto trace = m.at("loss_trace").get<std::vector<double>>();
      char buf[64];
      for (size_t e = 0; e < trace.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", e + 1, trace[e]);
        csv += buf;
      }
      const std::string rel = "plots/loss_" + p.stem().string() + ".csv";
      write_text(rel, csv);
      index["loss"].push_back({{"stage", p.stem().string()}, {"file", rel}});
    }
    for (const auto& p : reports) {
      std::string stem = p.filename().string();
      stem.resize(stem.size() - std::string(".hist.csv").size());
      const std::string rel = "plots/hist_" + stem + ".csv";
      write_text(rel, read_text(p));
      index["histograms"].push_back({{"report", stem}, {"file", rel}});
    }
    write_text("plots/index.json", index.dump(2) + "\n");
    return {false, "plots", index};
  }

  // -------------------------------------------------------------------------------------------
  std::string head() const {
    const fs::path p = root_ / "stages" / "HEAD";
    if (!fs::exists(p)) throw ConfigError("no completed training stage in " + root_.string());
    std::string s = read_text(p);
    while (!s.empty() && (s.back() == '\n' || s.back() == ' ')) s.pop_back();
    return s;
  }

  /// Checkpoint path (relative to the root) recorded by a completed stage.
  std::string stage_checkpoint(const std::string& stage) const {
    const fs::path p = stage_manifest(stage);
    if (!fs::exists(p)) throw ConfigError("stage '" + stage + "' has not been run");
    return read_json(p).at("checkpoint").get<std::string>();
  }

  Model load_model(const std::string& rel) const {
    const std::string text = read_text(root_ / rel);
    const std::string expected = fs::path(rel).stem().string();
    if (sha256_hex(text) != expected) throw FormatError("checkpoint " + rel + " does not match its content hash");
    return load_checkpoint(text);
  }

  nlohmann::json stage_info(const std::string& stage) const { return read_json(stage_manifest(stage)); }

  nlohmann::json report(const std::string& name) const { return read_json(root_ / "reports" / (name + ".json")); }

  Dataset load_dataset() const {
    const auto manifest = read_json(root_ / "data" / "manifest.json");
    Dataset ds;
    for (const auto& f : manifest.at("scenes")) {
      Bytes sb = read_file(root_ / f.at("scan").get<std::string>());
      Bytes lb = read_file(root_ / f.at("label").get<std::string>());
      Scan scan = read_scan(sb);
      LabelFile lf = read_labels(lb, scan.size());
      scan.instance_ids = lf.instance_ids;
      (f.at("split") == "train" ? ds.train : ds.val).push_back({std::move(scan), std::move(lf.labels)});
    }
    if (ds.train.empty() || ds.val.empty()) throw ConfigError("dataset needs both train and validation scenes");
    return ds;
  }

  static std::string il_stage_name(ClassId cls, ILMethod method) {
    std::string n = "il_" + std::to_string(cls);
    if (method == ILMethod::finetune) n += "_finetune";
    if (method == ILMethod::feature_extraction) n += "_feature-extraction";
    return n;
  }

 private:
  struct Outputs {
    nlohmann::json hashes = nlohmann::json::object();
    void add(Experiment& e, const std::string& rel, const std::string& text) { hashes[rel] = e.write_text(rel, text); }
    void add(Experiment& e, const std::string& rel, const Bytes& b) { hashes[rel] = e.write_bytes(rel, b); }
  };

  /// Validation-split predictions and unknown scores of one model.
  struct Scored {
    ConfusionAccumulator closed;
    std::optional<ConfusionAccumulator> open;
    double lambda_th = 0.0;
    std::vector<double> scores;
    std::vector<bool> is_unknown;
    std::vector<uint32_t> scan_index, point_index;
    std::vector<int> pred, gt;

    bool has_both_classes() const {
      const auto pos = std::count(is_unknown.begin(), is_unknown.end(), true);
      return pos > 0 && pos < static_cast<long>(is_unknown.size());
    }
    double mean(bool unknown) const {
      double s = 0.0;
      long n = 0;
      for (size_t i = 0; i < scores.size(); ++i)
        if (is_unknown[i] == unknown) {
          s += scores[i];
          ++n;
        }
      return n ? s / static_cast<double>(n) : 0.0;
    }
    std::string dump_csv() const {
      std::string out = "scan,point,score,pred,gt\n";
      char buf[96];
      for (size_t i = 0; i < scores.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%u,%u,%.17g,%d,%d\n", scan_index[i], point_index[i], scores[i], pred[i], gt[i]);
        out += buf;
      }
      return out;
    }
    Bytes dump_binary() const {
      Bytes out;
      for (size_t i = 0; i < scores.size(); ++i) {
        detail::store_le32(scan_index[i], out);
        detail::store_le32(point_index[i], out);
        const auto bits = std::bit_cast<uint64_t>(scores[i]);
        detail::store_le32(static_cast<uint32_t>(bits), out);
        detail::store_le32(static_cast<uint32_t>(bits >> 32), out);
        detail::store_le32(static_cast<uint32_t>(pred[i]), out);
        detail::store_le32(static_cast<uint32_t>(gt[i]), out);
      }
      return out;
    }
  };

  static std::string method_name(ILMethod m) {
    switch (m) {
      case ILMethod::real: return "real";
      case ILMethod::finetune: return "finetune";
      case ILMethod::feature_extraction: return "feature-extraction";
    }
    return "?";
  }

  static std::string pad(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", i);
    return buf;
  }

  static Bytes to_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

  void check_method(const Model& model, const std::optional<ScoringMethod>& method) const {
    if (!method) return;
    if (*method == ScoringMethod::real && model.stage == Stage::closed)
      throw ConfigError("method 'real' needs an open-set or post-IL checkpoint");
    if (*method == ScoringMethod::mcdropout && model.arch.dropout_rate <= 0.0)
      throw ConfigError("method 'mcdropout' needs a model trained with dropout");
  }

  Scored score_split(const Model& model, const std::vector<Sample>& val, const std::optional<ScoringMethod>& method) const {
    Scored sc{ConfusionAccumulator(model.registry), {}, 0.0, {}, {}, {}, {}, {}, {}};
    if (model.stage != Stage::closed) {
      sc.open.emplace(model.registry);
      sc.lambda_th = resolve_threshold(model, cfg_.inference);
    }
    for (size_t s = 0; s < val.size(); ++s) {
      const auto& sample = val[s];
      const LogitsBundle b = forward(model, sample.scan);
      const LabelSet pred = model.stage == Stage::closed ? predict_closed(model, b) : predict_post_il(model, b);
      sc.closed.add(pred, sample.full_labels);
      if (sc.open) sc.open->add(predict_open(model, b, sc.lambda_th), sample.full_labels);
      if (!method) continue;
      std::vector<double> score;
      if (*method == ScoringMethod::mcdropout) {
        InferenceConfig ic = cfg_.inference;
        ic.scoring_method = *method;
        ic.mc_seed = cfg_.seed * 1000003ULL + s;  // private stream per scan
        score = unknown_score(model, sample.scan, ic);
      } else {
        score = unknown_score(b, *method);
      }
      for (int i = 0; i < sample.full_labels.size(); ++i) {
        const bool v = sample.full_labels.is_void(i);
        const ClassId g = sample.full_labels.labels[static_cast<size_t>(i)];
        if (!v) {
          sc.scores.push_back(score[static_cast<size_t>(i)]);
          sc.is_unknown.push_back(!model.registry.is_known(g));
          sc.scan_index.push_back(static_cast<uint32_t>(s));
          sc.point_index.push_back(static_cast<uint32_t>(i));
          sc.pred.push_back(pred.labels[static_cast<size_t>(i)]);
          sc.gt.push_back(g);
        }
      }
    }
    return sc;
  }

  static nlohmann::json summary_of(const nlohmann::json& report) {
    nlohmann::json s;
    for (const char* k : {"miou", "miou_old", "miou_novel", "auroc", "aupr", "mean_score_known", "mean_score_unknown"})
      if (report.contains(k)) s[k] = report[k];
    return s;
  }

  template <class F>
  std::invoke_result_t<F> guarded(F&& f) {
    try {
      return f();
    } catch (const DivergenceError& e) {
      // Keep the last finite weights around for inspection before failing.
      const std::string text = save_checkpoint(e.last_finite);
      write_text("checkpoints/diverged_" + sha256_hex(text) + ".json", text);
      throw;
    }
  }

  CommandResult finish_stage(const std::string& name, const nlohmann::json& key, const Model& m,
                             const std::vector<double>& trace, nlohmann::json extra, const nlohmann::json& more_outputs,
                             bool advance_head = true) {
    const std::string text = save_checkpoint(m);
    const std::string ckpt = "checkpoints/" + sha256_hex(text) + ".json";
    Outputs out;
    out.add(*this, ckpt, text);
    out.add(*this, "stages/" + name + ".loss.txt", format_trace(trace));
    if (more_outputs.is_object())
      for (const auto& [k, v] : more_outputs.items()) out.hashes[k] = v;
    nlohmann::json manifest = key;
    if (extra.is_object()) manifest.update(extra);
    manifest["stage"] = std::string(to_string(m.stage));
    manifest["checkpoint"] = ckpt;
    manifest["loss_trace"] = trace;
    manifest["lambda_th"] = m.lambda_th ? nlohmann::json(*m.lambda_th) : nlohmann::json(nullptr);
    manifest["registry"] = registry_to_json(m.registry);
    manifest["outputs"] = out.hashes;
    write_manifest(stage_manifest(name), manifest);
    if (advance_head) write_text("stages/HEAD", name + "\n");
    log("stage " + name + " done, checkpoint " + ckpt);
    return {false, name, {{"checkpoint", ckpt}, {"final_loss", trace.empty() ? 0.0 : trace.back()}}};
  }

  nlohmann::json command_key(const std::string& command, nlohmann::json inputs) const {
    nlohmann::json c = cfg_;
    c.erase("output_dir");
    return {{"command", command}, {"config_sha256", sha256_hex(c.dump())}, {"inputs", std::move(inputs)}};
  }

  /// A manifest with the same key whose outputs all still hash correctly makes the command a no-op.
  std::optional<CommandResult> reuse(const fs::path& manifest_path, const nlohmann::json& key) {
    if (!fs::exists(manifest_path)) return std::nullopt;
    nlohmann::json m;
    try {
      m = read_json(manifest_path);
    } catch (const Error&) {
      log("unreadable manifest " + manifest_path.string() + ", recomputing");
      return std::nullopt;
    }
    for (const char* k : {"command", "config_sha256", "inputs"})
      if (!m.contains(k) || m[k] != key[k]) return std::nullopt;
    for (const auto& [rel, hash] : m.at("outputs").items()) {
      const fs::path p = root_ / rel;
      if (!fs::exists(p) || sha256_hex(read_file(p)) != hash.get<std::string>()) {
        log("output " + rel + " is missing or modified, recomputing");
        return std::nullopt;
      }
    }
    log(manifest_path.filename().string() + " is up to date, outputs verified");
    CommandResult r{true, manifest_path.stem().string(), m.value("summary", nlohmann::json::object())};
    if (m.contains("checkpoint")) r.summary["checkpoint"] = m["checkpoint"];
    // A verified REAL stage becomes HEAD again so chained commands pick it up.
    if (m.contains("checkpoint") && m.value("method", std::string("real")) == "real")
      write_text("stages/HEAD", manifest_path.stem().string() + "\n");
    return r;
  }

  std::string data_hash() const {
    const fs::path p = root_ / "data" / "manifest.json";
    if (!fs::exists(p)) throw ConfigError("no dataset in " + root_.string() + "; run gen-data first");
    return sha256_hex(read_file(p));
  }

  fs::path stage_manifest(const std::string& name) const { return root_ / "stages" / (name + ".json"); }

  static std::string read_text(const fs::path& p) {
    Bytes b = read_file(p);
    return std::string(b.begin(), b.end());
  }

  static nlohmann::json read_json(const fs::path& p) {
    try {
      return nlohmann::json::parse(read_text(p));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("cannot parse " + p.string() + ": " + e.what());
    }
  }

  // Writes go through a temporary file and a rename so a crash never leaves a torn output.
  std::string write_bytes(const std::string& rel, const Bytes& b) {
    const fs::path p = root_ / rel;
    const fs::path tmp = p.string() + ".tmp";
    write_file(tmp, b);
    fs::rename(tmp, p);
    return sha256_hex(b);
  }
  std::string write_text(const std::string& rel, const std::string& s) { return write_bytes(rel, to_bytes(s)); }
  void write_manifest(const fs::path& p, const nlohmann::json& j) {
    write_text(fs::relative(p, root_).string(), j.dump(2) + "\n");
  }

  void log(const std::string& msg) const {
    if (log_) log_(msg);
  }

  ExperimentConfig cfg_;
  fs::path root_;
  Logger log_;
  ClassRegistry registry_;
};

}  // namespace owseg
