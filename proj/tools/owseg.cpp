// Command-line front end for experiment directories.
//
// Exit codes: 0 success, 2 config/user error, 3 numeric failure, 1 anything unexpected.

#include <iostream>

#include <CLI11.hpp>

#include "owseg/experiment.hpp"

namespace {

using namespace owseg;

struct Common {
  std::string config;
  std::optional<std::string> root;
};

ExperimentConfig load_config(const Common& c, fs::path& root) {
  // Without --config, the effective config saved by gen-data is reused.
  std::string path = c.config;
  if (path.empty()) {
    root = resolve_root(c.root, "experiment");
    path = (root / "config.json").string();
    if (!fs::exists(path)) throw ConfigError("no --config given and no " + path);
    const Bytes b = read_file(path);
    return parse_config_text(std::string(b.begin(), b.end()));
  }
  if (!fs::exists(path)) throw ConfigError("config file " + path + " not found");
  const Bytes b = read_file(path);
  ExperimentConfig cfg = parse_config_text(std::string(b.begin(), b.end()));
  root = resolve_root(c.root, cfg.output_dir);
  return cfg;
}

void print(const CommandResult& r) {
  std::cout << (r.reused ? "up-to-date " : "done ") << r.stage << ' ' << r.summary.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-world LIDAR segmentation experiments: synthetic data, closed/open-set training, "
               "incremental stages and evaluation."};
  app.require_subcommand(1);
  Common common;
  app.add_option("-c,--config", common.config, "experiment config (JSON); defaults to <root>/config.json");
  app.add_option("-r,--root", common.root,
                 std::string("experiment directory; overrides $") + kRootEnv + " and the config's output_dir");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* closed = app.add_subcommand("train-closed", "train the closed-set model");
  auto* oseg = app.add_subcommand("finetune-oseg", "add redundancy heads and finetune for open-set segmentation");

  auto* il = app.add_subcommand("il", "one incremental stage promoting a novel class");
  int il_class = 0;
  std::string il_method = "real";
  std::optional<std::string> il_from;
  il->add_option("--class", il_class, "class ID to promote")->required();
  il->add_option("--method", il_method, "real, finetune or feature-extraction")
      ->check(CLI::IsMember({"real", "finetune", "feature-extraction"}));
  il->add_option("--from", il_from, "source stage (default: stages/HEAD)");

  const std::vector<std::string> methods{"real", "msp", "maxlogit", "mcdropout"};
  auto* ev = app.add_subcommand("evaluate", "evaluate a stage on the validation split");
  std::optional<std::string> ev_method, ev_stage;
  int bins = 50;
  ev->add_option("--method", ev_method, "unknown-scoring method")->check(CLI::IsMember(methods));
  ev->add_option("--stage", ev_stage, "stage name (default: stages/HEAD)");
  ev->add_option("--bins", bins, "histogram bins")->check(CLI::Range(2, 100000));

  auto* dump = app.add_subcommand("dump-scores", "write per-point unknown scores of the validation split");
  std::string dump_method = "real", dump_format = "csv";
  std::optional<std::string> dump_stage;
  dump->add_option("--method", dump_method, "unknown-scoring method")->check(CLI::IsMember(methods));
  dump->add_option("--stage", dump_stage, "stage name (default: stages/HEAD)");
  dump->add_option("--format", dump_format, "csv or bin")->check(CLI::IsMember({"csv", "bin"}));

  auto* plot = app.add_subcommand("plot-data", "export loss traces and histograms for plotting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    fs::path root;
    ExperimentConfig cfg = load_config(common, root);
    Experiment exp(cfg, root, [](const std::string& msg) { std::cerr << "[owseg] " << msg << '\n'; });
    if (*gen) print(exp.gen_data());
    if (*closed) print(exp.train_closed());
    if (*oseg) print(exp.finetune_oseg());
    if (*il) print(exp.il(il_class, il_method_from_string(il_method), il_from));
    if (*ev)
      print(exp.evaluate(ev_method ? std::optional(scoring_method_from_string(*ev_method)) : std::nullopt, ev_stage,
                         bins));
    if (*dump) print(exp.dump_scores(scoring_method_from_string(dump_method), dump_stage, dump_format == "bin"));
    if (*plot) print(exp.plot_data());
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 2;
  } catch (const GenerationError& e) {
    std::cerr << "generation error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 1;
  }
}
