#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "fairdisco/core.hpp"
#include "fairdisco/data.hpp"
#include "fairdisco/metrics.hpp"
#include "fairdisco/model.hpp"
#include "fairdisco/synth.hpp"
#include "fairdisco/train.hpp"

namespace fs = std::filesystem;
using namespace fairdisco;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
  out << text;
  if (!out) throw std::runtime_error(fmt::format("failed writing '{}'", path.string()));
}

PathCheck parse_path_check(const std::string& text) {
  if (text == "none") return PathCheck::None;
  if (text == "error") return PathCheck::Error;
  if (text == "skip") return PathCheck::Skip;
  throw ValidationError(fmt::format("unknown --check-paths mode '{}'", text));
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      grid.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ValidationError(fmt::format("grid entry '{}' is not a number", item));
    }
  }
  if (grid.empty()) throw ValidationError("sweep grid is empty");
  return grid;
}

DatasetManifest load_for_cli(const fs::path& manifest_path, bool grouped, PathCheck check) {
  LoadOptions options;
  options.group_skin_types = grouped;
  options.path_check = check;
  return load_manifest(manifest_path, options);
}

DatasetManifest maybe_subset(const DatasetManifest& manifest,
                             const std::optional<fs::path>& ids_path) {
  if (!ids_path) return manifest;
  const auto indices = read_split_ids(*ids_path, manifest);
  return subset_manifest(manifest, indices);
}

// training options shared by `train` and `sweep`
struct TrainCli {
  std::string manifest_path;
  std::optional<fs::path> ids_path;
  std::optional<fs::path> config_path;
  std::optional<fs::path> pretrained_path;
  bool grouped = false;
  TrainConfig config;

  void add_options(CLI::App* cmd) {
    cmd->add_option("--manifest", manifest_path, "dataset manifest CSV")->required();
    cmd->add_option("--ids", ids_path, "train on this split-id file only");
    cmd->add_option("--config", config_path, "key = value config file");
    cmd->add_option("--pretrained", pretrained_path, "checkpoint supplying backbone weights");
    cmd->add_flag("--grouped", grouped, "group Fitzpatrick scales into T12/T34/T56");
    cmd->add_option("--variant", variant, "BASE|RESM|REWT|ATRB|FDC_NO_CL|FDC");
    cmd->add_option("--alpha", alpha, "confusion-loss weight");
    cmd->add_option("--beta", beta, "contrastive-loss weight");
    cmd->add_option("--tau", tau, "contrastive temperature");
    cmd->add_option("--lr", lr, "initial learning rate");
    cmd->add_option("--batch-size", batch_size, "mini-batch size");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--seed", seed, "random seed for every stream");
    cmd->add_option("--backbone", backbone, "tiny|resnet18");
    cmd->add_option("--repr-dim", repr_dim, "representation dimension (tiny backbone)");
    cmd->add_option("--image-size", image_size, "input edge length after preprocessing");
    cmd->add_flag("--no-augment", no_augment, "disable training augmentation");
    cmd->add_flag("--scope-literal", scope_literal,
                  "let the confusion loss update the sensitive head as well");
  }

  TrainConfig resolve(CLI::App* cmd) {
    TrainConfig out;
    if (config_path) out.apply(KeyValueConfig::from_file(*config_path));
    if (cmd->count("--variant")) out.method = parse_method(variant);
    if (cmd->count("--alpha")) out.weights.alpha = alpha;
    if (cmd->count("--beta")) out.weights.beta = beta;
    if (cmd->count("--tau")) out.weights.tau = tau;
    if (cmd->count("--lr")) out.lr = lr;
    if (cmd->count("--batch-size")) out.batch_size = batch_size;
    if (cmd->count("--epochs")) out.epochs = epochs;
    if (cmd->count("--seed")) out.seed = seed;
    if (cmd->count("--backbone")) out.backbone = parse_backbone(backbone);
    if (cmd->count("--repr-dim")) out.repr_dim = repr_dim;
    if (cmd->count("--image-size")) out.image_size = image_size;
    if (no_augment) out.augment = false;
    if (scope_literal) out.scope_literal = true;
    out.validate();
    return out;
  }

 private:
  std::string variant;
  double alpha = 1.0, beta = 1.0, tau = 0.1, lr = 1e-4;
  int batch_size = 64, epochs = 20, repr_dim = 512, image_size = 224;
  std::uint64_t seed = 0;
  std::string backbone;
  bool no_augment = false, scope_literal = false;
};

int run_prepare(const fs::path& manifest_path, const fs::path& out_dir, const std::string& split,
                double ratio, std::uint64_t seed, bool grouped, bool stratified,
                const std::string& check_paths) {
  const auto manifest = load_for_cli(manifest_path, grouped, parse_path_check(check_paths));
  SplitSpec spec;
  spec.kind = parse_split_kind(split);
  spec.ratio = ratio;
  spec.seed = seed;
  spec.stratified = stratified;
  const auto result = make_split(manifest, spec);

  fs::create_directories(out_dir);
  write_split_ids(out_dir / "train_ids.txt", manifest, result.train);
  write_split_ids(out_dir / "test_ids.txt", manifest, result.test);

  std::cout << counts_table_text(manifest);
  if (manifest.dropped_unknown > 0)
    std::cout << fmt::format("(dropped {} unknown-skin-type rows)\n", manifest.dropped_unknown);
  std::cout << fmt::format("split: {}  train: {}  test: {}\n", split, result.train.size(),
                           result.test.size());
  std::cout << fmt::format("wrote {}\n", (out_dir / "train_ids.txt").string());
  std::cout << fmt::format("wrote {}\n", (out_dir / "test_ids.txt").string());
  return 0;
}

int run_synth(const fs::path& out_dir, const SynthSpec& spec) {
  spec.validate();
  const auto manifest = generate(spec, out_dir);
  std::cout << counts_table_text(manifest);
  std::cout << fmt::format("label mutual information: {:.4f} nats\n",
                           label_mutual_information(manifest));
  std::cout << fmt::format("wrote {} images and {}\n", manifest.samples.size(),
                           (out_dir / "manifest.csv").string());
  return 0;
}

int run_train(TrainCli& cli, CLI::App* cmd, const fs::path& out_path) {
  TrainConfig config = cli.resolve(cmd);
  if (cli.pretrained_path) config.pretrained_path = cli.pretrained_path->string();
  const auto manifest = load_for_cli(cli.manifest_path, cli.grouped, PathCheck::None);
  const auto train_set = maybe_subset(manifest, cli.ids_path);
  ImageStore store(train_set.base_dir);

  auto result = train(config, train_set, store);
  save_checkpoint(out_path, result.bundle);

  for (std::size_t e = 0; e < result.state.history.size(); ++e) {
    const auto& r = result.state.history[e];
    std::cout << fmt::format(
        "epoch {:>3}  lr {:.3e}  l_c {:.4f}  l_conf {:.4f}  l_s {:.4f}  l_contr {:.4f}  total "
        "{:.4f}\n",
        e, lr_at_epoch(config, static_cast<int>(e)), r.l_c, r.l_conf, r.l_s, r.l_contr,
        r.l_total);
  }
  std::cout << fmt::format("wrote {}\n", out_path.string());
  return 0;
}

int run_evaluate(const fs::path& checkpoint_path, const fs::path& manifest_path,
                 const std::optional<fs::path>& ids_path, const fs::path& out_path,
                 int image_size) {
  auto bundle = load_checkpoint(checkpoint_path);
  const auto manifest =
      load_for_cli(manifest_path, bundle.skin_types().grouped(), PathCheck::None);
  const auto test_set = maybe_subset(manifest, ids_path);
  ImageStore store(test_set.base_dir);
  const auto log = evaluate(bundle, test_set, store, image_size);
  write_prediction_log(out_path, log);
  std::cout << fmt::format("wrote {} ({} records)\n", out_path.string(), log.records.size());
  return 0;
}

int run_report(const fs::path& log_path, const fs::path& out_dir, const std::string& model_name) {
  const auto log = read_prediction_log(log_path);
  const auto report = make_report(log);

  fs::create_directories(out_dir);
  write_text(out_dir / "report.json", report_to_json(report));
  write_text(out_dir / "report.md", report_to_markdown(report, model_name));
  write_text(out_dir / "rate_curves.csv", rate_curves_to_csv(report));

  std::cout << fmt::format("overall_accuracy: {:.2f}\n", report.overall_accuracy * 100.0);
  for (std::size_t j = 0; j < report.skin_type_names.size(); ++j)
    std::cout << fmt::format("accuracy[{}]: {:.2f}\n", report.skin_type_names[j],
                             report.per_type_accuracy[j] * 100.0);
  std::cout << fmt::format("PQD: {:.2f}\n", report.pqd * 100.0);
  std::cout << fmt::format("DPM: {:.2f}\n", report.dpm * 100.0);
  std::cout << fmt::format("EOM: {:.2f}\n", report.eom * 100.0);
  if (report.auc) std::cout << fmt::format("AUC: {:.2f}\n", *report.auc);
  std::cout << fmt::format("wrote report.json, report.md, rate_curves.csv under {}\n",
                           out_dir.string());
  return 0;
}

int run_probe(const fs::path& checkpoint_path, const fs::path& manifest_path,
              const std::optional<fs::path>& ids_path, const fs::path& out_path, int image_size,
              const ProbeOptions& options) {
  auto bundle = load_checkpoint(checkpoint_path);
  const auto manifest =
      load_for_cli(manifest_path, bundle.skin_types().grouped(), PathCheck::None);
  const auto subset = maybe_subset(manifest, ids_path);
  if (!(bundle.conditions() == subset.conditions) ||
      !(bundle.skin_types() == subset.skin_types))
    throw ValidationError("checkpoint and dataset vocabularies do not match");
  ImageStore store(subset.base_dir);

  const Tensor reps = extract_representations(bundle, subset, store, image_size);
  std::vector<int> type_labels;
  type_labels.reserve(subset.samples.size());
  for (const auto& sample : subset.samples) type_labels.push_back(sample.skin_type);
  auto result = linear_probe(reps, type_labels, bundle.num_types(), options);

  const auto log = evaluate(bundle, subset, store, image_size);
  result.main_class_accuracy = group_accuracy(log).overall;

  nlohmann::ordered_json j;
  j["probe_accuracy"] = result.probe_accuracy;
  j["chance_level"] = result.chance_level;
  j["main_class_accuracy"] = *result.main_class_accuracy;
  j["n_train"] = result.n_train;
  j["n_holdout"] = result.n_holdout;
  write_text(out_path, j.dump(2) + "\n");

  std::cout << fmt::format("probe_accuracy: {:.4f} (chance {:.4f})\n", result.probe_accuracy,
                           result.chance_level);
  std::cout << fmt::format("main_class_accuracy: {:.4f}\n", *result.main_class_accuracy);
  std::cout << fmt::format("wrote {}\n", out_path.string());
  return 0;
}

int run_sweep(TrainCli& cli, CLI::App* cmd, const fs::path& train_ids, const fs::path& test_ids,
              const std::string& parameter, const std::string& grid_text,
              const fs::path& out_path) {
  if (parameter != "alpha" && parameter != "beta")
    throw ValidationError("--param must be alpha or beta");
  const auto grid = parse_grid(grid_text);
  const TrainConfig config = cli.resolve(cmd);
  const auto manifest = load_for_cli(cli.manifest_path, cli.grouped, PathCheck::None);
  const auto train_set = subset_manifest(manifest, read_split_ids(train_ids, manifest));
  const auto test_set = subset_manifest(manifest, read_split_ids(test_ids, manifest));
  ImageStore store(manifest.base_dir);

  const auto rows =
      sweep(config, parameter == "alpha" ? 'a' : 'b', grid, train_set, test_set, store);
  write_text(out_path, sweep_to_csv(rows, parameter == "alpha" ? 'a' : 'b'));
  for (const auto& row : rows)
    std::cout << fmt::format("{} {:.3f}: accuracy {:.4f}  PQD {:.4f}  DPM {:.4f}  EOM {:.4f}\n",
                             parameter, row.weight, row.accuracy, row.pqd, row.dpm, row.eom);
  std::cout << fmt::format("wrote {}\n", out_path.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "fairdisco: fairness-aware skin-lesion classification toolkit\n"
      "Relative image paths resolve against the manifest directory, then "
      "$FAIRDISCO_DATA_DIR."};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "build train/test splits and a data summary");
  std::string p_manifest, p_split = "in-domain", p_check = "none";
  fs::path p_out;
  double p_ratio = 0.8;
  std::uint64_t p_seed = 0;
  bool p_grouped = false, p_stratified = false;
  prepare->add_option("--manifest", p_manifest, "dataset manifest CSV")->required();
  prepare->add_option("--out", p_out, "output directory for split id files")->required();
  prepare->add_option("--split", p_split, "in-domain|out-domain-a|out-domain-b|out-domain-c");
  prepare->add_option("--ratio", p_ratio, "in-domain train fraction");
  prepare->add_option("--seed", p_seed, "split seed");
  prepare->add_flag("--grouped", p_grouped, "group Fitzpatrick scales into T12/T34/T56");
  prepare->add_flag("--stratified", p_stratified, "stratify the in-domain split by condition");
  prepare->add_option("--check-paths", p_check, "none|error|skip image-path checking");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a parametric biased dataset");
  fs::path s_out;
  SynthSpec s_spec;
  synth->add_option("--out", s_out, "output directory")->required();
  synth->add_option("--n", s_spec.n_samples, "sample count");
  synth->add_option("--size", s_spec.image_size, "image edge length");
  synth->add_option("--classes", s_spec.num_classes, "number of glyph-coded conditions");
  synth->add_option("--types", s_spec.num_types, "number of tone-coded skin types");
  synth->add_option("--rho", s_spec.rho, "class/type correlation in [0,1]");
  synth->add_option("--noise", s_spec.noise, "gaussian pixel noise stddev");
  synth->add_option("--seed", s_spec.seed, "generator seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "train one variant and write a checkpoint");
  TrainCli t_cli;
  fs::path t_out;
  t_cli.add_options(train_cmd);
  train_cmd->add_option("--out", t_out, "checkpoint output path")->required();

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "run a checkpoint over a test set");
  fs::path e_checkpoint, e_out;
  std::string e_manifest;
  std::optional<fs::path> e_ids;
  int e_image_size = 224;
  eval_cmd->add_option("--checkpoint", e_checkpoint, "trained checkpoint")->required();
  eval_cmd->add_option("--manifest", e_manifest, "dataset manifest CSV")->required();
  eval_cmd->add_option("--ids", e_ids, "evaluate on this split-id file only");
  eval_cmd->add_option("--out", e_out, "prediction-log CSV output")->required();
  eval_cmd->add_option("--image-size", e_image_size, "input edge length");

  // report
  auto* report_cmd = app.add_subcommand("report", "fairness report from a prediction log");
  fs::path r_log, r_out;
  std::string r_name = "model";
  report_cmd->add_option("--log", r_log, "prediction-log CSV")->required();
  report_cmd->add_option("--out", r_out, "output directory")->required();
  report_cmd->add_option("--name", r_name, "model name for the markdown row");

  // probe
  auto* probe_cmd = app.add_subcommand("probe", "skin-type linear probe on frozen representations");
  fs::path pr_checkpoint, pr_out;
  std::string pr_manifest;
  std::optional<fs::path> pr_ids;
  int pr_image_size = 224;
  ProbeOptions pr_options;
  probe_cmd->add_option("--checkpoint", pr_checkpoint, "trained checkpoint")->required();
  probe_cmd->add_option("--manifest", pr_manifest, "dataset manifest CSV")->required();
  probe_cmd->add_option("--ids", pr_ids, "probe this split-id file only");
  probe_cmd->add_option("--out", pr_out, "probe-result JSON output")->required();
  probe_cmd->add_option("--image-size", pr_image_size, "input edge length");
  probe_cmd->add_option("--probe-epochs", pr_options.epochs, "probe training budget");
  probe_cmd->add_option("--holdout", pr_options.holdout_fraction, "held-out fraction");
  probe_cmd->add_option("--probe-lr", pr_options.lr, "probe learning rate");
  probe_cmd->add_option("--seed", pr_options.seed, "holdout shuffle seed");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "loss-weight sensitivity sweep");
  TrainCli w_cli;
  fs::path w_train_ids, w_test_ids, w_out;
  std::string w_param = "beta", w_grid = "0,0.5,1,2";
  w_cli.add_options(sweep_cmd);
  sweep_cmd->add_option("--train-ids", w_train_ids, "train split id file")->required();
  sweep_cmd->add_option("--test-ids", w_test_ids, "test split id file")->required();
  sweep_cmd->add_option("--param", w_param, "alpha|beta");
  sweep_cmd->add_option("--grid", w_grid, "comma-separated weight values");
  sweep_cmd->add_option("--out", w_out, "sweep CSV output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(prepare))
      return run_prepare(p_manifest, p_out, p_split, p_ratio, p_seed, p_grouped, p_stratified,
                         p_check);
    if (app.got_subcommand(synth)) return run_synth(s_out, s_spec);
    if (app.got_subcommand(train_cmd)) return run_train(t_cli, train_cmd, t_out);
    if (app.got_subcommand(eval_cmd))
      return run_evaluate(e_checkpoint, e_manifest, e_ids, e_out, e_image_size);
    if (app.got_subcommand(report_cmd)) return run_report(r_log, r_out, r_name);
    if (app.got_subcommand(probe_cmd))
      return run_probe(pr_checkpoint, pr_manifest, pr_ids, pr_out, pr_image_size, pr_options);
    if (app.got_subcommand(sweep_cmd))
      return run_sweep(w_cli, sweep_cmd, w_train_ids, w_test_ids, w_param, w_grid, w_out);
    throw std::logic_error("no subcommand dispatched");
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
