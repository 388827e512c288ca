#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eac/analysis.hpp"
#include "eac/config.hpp"
#include "eac/experiment.hpp"
#include "eac/synth.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets; // section.key=value overrides, applied in order
  std::string out_dir;
  bool deterministic = false;
  std::optional<double> noise_rate, lambda;
  std::optional<std::string> variant;
  std::optional<int> epochs, batch_size;
};

void add_common(CLI::App* cmd, CommonArgs& args, const std::string& default_out) {
  cmd->add_option("--config", args.config_path, "experiment config file")->required();
  cmd->add_option("--set", args.sets,
                  "override a config field, e.g. --set train.lambda=5 (repeatable)");
  cmd->add_option("--out-dir", args.out_dir, "output directory")->default_val(default_out);
  cmd->add_flag("--deterministic", args.deterministic,
                "bitwise-reproducible mode (single-threaded reductions)");
  cmd->add_option("--noise-rate", args.noise_rate, "override noise.rate");
  cmd->add_option("--lambda", args.lambda, "override train.lambda");
  cmd->add_option("--variant", args.variant, "override train.variant");
  cmd->add_option("--epochs", args.epochs, "override train.epochs");
  cmd->add_option("--batch-size", args.batch_size, "override train.batch_size");
}

eac::ExperimentConfig resolve_config(const CommonArgs& args) {
  eac::ExperimentConfig cfg = eac::load_config(args.config_path);
  for (const auto& kv : args.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw eac::ConfigError(eac::msg("--set needs section.key=value, got '", kv, "'"));
    eac::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.noise_rate) cfg.noise.rate = *args.noise_rate;
  if (args.lambda) cfg.lambda = *args.lambda;
  if (args.variant) cfg.variant = eac::parse_variant(*args.variant);
  if (args.epochs) cfg.epochs = *args.epochs;
  if (args.batch_size) cfg.batch_size = *args.batch_size;
  if (args.deterministic) cfg.deterministic = true;
  cfg.validate();
  return cfg;
}

std::vector<double> parse_double_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ','))
    out.push_back(eac::detail::parse_double_field(what, eac::detail::trim(item)));
  if (out.empty()) throw eac::ConfigError(eac::msg(what, ": empty list"));
  return out;
}

int report_cells(const std::vector<eac::CellResult>& cells, const fs::path& table) {
  std::vector<std::string> failed;
  for (const auto& cell : cells)
    if (!cell.record) failed.push_back(cell.dir.filename().string() + ": " + cell.error);
  std::cout << "table written to " << table << "\n";
  if (!failed.empty()) {
    std::cerr << failed.size() << " cell(s) failed:\n";
    for (const auto& f : failed) std::cerr << "  " << f << "\n";
    return 1;
  }
  return 0;
}

int cmd_train(const CommonArgs& args, bool resume) {
  const eac::ExperimentConfig cfg = resolve_config(args);
  const eac::RunRecord record =
      eac::run_experiment<float>(cfg, args.out_dir, resume, &std::cout);
  std::cout << "final_accuracy " << record.final_accuracy;
  if (record.auroc_defined) std::cout << "  auroc " << record.auroc;
  std::cout << "\nrun record: " << (fs::path(args.out_dir) / "run_record.json").string()
            << "\n";
  return 0;
}

int cmd_grid(const CommonArgs& args, const std::string& rates_text,
             const std::string& variants_text) {
  const eac::ExperimentConfig base = resolve_config(args);
  const std::vector<double> rates = parse_double_list(rates_text, "--rates");
  std::vector<eac::EacVariant> variants;
  std::istringstream in(variants_text);
  std::string item;
  while (std::getline(in, item, ','))
    variants.push_back(eac::parse_variant(eac::detail::trim(item)));
  if (variants.empty()) throw eac::ConfigError("--variants: empty list");
  const auto cells = eac::run_grid(base, rates, variants, args.out_dir, &std::cout);
  return report_cells(cells, fs::path(args.out_dir) / "grid.csv");
}

int cmd_sweep(const CommonArgs& args, const std::string& lambdas_text) {
  const eac::ExperimentConfig base = resolve_config(args);
  const std::vector<double> lambdas = parse_double_list(lambdas_text, "--lambdas");
  const auto cells = eac::run_sweep_lambda(base, lambdas, args.out_dir, &std::cout);
  return report_cells(cells, fs::path(args.out_dir) / "sweep_lambda.csv");
}

int cmd_analyze(const CommonArgs& args, const std::string& checkpoint_path,
                const std::string& manifest_path, int heatmaps) {
  eac::ExperimentConfig cfg = resolve_config(args);
  if (args.deterministic) eac::set_deterministic_mode(true);
  eac::Model<float> model = eac::load_model_checkpoint<float>(checkpoint_path);
  eac::Dataset<float> train =
      eac::load_dataset<float>(cfg.train_path, cfg.format, cfg.classes, cfg.train_subset);
  const eac::NoiseManifest manifest = eac::load_manifest(manifest_path);
  eac::apply_manifest(train, manifest); // checksum-guarded
  fs::create_directories(args.out_dir);

  const auto records = eac::per_sample_records(model, train, 256, true);
  const eac::SeparationReport report = eac::loss_separation(records);
  eac::save_separation_report(fs::path(args.out_dir) / "separation.json", report);
  eac::export_features(model, train, fs::path(args.out_dir) / "features.csv");
  const int n_maps = std::min<int>(heatmaps, static_cast<int>(train.samples.size()));
  for (int i = 0; i < n_maps; ++i) {
    const auto& s = train.samples[std::size_t(i)];
    eac::export_cam_heatmap(model, s.pixels, eac::kHeatmapPredicted,
                            fs::path(args.out_dir) / eac::msg("heatmap_", s.id, ".png"));
  }
  std::cout << "samples " << records.size();
  if (report.auroc_defined) std::cout << "  auroc " << report.auroc;
  std::cout << "\nreports in " << args.out_dir << "\n";
  return 0;
}

int cmd_synth(const std::string& out_path, std::size_t count, int classes,
              std::uint64_t seed) {
  eac::SynthSpec spec;
  spec.count = count;
  spec.classes = classes;
  spec.seed = seed;
  const eac::Dataset<float> ds = eac::make_synthetic_dataset<float>(spec);
  eac::write_cifar_binary(out_path, ds);
  std::cout << "wrote " << ds.samples.size() << " samples to " << out_path << "\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"EAC noisy-label training toolkit"};
  app.require_subcommand(1);

  CommonArgs train_args;
  bool train_fresh = false;
  CLI::App* train = app.add_subcommand("train", "run one training experiment");
  add_common(train, train_args, "runs/train");
  train->add_flag("--fresh", train_fresh, "ignore checkpoints, start from scratch");

  CommonArgs grid_args;
  std::string rates = "0.1,0.2,0.3";
  std::string variants = "baseline,full";
  CLI::App* grid = app.add_subcommand("grid", "noise-rate x variant grid");
  add_common(grid, grid_args, "runs/grid");
  grid->add_option("--rates", rates, "comma-separated noise rates");
  grid->add_option("--variants", variants, "comma-separated variants");

  CommonArgs sweep_args;
  std::string lambdas = "0.1,1,3,5,10";
  CLI::App* sweep = app.add_subcommand("sweep-lambda", "consistency-weight sweep");
  add_common(sweep, sweep_args, "runs/sweep");
  sweep->add_option("--lambdas", lambdas, "comma-separated lambda values");

  CommonArgs analyze_args;
  std::string checkpoint_path, manifest_path;
  int heatmaps = 5;
  CLI::App* analyze = app.add_subcommand("analyze", "diagnostics from a checkpoint");
  add_common(analyze, analyze_args, "runs/analysis");
  analyze->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  analyze->add_option("--manifest", manifest_path, "noise manifest csv")->required();
  analyze->add_option("--heatmaps", heatmaps, "number of heatmap PNGs to write");

  std::string synth_out;
  std::size_t synth_count = 10000;
  int synth_classes = 10;
  std::uint64_t synth_seed = 0;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset file");
  synth->add_option("--out", synth_out, "output .bin path")->required();
  synth->add_option("--count", synth_count, "number of samples");
  synth->add_option("--classes", synth_classes, "number of classes (2..10)");
  synth->add_option("--seed", synth_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_args, !train_fresh);
    if (grid->parsed()) return cmd_grid(grid_args, rates, variants);
    if (sweep->parsed()) return cmd_sweep(sweep_args, lambdas);
    if (analyze->parsed())
      return cmd_analyze(analyze_args, checkpoint_path, manifest_path, heatmaps);
    if (synth->parsed()) return cmd_synth(synth_out, synth_count, synth_classes, synth_seed);
  } catch (const eac::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const eac::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
