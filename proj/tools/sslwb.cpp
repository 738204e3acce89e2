// Command-line workbench: corpus synthesis, SSL pretraining, downstream
// finetuning, evaluation, report generation and grid sweeps.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "sslwb/sslwb.hpp"

namespace {

using namespace sslwb;

fs::path default_out_root() {
  const char* env = std::getenv("SSLWB_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path out_root(const ExperimentConfig& cfg, const std::string& flag_out) {
  if (!flag_out.empty()) return flag_out;
  if (!cfg.out_dir.empty() && cfg.out_dir != "runs") return cfg.resolve(cfg.out_dir);
  return default_out_root();
}

struct PipelinePaths {
  fs::path root;
  fs::path pretrain_ckpt() const { return root / "checkpoint.ckpt"; }
  fs::path pretrain_log() const { return root / "pretrain_log.tsv"; }
  fs::path finetune_best() const { return root / "finetuned.ckpt"; }
  fs::path finetune_last() const { return root / "finetuned_last.ckpt"; }
  fs::path finetune_log() const { return root / "finetune_log.tsv"; }
};

DatasetManifest load_manifest_checked(const fs::path& path) {
  require(!path.empty(), "no dataset manifest configured");
  require(fs::exists(path), "manifest not found: " + path.string());
  return load_manifest(path);
}

int cmd_dataset_synth(int classes, long per_class, double profile_divisor,
                      std::size_t size, std::uint64_t seed, const std::string& out,
                      const std::string& split_arg) {
  SyntheticCorpusSpec spec;
  spec.image_size = size;
  spec.seed = seed;
  if (profile_divisor > 0) {
    auto profile = reference_class_profile();
    spec.num_classes = static_cast<int>(profile.size());
    spec.per_class_counts = scaled_profile_counts(profile_divisor);
    for (const auto& c : profile) spec.class_names.push_back(c.name);
  } else {
    spec.num_classes = classes;
    spec.per_class = static_cast<std::size_t>(per_class);
  }
  spec.validate();
  fs::path dir = out;
  DatasetManifest m = generate_synthetic_corpus(spec, dir);

  if (split_arg != "none") {
    std::vector<std::string> parts = split(split_arg, ',');
    require(parts.size() == 3, "--split expects three comma-separated fractions");
    SplitRatios ratios{std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
    m = split_dataset(m, ratios, seed);
  }
  save_manifest(m, dir / "manifest.tsv", dir / "classes.tsv");
  ClassStats stats = class_statistics(m);
  std::cout << "wrote " << m.records.size() << " images across " << m.classes.size()
            << " classes to " << dir.string() << "\n"
            << "manifest: " << (dir / "manifest.tsv").string() << " (imbalance ratio "
            << std::fixed << std::setprecision(2) << stats.imbalance_ratio << ")\n";
  return 0;
}

int cmd_dataset_stats(const std::string& manifest_path) {
  DatasetManifest m = load_manifest_checked(manifest_path);
  ClassStats stats = class_statistics(m);
  std::cout << "class_id\tname\ttrain\tval\ttest\tunassigned\ttotal\n";
  for (const auto& c : stats.per_class)
    std::cout << c.class_id << "\t" << c.name << "\t" << c.train << "\t" << c.val
              << "\t" << c.test << "\t" << c.unassigned << "\t" << c.total() << "\n";
  std::cout << "total\t" << stats.total_records << "\n"
            << "imbalance_ratio\t" << std::setprecision(4) << stats.imbalance_ratio
            << "\n";
  return 0;
}

void write_training_log(const TrainingLog& log, const fs::path& path) {
  write_file_atomic(path, log.to_text());
}

int cmd_pretrain(const std::string& config_path, const std::string& method_override,
                 bool deterministic, const std::string& resume_path,
                 const std::string& flag_out) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (!method_override.empty()) cfg.pretrain.method = method_from_name(method_override);
  if (deterministic) {
    cfg.pretrain.deterministic = true;
    if (cfg.pretrain.threads == 0) cfg.pretrain.threads = 1;
  }
  fs::path manifest_path =
      cfg.resolve(cfg.pretrain_manifest.empty() ? cfg.manifest : cfg.pretrain_manifest);
  DatasetManifest manifest = load_manifest_checked(manifest_path);

  PipelinePaths paths{out_root(cfg, flag_out)};
  fs::create_directories(paths.root);

  std::optional<Checkpoint> resume;
  if (!resume_path.empty()) resume = load_checkpoint(resume_path);

  cfg.pretrain.validate();
  auto out = pretrain(cfg.pretrain, manifest, manifest_path.parent_path(), {},
                      resume ? &*resume : nullptr, paths.pretrain_ckpt());
  write_training_log(out.log, paths.pretrain_log());
  std::cout << "method " << method_name(cfg.pretrain.method) << ", "
            << out.checkpoint.metadata.at("param_count") << " parameters, "
            << out.log.epochs.size() << " epochs trained\n"
            << "checkpoint: " << paths.pretrain_ckpt().string() << "\n"
            << "log: " << paths.pretrain_log().string() << "\n";
  if (!out.log.epochs.empty())
    std::cout << "final epoch loss " << std::setprecision(6)
              << out.log.epochs.back().loss_mean << "\n";
  return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& init_arg,
                 const std::string& flag_out) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  fs::path manifest_path = cfg.resolve(cfg.manifest);
  DatasetManifest manifest = load_manifest_checked(manifest_path);
  PipelinePaths paths{out_root(cfg, flag_out)};
  fs::create_directories(paths.root);

  if (cfg.finetune.num_classes == 0) cfg.finetune.num_classes = manifest.classes.size();

  std::optional<Checkpoint> init;
  std::string init_kind = init_arg;
  if (init_kind.empty() || init_kind == "auto") {
    if (fs::exists(paths.pretrain_ckpt())) {
      init = load_checkpoint(paths.pretrain_ckpt());
      init_kind = paths.pretrain_ckpt().string();
    } else {
      init_kind = "random";
    }
  } else if (init_kind != "random") {
    init = load_checkpoint(init_kind);
  }

  cfg.finetune.validate();
  auto res =
      finetune(cfg.finetune, init ? &*init : nullptr, manifest, manifest_path.parent_path());
  save_checkpoint(res.checkpoint, paths.finetune_best());

  // last-epoch parameters, kept for the best-val vs last comparison
  Checkpoint last = res.checkpoint;
  last.arrays.clear();
  for (const auto& [name, value] : res.net->snapshot())
    last.arrays.emplace_back("student." + name, value);
  last.metadata["selection"] = "last_epoch";
  save_checkpoint(last, paths.finetune_last());

  write_training_log(res.log, paths.finetune_log());
  std::cout << "init: " << init_kind << "\n"
            << "best-val epoch " << res.best_epoch << " accuracy "
            << std::setprecision(6) << res.best_val_accuracy << "\n"
            << "checkpoints: " << paths.finetune_best().string() << ", "
            << paths.finetune_last().string() << "\n";
  return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& ckpt_arg,
                 const std::string& flag_out) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  fs::path manifest_path = cfg.resolve(cfg.manifest);
  DatasetManifest manifest = load_manifest_checked(manifest_path);
  PipelinePaths paths{out_root(cfg, flag_out)};
  fs::path eval_dir = paths.root / "results";
  fs::create_directories(eval_dir);

  fs::path best_path = ckpt_arg.empty() ? paths.finetune_best() : fs::path(ckpt_arg);
  Checkpoint best = load_checkpoint(best_path);
  auto net = network_from_checkpoint(best);
  auto [matrix, report] =
      evaluate(*net, "cls", manifest, manifest_path.parent_path(), Split::test, cfg.aug);

  double acc_last = -1.0;
  if (ckpt_arg.empty() && fs::exists(paths.finetune_last())) {
    Checkpoint last = load_checkpoint(paths.finetune_last());
    auto net_last = network_from_checkpoint(last);
    auto [m2, r2] = evaluate(*net_last, "cls", manifest, manifest_path.parent_path(),
                             Split::test, cfg.aug);
    acc_last = r2.top1_accuracy;
  }

  fs::path plot = eval_dir / "confusion.ppm";
  emit_confusion_plot(matrix, plot);
  fs::path csv = plot;
  csv.replace_extension(".csv");

  ResultsRecord rec;
  rec.set("experiment", cfg.eval.experiment.empty() ? best.method : cfg.eval.experiment);
  rec.set("method", best.method);
  rec.set("architecture", cfg.eval.architecture);
  rec.set("setup", !cfg.eval.setup.empty()
                       ? cfg.eval.setup
                       : (cfg.is_transfer() ? "transfer" : "single_dataset"));
  rec.set("pretraining_dataset",
          cfg.eval.pretraining_dataset.empty()
              ? (cfg.is_transfer() ? cfg.pretrain_manifest.string()
                                   : cfg.manifest.string())
              : cfg.eval.pretraining_dataset);
  rec.set("finetune_dataset", cfg.manifest.string());
  rec.set("seed", std::to_string(cfg.seed));
  rec.set("accuracy_best_val_pct", report.top1_accuracy * 100.0);
  if (acc_last >= 0.0) rec.set("accuracy_last_pct", acc_last * 100.0);
  rec.set("confusion_csv", csv.string());
  rec.set("confusion_plot", plot.string());
  fs::path rec_path = eval_dir / "experiment.rec";
  write_file_atomic(rec_path, results_record_to_text(rec));

  std::cout << "test accuracy " << std::fixed << std::setprecision(2)
            << report.top1_accuracy * 100.0 << "% (" << matrix.total() << " samples)\n"
            << "record: " << rec_path.string() << "\n"
            << "confusion: " << csv.string() << ", " << plot.string() << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& setup_arg,
               const std::string& arch, const std::string& out_file) {
  require(!inputs.empty(), "report needs at least one results record");
  EvalSetup setup = setup_from_name(setup_arg);
  std::vector<ResultsRow> rows;
  for (const std::string& in : inputs) {
    ResultsRecord rec = parse_results_record(read_text_file(in), in);
    if (rec.get("setup") != setup_name(setup)) continue;
    ResultsRow row;
    row.experiment = rec.get("experiment", rec.get("method", "?"));
    row.pretraining_dataset = rec.get("pretraining_dataset", "-");
    row.accuracy_pct = rec.get_number("accuracy_best_val_pct", 0.0);
    rows.push_back(row);
  }
  std::string doc = render_results_table(rows, setup, arch);
  if (out_file.empty()) {
    std::cout << doc;
  } else {
    write_file_atomic(out_file, doc);
    std::cout << "wrote " << rows.size() << " rows to " << out_file << "\n";
  }
  return 0;
}

void run_pipeline_cell(const ExperimentConfig& cfg, const fs::path& cell_dir,
                       const fs::path& manifest_path, const fs::path& pre_manifest_path) {
  DatasetManifest manifest = load_manifest_checked(manifest_path);
  DatasetManifest pre_manifest = manifest;
  if (pre_manifest_path != manifest_path)
    pre_manifest = load_manifest_checked(pre_manifest_path);
  fs::create_directories(cell_dir);
  PipelinePaths paths{cell_dir};

  PretrainConfig pcfg = cfg.pretrain;
  pcfg.validate();
  auto pre = pretrain(pcfg, pre_manifest, pre_manifest_path.parent_path(), {}, nullptr,
                      paths.pretrain_ckpt());
  write_training_log(pre.log, paths.pretrain_log());

  FinetuneConfig fcfg = cfg.finetune;
  if (fcfg.num_classes == 0) fcfg.num_classes = manifest.classes.size();
  fcfg.validate();
  auto fin = finetune(fcfg, &pre.checkpoint, manifest, manifest_path.parent_path());
  save_checkpoint(fin.checkpoint, paths.finetune_best());
  write_training_log(fin.log, paths.finetune_log());

  auto net = network_from_checkpoint(fin.checkpoint);
  auto [matrix, report] =
      evaluate(*net, "cls", manifest, manifest_path.parent_path(), Split::test, cfg.aug);
  ResultsRecord rec;
  rec.set("experiment",
          cfg.eval.experiment.empty() ? method_name(pcfg.method) : cfg.eval.experiment);
  rec.set("method", method_name(pcfg.method));
  rec.set("architecture", cfg.eval.architecture);
  rec.set("setup", cfg.is_transfer() ? "transfer" : "single_dataset");
  rec.set("seed", std::to_string(cfg.seed));
  rec.set("accuracy_best_val_pct", report.top1_accuracy * 100.0);
  write_file_atomic(cell_dir / "cell.rec", results_record_to_text(rec));
}

int cmd_sweep(const std::string& config_path, const std::string& flag_out) {
  std::string ini_text = read_text_file(config_path);
  IniFile ini = IniFile::parse(ini_text, config_path);
  ExperimentConfig base = parse_experiment_config(ini);
  base.config_dir = fs::path(config_path).has_parent_path()
                        ? fs::path(config_path).parent_path()
                        : fs::path(".");
  require(!base.sweep_grid.empty(), "config has no [sweep] grid axes");

  std::vector<std::string> keys;
  for (const auto& [k, v] : base.sweep_grid) keys.push_back(k);
  fs::path root = out_root(base, flag_out) / "sweep";
  fs::create_directories(root);

  std::size_t n_cells = 1;
  for (const auto& k : keys) n_cells *= base.sweep_grid.at(k).size();
  std::cout << "sweep over " << keys.size() << " axes, " << n_cells << " cells\n";

  double best_acc = -1.0;
  std::string best_label;
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    std::string label;
    std::map<std::string, std::map<std::string, std::string>> overrides;
    std::size_t rem = cell;
    for (const auto& key : keys) {
      const auto& values = base.sweep_grid.at(key);
      std::size_t pick = rem % values.size();
      rem /= values.size();
      std::vector<std::string> parts = split(key, '.');
      require(parts.size() == 2, "sweep key must be section.key: " + key);
      overrides[parts[0]][parts[1]] = values[pick];
      if (!label.empty()) label += "_";
      label += parts[1] + "=" + values[pick];
    }
    fs::path cell_dir = root / ("cell_" + std::to_string(cell));
    fs::path rec_path = cell_dir / "cell.rec";
    if (fs::exists(rec_path)) {
      std::cout << "cell " << cell << " (" << label << "): already complete, skipping\n";
    } else {
      // rebuild the config text with this cell's overrides applied
      auto sections = ini.sections();
      sections.erase("sweep");
      for (const auto& [section, kv] : overrides)
        for (const auto& [k, v] : kv) sections[section][k] = v;
      std::string rebuilt;
      for (const auto& [section, kv] : sections) {
        rebuilt += "[" + section + "]\n";
        for (const auto& [k, v] : kv) rebuilt += k + " = " + v + "\n";
      }
      ExperimentConfig cfg =
          parse_experiment_config(IniFile::parse(rebuilt, config_path + ":sweep"));
      cfg.config_dir = base.config_dir;
      std::cout << "cell " << cell << " (" << label << "): running\n";
      fs::path manifest_path = cfg.resolve(cfg.manifest);
      fs::path pre_path = cfg.pretrain_manifest.empty()
                              ? manifest_path
                              : cfg.resolve(cfg.pretrain_manifest);
      run_pipeline_cell(cfg, cell_dir, manifest_path, pre_path);
    }
    ResultsRecord rec = parse_results_record(read_text_file(rec_path), rec_path.string());
    double acc = rec.get_number("accuracy_best_val_pct", 0.0);
    if (acc > best_acc) {
      best_acc = acc;
      best_label = "cell_" + std::to_string(cell) + " (" + label + ")";
    }
  }
  std::cout << "best: " << best_label << " accuracy " << std::fixed
            << std::setprecision(2) << best_acc << "%\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised pretraining workbench"};
  app.require_subcommand(1);

  auto* dataset = app.add_subcommand("dataset", "corpus synthesis and statistics");
  dataset->require_subcommand(1);
  auto* synth = dataset->add_subcommand("synth", "render a synthetic corpus");
  int classes = 10;
  long per_class = 50;
  double profile_divisor = 0.0;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  std::string out_dir, split_arg = "0.7,0.15,0.15";
  synth->add_option("--classes", classes, "number of classes");
  synth->add_option("--per-class", per_class, "images per class");
  synth->add_option("--profile-divisor", profile_divisor,
                    "use the 23-class reference profile scaled by this divisor");
  synth->add_option("--size", size, "image edge length in pixels");
  synth->add_option("--seed", seed, "corpus seed");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--split", split_arg, "train,val,test fractions or 'none'");
  auto* stats = dataset->add_subcommand("stats", "per-class, per-split statistics");
  std::string stats_manifest;
  stats->add_option("manifest", stats_manifest, "manifest.tsv path")->required();

  auto* pre = app.add_subcommand("pretrain", "run a pretraining method");
  std::string pre_config, pre_method, pre_resume, pre_out;
  bool pre_det = false;
  pre->add_option("config", pre_config, "experiment config file")->required();
  pre->add_option("--method", pre_method, "override [pretrain] method");
  pre->add_flag("--deterministic", pre_det, "single-worker deterministic mode");
  pre->add_option("--resume", pre_resume, "checkpoint to resume from");
  pre->add_option("--out", pre_out, "output directory");

  auto* fin = app.add_subcommand("finetune", "supervised downstream finetuning");
  std::string fin_config, fin_init, fin_out;
  fin->add_option("config", fin_config, "experiment config file")->required();
  fin->add_option("--init", fin_init, "checkpoint path, 'random', or 'auto'");
  fin->add_option("--out", fin_out, "output directory");

  auto* ev = app.add_subcommand("evaluate", "test-split evaluation and artifacts");
  std::string ev_config, ev_ckpt, ev_out;
  ev->add_option("config", ev_config, "experiment config file")->required();
  ev->add_option("--ckpt", ev_ckpt, "finetuned checkpoint (default: pipeline output)");
  ev->add_option("--out", ev_out, "output directory");

  auto* rep = app.add_subcommand("report", "assemble a results table");
  std::vector<std::string> rep_in;
  std::string rep_setup = "single_dataset", rep_arch = "patch_transformer", rep_out;
  rep->add_option("--in", rep_in, "results record files")->required();
  rep->add_option("--setup", rep_setup, "transfer | single_dataset");
  rep->add_option("--arch", rep_arch, "architecture label for the caption");
  rep->add_option("--out", rep_out, "output file (default stdout)");

  auto* sw = app.add_subcommand("sweep", "grid search over config axes");
  std::string sw_config, sw_out;
  sw->add_option("config", sw_config, "experiment config with a [sweep] section")
      ->required();
  sw->add_option("--out", sw_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) {
      require(profile_divisor > 0 || classes >= 2, "need --classes >= 2");
      return cmd_dataset_synth(classes, per_class, profile_divisor, size, seed, out_dir,
                               split_arg);
    }
    if (stats->parsed()) return cmd_dataset_stats(stats_manifest);
    if (pre->parsed())
      return cmd_pretrain(pre_config, pre_method, pre_det, pre_resume, pre_out);
    if (fin->parsed()) return cmd_finetune(fin_config, fin_init, fin_out);
    if (ev->parsed()) return cmd_evaluate(ev_config, ev_ckpt, ev_out);
    if (rep->parsed()) return cmd_report(rep_in, rep_setup, rep_arch, rep_out);
    if (sw->parsed()) return cmd_sweep(sw_config, sw_out);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
