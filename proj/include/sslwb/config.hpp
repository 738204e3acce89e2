#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "sslwb/engine.hpp"
#include "sslwb/synthetic.hpp"

namespace sslwb {

// Experiment configs are sectioned key=value text files:
//
//   # comment
//   [pretrain]
//   method = dino
//   epochs = 5
//
// Unknown sections or keys are validation errors, so typos surface before any
// compute starts.

class IniFile {
 public:
  static IniFile parse(const std::string& text, const std::string& origin) {
    IniFile ini;
    ini.origin_ = origin;
    std::string section;
    std::vector<std::string> lines = split(text, '\n');
    for (std::size_t i = 0; i < lines.size(); ++i) {
      std::string line = trim(lines[i]);
      std::string where = origin + ":" + std::to_string(i + 1);
      if (line.empty() || line[0] == '#' || line[0] == ';') continue;
      if (line.front() == '[') {
        require(line.back() == ']', where + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        require(!section.empty(), where + ": empty section name");
        ini.sections_[section];  // materialize
        continue;
      }
      std::size_t eq = line.find('=');
      require(eq != std::string::npos, where + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      require(!key.empty(), where + ": empty key");
      require(!section.empty(), where + ": key outside any [section]");
      require(ini.sections_[section].find(key) == ini.sections_[section].end(),
              where + ": duplicate key '" + key + "' in [" + section + "]");
      ini.sections_[section][key] = value;
    }
    return ini;
  }

  static IniFile load(const fs::path& path) {
    return parse(read_text_file(path), path.string());
  }

  bool has_section(const std::string& s) const { return sections_.count(s) > 0; }
  bool has(const std::string& s, const std::string& k) const {
    auto it = sections_.find(s);
    return it != sections_.end() && it->second.count(k) > 0;
  }

  std::string get(const std::string& s, const std::string& k,
                  const std::string& fallback) const {
    auto it = sections_.find(s);
    if (it == sections_.end()) return fallback;
    auto jt = it->second.find(k);
    return jt == it->second.end() ? fallback : jt->second;
  }

  double get_number(const std::string& s, const std::string& k, double fallback) const {
    if (!has(s, k)) return fallback;
    const std::string v = get(s, k, "");
    try {
      std::size_t used = 0;
      double x = std::stod(v, &used);
      require(used == v.size(), "");
      return x;
    } catch (...) {
      throw ValidationError(origin_ + ": [" + s + "] " + k + " = '" + v +
                            "' is not a number");
    }
  }

  long get_int(const std::string& s, const std::string& k, long fallback) const {
    double v = get_number(s, k, static_cast<double>(fallback));
    long i = static_cast<long>(v);
    require(static_cast<double>(i) == v,
            origin_ + ": [" + s + "] " + k + " must be an integer");
    return i;
  }

  bool get_bool(const std::string& s, const std::string& k, bool fallback) const {
    if (!has(s, k)) return fallback;
    std::string v = get(s, k, "");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValidationError(origin_ + ": [" + s + "] " + k + " = '" + v +
                          "' is not a boolean");
  }

  std::vector<double> get_numbers(const std::string& s, const std::string& k,
                                  std::vector<double> fallback) const {
    if (!has(s, k)) return fallback;
    std::vector<double> out;
    for (const std::string& piece : split(get(s, k, ""), ',')) {
      std::string p = trim(piece);
      try {
        out.push_back(std::stod(p));
      } catch (...) {
        throw ValidationError(origin_ + ": [" + s + "] " + k +
                              " contains non-numeric entry '" + p + "'");
      }
    }
    return out;
  }

  /// Rejects keys outside the allowed set for a section.
  void check_keys(const std::string& section,
                  const std::set<std::string>& allowed) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return;
    for (const auto& [k, v] : it->second)
      require(allowed.count(k) > 0, origin_ + ": unknown key '" + k + "' in [" +
                                        section + "]");
  }
  void check_sections(const std::set<std::string>& allowed) const {
    for (const auto& [s, kv] : sections_)
      require(allowed.count(s) > 0, origin_ + ": unknown section [" + s + "]");
  }

  const std::map<std::string, std::map<std::string, std::string>>& sections() const {
    return sections_;
  }
  const std::string& origin() const { return origin_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
  std::string origin_;
};

// ---------------------------------------------------------------------------

struct EvalSection {
  fs::path out_dir = "results";
  std::string experiment;
  std::string pretraining_dataset;
  std::string architecture;
  std::string setup;  // "", "transfer" or "single_dataset"
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  fs::path out_dir = "runs";
  int threads = 0;
  bool deterministic = false;

  fs::path manifest;           // downstream dataset
  fs::path pretrain_manifest;  // distinct pretraining dataset (transfer setup)

  EncoderConfig model;
  AugmentationPolicy aug;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  EvalSection eval;
  std::map<std::string, std::vector<std::string>> sweep_grid;  // key path -> values

  fs::path config_dir;  // directory of the config file (paths resolve against it)

  bool is_transfer() const {
    return !pretrain_manifest.empty() && pretrain_manifest != manifest;
  }

  fs::path resolve(const fs::path& p) const {
    if (p.empty() || p.is_absolute()) return p;
    return config_dir / p;
  }
};

inline ExperimentConfig parse_experiment_config(const IniFile& ini) {
  ini.check_sections({"run", "dataset", "model", "augment", "pretrain", "finetune",
                      "eval", "sweep"});
  ini.check_keys("run", {"seed", "out_dir", "threads", "deterministic"});
  ini.check_keys("dataset", {"manifest", "pretrain_manifest"});
  ini.check_keys("model",
                 {"arch", "depth", "width", "patch_size", "input_size", "heads",
                  "mlp_ratio"});
  ini.check_keys("augment",
                 {"crop_scale_global", "crop_scale_local", "aspect_range",
                  "flip_probability", "color_jitter", "normalization_mean",
                  "normalization_std", "local_size"});
  ini.check_keys("pretrain",
                 {"method", "epochs", "batch_size", "lr", "warmup_frac",
                  "weight_decay", "min_lr_frac", "checkpoint_interval", "tau",
                  "proj_hidden", "proj_dim", "local_crops", "teacher_momentum",
                  "teacher_temp", "student_temp", "center_momentum", "dino_hidden",
                  "proto_dim", "mask_ratio", "decoder_dim", "decoder_depth",
                  "decoder_heads", "clusters", "kmeans_iters", "omega1", "omega2"});
  ini.check_keys("finetune", {"epochs", "batch_size", "lr", "warmup_frac",
                              "weight_decay", "freeze_backbone", "num_classes"});
  ini.check_keys("eval", {"out_dir", "experiment", "pretraining_dataset",
                          "architecture", "setup"});

  ExperimentConfig c;
  c.seed = static_cast<std::uint64_t>(ini.get_int("run", "seed", 0));
  c.out_dir = ini.get("run", "out_dir", "runs");
  c.threads = static_cast<int>(ini.get_int("run", "threads", 0));
  c.deterministic = ini.get_bool("run", "deterministic", false);

  c.manifest = ini.get("dataset", "manifest", "");
  c.pretrain_manifest = ini.get("dataset", "pretrain_manifest", "");

  c.model.arch = arch_from_name(ini.get("model", "arch", "patch_transformer"));
  c.model.depth = static_cast<std::size_t>(ini.get_int("model", "depth", 4));
  c.model.width = static_cast<std::size_t>(ini.get_int("model", "width", 128));
  c.model.patch_size = static_cast<std::size_t>(ini.get_int("model", "patch_size", 4));
  c.model.input_size = static_cast<std::size_t>(ini.get_int("model", "input_size", 32));
  c.model.heads = static_cast<std::size_t>(ini.get_int("model", "heads", 4));
  c.model.mlp_ratio = static_cast<std::size_t>(ini.get_int("model", "mlp_ratio", 4));
  if (c.model.arch == Arch::conv_residual && !ini.has("model", "width"))
    c.model.width = 32;

  auto pair_of = [&ini](const char* key, ScaleRange fallback) {
    std::vector<double> v = ini.get_numbers("augment", key, {fallback.lo, fallback.hi});
    require(v.size() == 2, std::string("augment.") + key + " needs two numbers");
    return ScaleRange{v[0], v[1]};
  };
  c.aug.crop_scale_global = pair_of("crop_scale_global", {0.4, 1.0});
  c.aug.crop_scale_local = pair_of("crop_scale_local", {0.05, 0.4});
  c.aug.aspect_range = pair_of("aspect_range", {0.75, 4.0 / 3.0});
  c.aug.flip_probability = ini.get_number("augment", "flip_probability", 0.5);
  {
    std::vector<double> j = ini.get_numbers("augment", "color_jitter", {0.4, 0.4, 0.2});
    require(j.size() == 3, "augment.color_jitter needs three numbers");
    c.aug.color_jitter = {j[0], j[1], j[2]};
    std::vector<double> m =
        ini.get_numbers("augment", "normalization_mean", {0.5, 0.5, 0.5});
    std::vector<double> s =
        ini.get_numbers("augment", "normalization_std", {0.29, 0.29, 0.29});
    require(m.size() == 3 && s.size() == 3,
            "normalization mean/std need three numbers each");
    for (int i = 0; i < 3; ++i) {
      c.aug.normalization.mean[i] = static_cast<float>(m[i]);
      c.aug.normalization.stddev[i] = static_cast<float>(s[i]);
    }
  }
  c.aug.out_size_global = c.model.input_size;
  c.aug.out_size_local = static_cast<std::size_t>(
      ini.get_int("augment", "local_size", static_cast<long>(c.model.input_size / 2)));

  PretrainConfig& p = c.pretrain;
  p.method = method_from_name(ini.get("pretrain", "method", "dino"));
  p.epochs = static_cast<int>(ini.get_int("pretrain", "epochs", 5));
  p.batch_size = static_cast<std::size_t>(ini.get_int("pretrain", "batch_size", 64));
  p.lr = ini.get_number("pretrain", "lr", 1e-3);
  p.warmup_frac = ini.get_number("pretrain", "warmup_frac", 0.1);
  p.weight_decay = ini.get_number("pretrain", "weight_decay", 1e-4);
  p.min_lr_frac = ini.get_number("pretrain", "min_lr_frac", 0.0);
  p.checkpoint_interval =
      static_cast<int>(ini.get_int("pretrain", "checkpoint_interval", 0));
  p.params.tau = ini.get_number("pretrain", "tau", 0.1);
  p.params.proj_hidden =
      static_cast<std::size_t>(ini.get_int("pretrain", "proj_hidden", 128));
  p.params.proj_dim = static_cast<std::size_t>(ini.get_int("pretrain", "proj_dim", 64));
  p.params.local_crops = static_cast<int>(ini.get_int("pretrain", "local_crops", 4));
  p.params.teacher_momentum = ini.get_number("pretrain", "teacher_momentum", 0.996);
  p.params.teacher_temp = ini.get_number("pretrain", "teacher_temp", 0.04);
  p.params.student_temp = ini.get_number("pretrain", "student_temp", 0.1);
  p.params.center_momentum = ini.get_number("pretrain", "center_momentum", 0.9);
  p.params.dino_hidden =
      static_cast<std::size_t>(ini.get_int("pretrain", "dino_hidden", 256));
  p.params.proto_dim = static_cast<std::size_t>(ini.get_int("pretrain", "proto_dim", 256));
  p.params.mask_ratio = ini.get_number("pretrain", "mask_ratio", 0.75);
  p.params.decoder_dim =
      static_cast<std::size_t>(ini.get_int("pretrain", "decoder_dim", 64));
  p.params.decoder_depth =
      static_cast<std::size_t>(ini.get_int("pretrain", "decoder_depth", 2));
  p.params.decoder_heads =
      static_cast<std::size_t>(ini.get_int("pretrain", "decoder_heads", 4));
  p.params.clusters = static_cast<int>(ini.get_int("pretrain", "clusters", 0));
  p.params.kmeans_iters = static_cast<int>(ini.get_int("pretrain", "kmeans_iters", 60));
  p.params.mixed.w_supervised = ini.get_number("pretrain", "omega1", 0.45);
  p.params.mixed.w_ssl = ini.get_number("pretrain", "omega2", 0.55);
  p.seed = c.seed;
  p.deterministic = c.deterministic;
  p.threads = c.threads;
  p.model = c.model;
  p.aug = c.aug;

  FinetuneConfig& f = c.finetune;
  f.epochs = static_cast<int>(ini.get_int("finetune", "epochs", 10));
  f.batch_size = static_cast<std::size_t>(ini.get_int("finetune", "batch_size", 64));
  f.lr = ini.get_number("finetune", "lr", 1e-3);
  f.warmup_frac = ini.get_number("finetune", "warmup_frac", 0.1);
  f.weight_decay = ini.get_number("finetune", "weight_decay", 1e-4);
  f.freeze_backbone = ini.get_bool("finetune", "freeze_backbone", false);
  f.num_classes = static_cast<std::size_t>(ini.get_int("finetune", "num_classes", 0));
  f.seed = c.seed;
  f.threads = c.threads;
  f.model = c.model;
  f.aug = c.aug;

  c.eval.out_dir = ini.get("eval", "out_dir", "results");
  c.eval.experiment = ini.get("eval", "experiment", "");
  c.eval.pretraining_dataset = ini.get("eval", "pretraining_dataset", "");
  c.eval.architecture = ini.get(
      "eval", "architecture",
      c.model.arch == Arch::patch_transformer ? "patch_transformer" : "conv_residual");
  c.eval.setup = ini.get("eval", "setup", "");

  if (ini.has_section("sweep")) {
    for (const auto& [k, v] : ini.sections().at("sweep")) {
      require(k.rfind("grid.", 0) == 0,
              ini.origin() + ": [sweep] keys must look like grid.<section>.<key>");
      std::vector<std::string> vals;
      for (const std::string& piece : split(v, ',')) vals.push_back(trim(piece));
      require(!vals.empty(), ini.origin() + ": empty sweep axis " + k);
      c.sweep_grid[k.substr(5)] = vals;
    }
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  IniFile ini = IniFile::load(path);
  ExperimentConfig c = parse_experiment_config(ini);
  c.config_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  return c;
}

}  // namespace sslwb
