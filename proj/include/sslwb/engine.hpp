#pragma once

#include <omp.h>

#include <chrono>
#include <functional>
#include <optional>
#include <sstream>

#include "sslwb/checkpoint.hpp"
#include "sslwb/data.hpp"
#include "sslwb/evaluation.hpp"
#include "sslwb/objectives.hpp"
#include "sslwb/optimizer.hpp"

namespace sslwb {

// Pretraining loops (contrastive, self-distillation, masked reconstruction,
// cluster-pseudolabel, mixed multitask, plain supervised), downstream
// finetuning and the checkpoint/log plumbing around them.
//
// Reproducibility model: every random draw comes from a stream derived from
// (seed, purpose, epoch, sample index). Runs with equal seeds and equal
// thread counts produce bit-identical parameter trajectories; the sample
// streams are shared across methods so e.g. the supervised arm of the mixed
// method sees exactly the views a pure supervised run sees.

enum class Method { simclr, dino, mae, deepcluster, mixed, supervised, none };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::simclr: return "simclr";
    case Method::dino: return "dino";
    case Method::mae: return "mae";
    case Method::deepcluster: return "deepcluster";
    case Method::mixed: return "mixed";
    case Method::supervised: return "supervised";
    default: return "none";
  }
}

inline Method method_from_name(const std::string& s) {
  for (Method m : {Method::simclr, Method::dino, Method::mae, Method::deepcluster,
                   Method::mixed, Method::supervised, Method::none})
    if (s == method_name(m)) return m;
  throw ValidationError("unknown pretraining method: '" + s + "'");
}

struct MethodParams {
  // contrastive
  double tau = 0.1;
  std::size_t proj_hidden = 128, proj_dim = 64;
  // self-distillation
  int local_crops = 4;
  double teacher_momentum = 0.996;
  double teacher_temp = 0.04, student_temp = 0.1, center_momentum = 0.9;
  std::size_t dino_hidden = 256, proto_dim = 256;
  // masked reconstruction
  double mask_ratio = 0.75;
  std::size_t decoder_dim = 64, decoder_depth = 2, decoder_heads = 4;
  // cluster pseudolabels
  int clusters = 0;  // 0 = 2 x class count
  int kmeans_iters = 60;
  // mixed
  MixedWeights mixed;
};

struct PretrainConfig {
  Method method = Method::dino;
  int epochs = 5;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double warmup_frac = 0.1;
  double weight_decay = 1e-4;
  double min_lr_frac = 0.0;
  std::uint64_t seed = 0;
  bool deterministic = false;
  int threads = 0;  // 0 = library default
  int checkpoint_interval = 0;  // epochs; 0 = final only
  MethodParams params;
  EncoderConfig model;
  AugmentationPolicy aug;

  void validate() const {
    model.validate();
    aug.validate();
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1 && batch_size <= 512,
            "batch size must lie in [1, 512] (memory budget cap)");
    if (method == Method::simclr) {
      require(batch_size >= 2, "contrastive pretraining needs batch size >= 2");
      require(params.tau > 0.0, "temperature must be positive");
    }
    if (method == Method::dino || method == Method::mixed) {
      require(params.local_crops >= 0, "local crop count must be non-negative");
      require(params.teacher_momentum >= 0.0 && params.teacher_momentum <= 1.0,
              "teacher momentum must lie in [0,1]");
      require(params.teacher_temp > 0.0 && params.student_temp > 0.0,
              "temperatures must be positive");
    }
    if (method == Method::mae) {
      require(model.arch == Arch::patch_transformer,
              "masked-autoencoder pretraining requires the patch_transformer "
              "architecture");
      const std::size_t g = model.input_size / model.patch_size;
      const std::size_t np = g * g;
      const std::size_t masked =
          static_cast<std::size_t>(std::floor(params.mask_ratio * static_cast<double>(np) + 1e-9));
      require(masked >= 1, "mask ratio leaves no masked patch");
      require(masked < np, "mask ratio leaves no visible patch");
    }
    if (method == Method::mixed) params.mixed.validate();
    if (method == Method::deepcluster)
      require(params.clusters >= 0, "cluster count must be non-negative");
    require(lr > 0.0, "learning rate must be positive");
    require(warmup_frac >= 0.0 && warmup_frac < 1.0, "warmup fraction must lie in [0,1)");
  }
};

struct FinetuneConfig {
  int epochs = 10;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double warmup_frac = 0.1;
  double weight_decay = 1e-4;
  bool freeze_backbone = false;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  int threads = 0;
  EncoderConfig model;  // used for random initialization
  AugmentationPolicy aug;

  void validate() const {
    require(num_classes >= 2, "downstream task needs at least 2 classes");
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1 && batch_size <= 512, "batch size must lie in [1, 512]");
    aug.validate();
  }
};

// ---------------------------------------------------------------------------
// Logs and trace instrumentation.

struct EpochRecord {
  int epoch = 0;
  double loss_mean = 0.0;
  double lr_last = 0.0;
  double wall_s = 0.0;
  std::map<std::string, double> extras;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  // per optimizer step
  std::vector<double> step_loss;
  std::vector<double> step_loss_supervised;  // mixed/supervised only
  std::vector<double> step_loss_ssl;         // mixed/dino only

  std::string to_text() const {
    std::ostringstream os;
    os << "sslwb-log\t1\n";
    for (const auto& e : epochs) {
      os << e.epoch << "\t" << std::setprecision(10) << e.loss_mean << "\t" << e.lr_last
         << "\t" << e.wall_s;
      for (const auto& [k, v] : e.extras) os << "\t" << k << "=" << v;
      os << "\n";
    }
    return os.str();
  }
};

enum class TraceEvent {
  epoch_start,
  recluster,
  head_reinit,
  batch_assembled,
  loss_computed,
  student_update,
  ema_update,
  center_update,
  epoch_end,
  checkpoint_written,
};

inline const char* trace_event_name(TraceEvent e) {
  switch (e) {
    case TraceEvent::epoch_start: return "epoch_start";
    case TraceEvent::recluster: return "recluster";
    case TraceEvent::head_reinit: return "head_reinit";
    case TraceEvent::batch_assembled: return "batch_assembled";
    case TraceEvent::loss_computed: return "loss_computed";
    case TraceEvent::student_update: return "student_update";
    case TraceEvent::ema_update: return "ema_update";
    case TraceEvent::center_update: return "center_update";
    case TraceEvent::epoch_end: return "epoch_end";
    default: return "checkpoint_written";
  }
}

using TraceSink = std::function<void(TraceEvent, int /*epoch*/, long /*step*/)>;

// ---------------------------------------------------------------------------
// Head specs embedded in checkpoints so downstream stages can rebuild models.

inline std::string encode_head_configs(const std::vector<HeadConfig>& heads) {
  std::string out;
  for (const auto& h : heads) {
    if (!out.empty()) out += ";";
    out += h.name + ":" +
           (h.kind == HeadKind::classification ? "classification" : "projection") + ":" +
           std::to_string(h.output_dim) + ":" + (h.l2_bottleneck ? "1" : "0") + ":";
    for (std::size_t i = 0; i < h.hidden_dims.size(); ++i) {
      if (i) out += "|";
      out += std::to_string(h.hidden_dims[i]);
    }
  }
  return out;
}

inline std::vector<HeadConfig> decode_head_configs(const std::string& text) {
  std::vector<HeadConfig> out;
  if (text.empty()) return out;
  for (const std::string& item : split(text, ';')) {
    std::vector<std::string> f = split(item, ':');
    require(f.size() == 5, "bad head spec in checkpoint metadata: " + item);
    HeadConfig h;
    h.name = f[0];
    h.kind = f[1] == "classification" ? HeadKind::classification : HeadKind::projection;
    h.output_dim = std::stoul(f[2]);
    h.l2_bottleneck = f[3] == "1";
    if (!f[4].empty())
      for (const std::string& d : split(f[4], '|')) h.hidden_dims.push_back(std::stoul(d));
    out.push_back(h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config digest (detects mismatched resume). Dataset and output paths are
// deliberately excluded: the digest pins the training recipe, not file
// locations.

inline std::string canonical_config_string(const PretrainConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "method=" << method_name(c.method) << "\n"
     << "epochs=" << c.epochs << "\nbatch_size=" << c.batch_size << "\nlr=" << c.lr
     << "\nwarmup_frac=" << c.warmup_frac << "\nweight_decay=" << c.weight_decay
     << "\nmin_lr_frac=" << c.min_lr_frac << "\nseed=" << c.seed
     << "\narch=" << arch_name(c.model.arch) << "\ndepth=" << c.model.depth
     << "\nwidth=" << c.model.width << "\npatch=" << c.model.patch_size
     << "\ninput=" << c.model.input_size << "\nheads=" << c.model.heads
     << "\nmlp_ratio=" << c.model.mlp_ratio << "\ntau=" << c.params.tau
     << "\nlocal_crops=" << c.params.local_crops
     << "\nteacher_momentum=" << c.params.teacher_momentum
     << "\nteacher_temp=" << c.params.teacher_temp
     << "\nstudent_temp=" << c.params.student_temp
     << "\ncenter_momentum=" << c.params.center_momentum
     << "\nmask_ratio=" << c.params.mask_ratio << "\nclusters=" << c.params.clusters
     << "\nomega1=" << c.params.mixed.w_supervised
     << "\nomega2=" << c.params.mixed.w_ssl << "\nproj=" << c.params.proj_hidden << ","
     << c.params.proj_dim << "\ndino_head=" << c.params.dino_hidden << ","
     << c.params.proto_dim << "\ndecoder=" << c.params.decoder_dim << ","
     << c.params.decoder_depth << "," << c.params.decoder_heads
     << "\ncrop_global=" << c.aug.crop_scale_global.lo << "," << c.aug.crop_scale_global.hi
     << "\ncrop_local=" << c.aug.crop_scale_local.lo << "," << c.aug.crop_scale_local.hi
     << "\nflip=" << c.aug.flip_probability << "\njitter=" << c.aug.color_jitter.brightness
     << "," << c.aug.color_jitter.contrast << "," << c.aug.color_jitter.saturation
     << "\nout_sizes=" << c.aug.out_size_global << "," << c.aug.out_size_local << "\n";
  return os.str();
}

inline Digest256 config_digest(const PretrainConfig& c) {
  return sha256(canonical_config_string(c));
}

// ---------------------------------------------------------------------------

struct PretrainOutputs {
  Checkpoint checkpoint;
  TrainingLog log;
};

namespace detail {

template <class T>
struct ParamGroup {
  std::vector<ParamSet<T>*> sets;
  template <class Fn>
  void for_each_param(Fn&& fn) {
    for (auto* s : sets) s->for_each(fn);
  }
  void zero_grads() {
    for (auto* s : sets) s->zero_grads();
  }
};

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n,
                                                          std::size_t batch_size,
                                                          std::size_t min_tail,
                                                          RngStream rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::size_t end = std::min(n, start + batch_size);
    if (end - start < std::max<std::size_t>(min_tail, 1)) break;
    batches.emplace_back(order.begin() + static_cast<long>(start),
                         order.begin() + static_cast<long>(end));
  }
  return batches;
}

/// Shared per-method scaffolding for the pretraining loops.
class PretrainRun {
 public:
  PretrainRun(const PretrainConfig& cfg, const DatasetManifest& manifest,
              const fs::path& data_dir, const TraceSink& trace)
      : cfg_(cfg), manifest_(manifest), trace_(trace) {
    cfg_.validate();
    require(!manifest.records.empty(), "pretraining dataset is empty");
    if (cfg_.threads > 0) omp_set_num_threads(cfg_.threads);
    else if (cfg_.deterministic) omp_set_num_threads(1);
    data_ = load_split_data(manifest, data_dir, Split::train, /*fallback_all=*/true);
    require(data_.size() >= 2, "pretraining needs at least 2 training images");
  }

  const SplitData& data() const { return data_; }

  void emit(TraceEvent e, int epoch, long step) const {
    if (trace_) trace_(e, epoch, step);
  }

  static void scale_grad(Tensor<float>& g, float s) {
    for (auto& v : g.data) v *= s;
  }

  Image local_view_for_arch(Image v) const {
    // conv backbones take local crops resized to the global resolution
    if (cfg_.model.arch == Arch::conv_residual &&
        (v.dim(0) != cfg_.aug.out_size_global || v.dim(1) != cfg_.aug.out_size_global))
      return resize_bilinear(v, cfg_.aug.out_size_global, cfg_.aug.out_size_global);
    return v;
  }

  const PretrainConfig cfg() const { return cfg_; }

 protected:
  PretrainConfig cfg_;
  const DatasetManifest& manifest_;
  TraceSink trace_;
  SplitData data_;
};

}  // namespace detail

// Forward declaration (implementation below).
PretrainOutputs pretrain(const PretrainConfig& cfg, const DatasetManifest& manifest,
                         const fs::path& data_dir, const TraceSink& trace = {},
                         const Checkpoint* resume = nullptr,
                         const fs::path& out_path = {});

/// Multitask pretraining (Eq.-6-style weighted combination); requires a
/// labeled manifest.
inline PretrainOutputs pretrain_mixed(PretrainConfig cfg, const DatasetManifest& manifest,
                                      const fs::path& data_dir,
                                      const TraceSink& trace = {},
                                      const Checkpoint* resume = nullptr,
                                      const fs::path& out_path = {}) {
  cfg.method = Method::mixed;
  return pretrain(cfg, manifest, data_dir, trace, resume, out_path);
}

inline PretrainOutputs pretrain(const PretrainConfig& cfg_in,
                                const DatasetManifest& manifest,
                                const fs::path& data_dir, const TraceSink& trace,
                                const Checkpoint* resume, const fs::path& out_path) {
  using Clock = std::chrono::steady_clock;
  detail::PretrainRun run(cfg_in, manifest, data_dir, trace);
  const PretrainConfig cfg = run.cfg();
  const SplitData& data = run.data();
  const std::uint64_t seed = cfg.seed;
  const MethodParams& mp = cfg.params;

  const bool needs_labels = cfg.method == Method::mixed || cfg.method == Method::supervised;
  if (needs_labels)
    require(manifest.labeled(),
            "the mixed and supervised objectives can only be used when the "
            "pretraining dataset is annotated");

  // --- model assembly -------------------------------------------------------
  std::vector<HeadConfig> head_cfgs;
  HeadConfig proj{HeadKind::projection, "proj", {mp.proj_hidden}, mp.proj_dim, false};
  HeadConfig dino{HeadKind::projection, "dino", {mp.dino_hidden}, mp.proto_dim, true};
  HeadConfig cls{HeadKind::classification, "cls", {}, data.num_classes, false};
  HeadConfig dc_head{HeadKind::classification, "dc", {}, 1, false};  // sized later

  int n_clusters = mp.clusters;
  if (cfg.method == Method::deepcluster) {
    if (n_clusters <= 0)
      n_clusters = 2 * static_cast<int>(std::max<std::size_t>(data.num_classes, 5));
    require(static_cast<std::size_t>(n_clusters) <= data.size(),
            "cluster count exceeds the number of training samples");
    dc_head.output_dim = static_cast<std::size_t>(n_clusters);
  }

  switch (cfg.method) {
    case Method::simclr: head_cfgs = {proj}; break;
    case Method::dino: head_cfgs = {dino}; break;
    case Method::mixed: head_cfgs = {dino, cls}; break;
    case Method::supervised: head_cfgs = {cls}; break;
    case Method::deepcluster: head_cfgs = {dc_head}; break;
    default: break;  // mae, none: no embedding heads
  }

  Network<float> net(cfg.model, head_cfgs, seed);

  std::unique_ptr<MAEDecoder<float>> decoder;
  ParamSet<float> decoder_params;
  if (cfg.method == Method::mae) {
    decoder = std::make_unique<MAEDecoder<float>>(cfg.model, mp.decoder_dim,
                                                  mp.decoder_depth, mp.decoder_heads,
                                                  decoder_params);
    decoder_params.initialize(seed);
  }

  std::optional<TeacherState<float>> teacher;
  if (cfg.method == Method::dino || cfg.method == Method::mixed) {
    teacher = TeacherState<float>::make(net, {dino},
                                        static_cast<float>(mp.teacher_momentum),
                                        mp.proto_dim);
  }

  detail::ParamGroup<float> group{net.param_sets()};
  if (decoder) group.sets.push_back(&decoder_params);

  typename AdamW<float>::Hyper hyper;
  hyper.weight_decay = cfg.weight_decay;
  AdamW<float> opt(hyper);

  const std::size_t min_tail = cfg.method == Method::simclr ? 2 : 1;
  const std::size_t steps_per_epoch =
      detail::make_batches(data.size(), cfg.batch_size, min_tail,
                           RngStream::derived(seed, "shuffle", 0))
          .size();
  require(steps_per_epoch > 0 || cfg.method == Method::none,
          "batch size leaves no usable batch");
  LrSchedule sched{cfg.lr,
                   static_cast<std::size_t>(cfg.warmup_frac *
                                            static_cast<double>(steps_per_epoch * cfg.epochs)),
                   steps_per_epoch * static_cast<std::size_t>(cfg.epochs),
                   cfg.min_lr_frac, true};

  // --- resume ----------------------------------------------------------------
  int start_epoch = 0;
  const Digest256 digest = config_digest(cfg);
  if (resume) {
    require(resume->config_digest == digest,
            "resume checkpoint was produced by a different configuration");
    net.load(resume->arrays_with_prefix("student."));
    if (decoder) {
      auto dec_arrays = resume->arrays_with_prefix("student.");
      std::map<std::string, const Tensor<float>*> by_name;
      for (auto& [n, t] : dec_arrays) by_name[n] = &t;
      decoder_params.for_each([&by_name](Param<float>& p) {
        auto it = by_name.find(p.name);
        require(it != by_name.end(), "checkpoint missing parameter: " + p.name);
        p.value = *it->second;
      });
    }
    if (teacher) {
      teacher->net->load(resume->arrays_with_prefix("teacher."));
      const Tensor<float>* c = resume->find_array("teacher.center");
      require(c != nullptr, "checkpoint missing teacher center");
      teacher->center = *c;
    }
    if (resume->has_optimizer)
      opt.import_state(resume->optimizer_arrays, resume->optimizer_step);
    start_epoch = static_cast<int>(resume->epoch);
  }

  // --- bookkeeping -----------------------------------------------------------
  TrainingLog log;
  std::vector<int> prev_assign;

  auto label_onehot = [&data](const std::vector<std::size_t>& batch) {
    std::vector<int> lab;
    lab.reserve(batch.size());
    for (std::size_t idx : batch) lab.push_back(data.labels[idx]);
    return onehot_from_labels<float>(lab, data.num_classes);
  };

  auto make_checkpoint = [&](int epochs_done) {
    Checkpoint c;
    c.config_digest = digest;
    c.method = method_name(cfg.method);
    c.encoder = cfg.model;
    c.epoch = static_cast<std::uint32_t>(epochs_done);
    c.seed = seed;
    c.metadata["heads"] = encode_head_configs(head_cfgs);
    c.metadata["num_classes"] = std::to_string(data.num_classes);
    c.metadata["param_count"] = std::to_string(net.parameter_count() +
                                               decoder_params.total_count());
    if (cfg.method == Method::deepcluster)
      c.metadata["clusters"] = std::to_string(n_clusters);
    if (decoder)
      c.metadata["decoder"] = std::to_string(mp.decoder_dim) + ":" +
                              std::to_string(mp.decoder_depth) + ":" +
                              std::to_string(mp.decoder_heads);
    net.for_each_param([&c](const Param<float>& p) {
      c.arrays.emplace_back("student." + p.name, p.value);
    });
    decoder_params.for_each([&c](const Param<float>& p) {
      c.arrays.emplace_back("student." + p.name, p.value);
    });
    if (teacher) {
      teacher->net->for_each_param([&c](const Param<float>& p) {
        c.arrays.emplace_back("teacher." + p.name, p.value);
      });
      c.arrays.emplace_back("teacher.center", teacher->center);
    }
    c.has_optimizer = true;
    c.optimizer_step = opt.step_count();
    c.optimizer_arrays = opt.export_state();
    return c;
  };

  if (cfg.method == Method::none) {
    PretrainOutputs out{make_checkpoint(0), log};
    if (!out_path.empty()) {
      save_checkpoint(out.checkpoint, out_path);
      run.emit(TraceEvent::checkpoint_written, 0, -1);
    }
    return out;
  }

  // --- per-step workers -------------------------------------------------------

  // Contrastive step: two views per image, NT-Xent on the projection head.
  auto simclr_step = [&](const std::vector<std::size_t>& batch, int epoch) {
    const std::size_t b = batch.size();
    std::vector<Image> views(2 * b);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(b); ++i) {
      const std::size_t idx = batch[static_cast<std::size_t>(i)];
      ViewPair vp = make_view_pair(
          data.images[idx], cfg.aug,
          RngStream::derived(seed, "aug.simclr", epoch, idx), idx);
      views[2 * static_cast<std::size_t>(i)] = std::move(vp.view_a);
      views[2 * static_cast<std::size_t>(i) + 1] = std::move(vp.view_b);
    }
    Tensor<float> in = stack_images(views);
    typename Network<float>::EmbedTrace tr;
    Tensor<float> emb = net.embed(in, tr);
    typename Head<float>::Trace htr;
    Tensor<float> z = net.head("proj").forward(emb, htr);
    auto lg = nt_xent_with_grad(SimCLRBatchRepr<float>{z},
                                Temperature(mp.tau));
    group.zero_grads();
    Tensor<float> demb = net.head("proj").backward(htr, lg.grad);
    net.backward_embed(tr, demb);
    return static_cast<double>(lg.loss);
  };

  // Self-distillation forward/backward; returns the batch-mean loss. Used by
  // both the pure method and the mixed arm (grad scale ω2).
  auto dino_arm = [&](const std::vector<std::size_t>& batch, int epoch,
                      float grad_scale, bool zero_first) {
    const std::size_t b = batch.size();
    const std::size_t k = static_cast<std::size_t>(mp.local_crops);
    std::vector<Image> globals(2 * b);
    std::vector<Image> locals(k * b);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(b); ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      const std::size_t idx = batch[ii];
      MultiCropSet mc =
          make_multicrop(data.images[idx], mp.local_crops, cfg.aug,
                         RngStream::derived(seed, "aug.dino", epoch, idx));
      globals[2 * ii] = std::move(mc.globals[0]);
      globals[2 * ii + 1] = std::move(mc.globals[1]);
      for (std::size_t j = 0; j < k; ++j)
        locals[ii * k + j] = run.local_view_for_arch(std::move(mc.locals[j]));
    }
    Tensor<float> gin = stack_images(globals);

    // teacher path (constants for the gradient)
    Tensor<float> t_logits;
    {
      Tensor<float> temb = teacher->net->embed(gin);
      typename Head<float>::Trace tht;
      t_logits = teacher->net->head("dino").forward(temb, tht);
    }
    Tensor<float> t_dists = sharpen_and_center(
        t_logits, teacher->center, static_cast<float>(mp.teacher_temp));

    // student paths
    typename Network<float>::EmbedTrace trg, trl;
    typename Head<float>::Trace htg, htl;
    Tensor<float> s_logits_g =
        net.head("dino").forward(net.embed(gin, trg), htg);
    Tensor<float> s_logits_l;
    if (k > 0) {
      Tensor<float> lin = stack_images(locals);
      s_logits_l = net.head("dino").forward(net.embed(lin, trl), htl);
    }

    const std::size_t p = mp.proto_dim;
    Tensor<float> dlg({2 * b, p});
    Tensor<float> dll = k > 0 ? Tensor<float>({k * b, p}) : Tensor<float>();
    double loss_sum = 0.0;
    const float invb = 1.0f / static_cast<float>(b);
    for (std::size_t i = 0; i < b; ++i) {
      Tensor<float> tview({2, p}), sview({2 + k, p});
      for (std::size_t j = 0; j < p; ++j) {
        tview.at(0, j) = t_dists.at(2 * i, j);
        tview.at(1, j) = t_dists.at(2 * i + 1, j);
        sview.at(0, j) = s_logits_g.at(2 * i, j);
        sview.at(1, j) = s_logits_g.at(2 * i + 1, j);
        for (std::size_t l = 0; l < k; ++l)
          sview.at(2 + l, j) = s_logits_l.at(i * k + l, j);
      }
      auto lg = dino_loss_from_logits(tview, sview, static_cast<float>(mp.student_temp));
      loss_sum += static_cast<double>(lg.loss);
      for (std::size_t j = 0; j < p; ++j) {
        dlg.at(2 * i, j) = lg.grad.at(0, j) * invb;
        dlg.at(2 * i + 1, j) = lg.grad.at(1, j) * invb;
        for (std::size_t l = 0; l < k; ++l)
          dll.at(i * k + l, j) = lg.grad.at(2 + l, j) * invb;
      }
    }
    if (zero_first) group.zero_grads();
    run.scale_grad(dlg, grad_scale);
    Tensor<float> dembg = net.head("dino").backward(htg, dlg);
    net.backward_embed(trg, dembg);
    if (k > 0) {
      run.scale_grad(dll, grad_scale);
      Tensor<float> dembl = net.head("dino").backward(htl, dll);
      net.backward_embed(trl, dembl);
    }
    return std::pair<double, Tensor<float>>(loss_sum / static_cast<double>(b),
                                            std::move(t_logits));
  };

  auto teacher_post_step = [&](int epoch, long step, const Tensor<float>& t_logits) {
    ema_update(*teacher->net, net, static_cast<float>(mp.teacher_momentum));
    run.emit(TraceEvent::ema_update, epoch, step);
    teacher->center = update_center(teacher->center, t_logits,
                                    static_cast<float>(mp.center_momentum));
    run.emit(TraceEvent::center_update, epoch, step);
  };

  // Masked-reconstruction step.
  auto mae_step = [&](const std::vector<std::size_t>& batch, int epoch) {
    const std::size_t b = batch.size();
    const std::size_t g = cfg.model.input_size / cfg.model.patch_size;
    std::vector<Image> views(b);
    std::vector<MaskSpec> masks(b);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(b); ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      const std::size_t idx = batch[ii];
      views[ii] = make_supervised_view(
          data.images[idx], cfg.aug, RngStream::derived(seed, "aug.mae", epoch, idx));
      masks[ii] = make_mask(g, g, mp.mask_ratio,
                            RngStream::derived(seed, "mask", epoch, idx));
    }
    Tensor<float> in = stack_images(views);
    typename ViTEncoder<float>::Trace vtr;
    Tensor<float> lat = net.vit()->forward_tokens(in, &masks, vtr);
    typename MAEDecoder<float>::Trace dtr;
    Tensor<float> recon = decoder->forward(lat, vtr.kept, b, dtr);

    const std::size_t s = cfg.model.input_size;
    Tensor<float> drecon(recon.shape);
    double loss_sum = 0.0;
    const float invb = 1.0f / static_cast<float>(b);
    for (std::size_t i = 0; i < b; ++i) {
      Tensor<float> p({s, s, 3}), y({s, s, 3});
      std::copy_n(&recon.data[i * s * s * 3], s * s * 3, p.data.begin());
      std::copy_n(&in.data[i * s * s * 3], s * s * 3, y.data.begin());
      auto target = MaeTarget<float>::from_patch_mask(std::move(p), std::move(y),
                                                      masks[i], cfg.model.patch_size);
      auto lg = mae_loss_with_grad(target);
      loss_sum += static_cast<double>(lg.loss);
      for (std::size_t j = 0; j < s * s * 3; ++j)
        drecon.data[i * s * s * 3 + j] = lg.grad[j] * invb;
    }
    group.zero_grads();
    Tensor<float> dlat = decoder->backward(dtr, drecon);
    net.vit()->backward_tokens(vtr, dlat);
    return loss_sum / static_cast<double>(b);
  };

  // Supervised classification forward/backward (grad scale ω1 in mixed).
  auto supervised_arm = [&](const std::vector<std::size_t>& batch, int epoch,
                            float grad_scale, bool zero_first) {
    const std::size_t b = batch.size();
    std::vector<Image> views(b);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(b); ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      const std::size_t idx = batch[ii];
      views[ii] = make_supervised_view(
          data.images[idx], cfg.aug, RngStream::derived(seed, "aug.sup", epoch, idx));
    }
    Tensor<float> in = stack_images(views);
    typename Network<float>::EmbedTrace tr;
    Tensor<float> emb = net.embed(in, tr);
    typename Head<float>::Trace htr;
    Tensor<float> logits = net.head("cls").forward(emb, htr);
    auto lg = deepcluster_loss_with_grad(label_onehot(batch), logits);
    if (zero_first) group.zero_grads();
    run.scale_grad(lg.grad, grad_scale);
    Tensor<float> demb = net.head("cls").backward(htr, lg.grad);
    net.backward_embed(tr, demb);
    return static_cast<double>(lg.loss);
  };

  // Cluster-pseudolabel classification step.
  std::vector<int> pseudo;
  auto deepcluster_step = [&](const std::vector<std::size_t>& batch, int epoch) {
    const std::size_t b = batch.size();
    std::vector<Image> views(b);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(b); ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      const std::size_t idx = batch[ii];
      views[ii] = make_supervised_view(
          data.images[idx], cfg.aug, RngStream::derived(seed, "aug.dc", epoch, idx));
    }
    Tensor<float> in = stack_images(views);
    typename Network<float>::EmbedTrace tr;
    Tensor<float> emb = net.embed(in, tr);
    typename Head<float>::Trace htr;
    Tensor<float> logits = net.head("dc").forward(emb, htr);
    std::vector<int> lab(b);
    for (std::size_t i = 0; i < b; ++i) lab[i] = pseudo[batch[i]];
    auto lg = deepcluster_loss_with_grad(
        onehot_from_labels<float>(lab, static_cast<std::size_t>(n_clusters)), logits);
    group.zero_grads();
    Tensor<float> demb = net.head("dc").backward(htr, lg.grad);
    net.backward_embed(tr, demb);
    return static_cast<double>(lg.loss);
  };

  // Feature extraction over the whole training set (inference views). Rows
  // are L2-normalized before clustering so the pseudolabel space tracks
  // feature direction rather than drifting embedding scale.
  auto extract_features = [&]() {
    const std::size_t d = net.embed_dim();
    Tensor<float> feats({data.size(), d});
    const std::size_t bs = std::max<std::size_t>(cfg.batch_size, 32);
    for (std::size_t start = 0; start < data.size(); start += bs) {
      const std::size_t n = std::min(bs, data.size() - start);
      std::vector<Image> views(n);
#pragma omp parallel for schedule(static)
      for (long i = 0; i < static_cast<long>(n); ++i)
        views[static_cast<std::size_t>(i)] =
            make_eval_view(data.images[start + static_cast<std::size_t>(i)], cfg.aug);
      Tensor<float> emb = net.embed(stack_images(views));
      std::copy_n(emb.data.begin(), n * d,
                  feats.data.begin() + static_cast<long>(start * d));
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      float s = 0.0f;
      for (std::size_t j = 0; j < d; ++j) s += feats.at(i, j) * feats.at(i, j);
      float inv = 1.0f / std::sqrt(s + 1e-12f);
      for (std::size_t j = 0; j < d; ++j) feats.at(i, j) *= inv;
    }
    return feats;
  };

  // --- epochs -------------------------------------------------------------
  long global_step = static_cast<long>(start_epoch) * static_cast<long>(steps_per_epoch);
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    auto t0 = Clock::now();
    run.emit(TraceEvent::epoch_start, epoch, -1);
    EpochRecord rec;
    rec.epoch = epoch;

    if (cfg.method == Method::deepcluster) {
      // Alternation: re-cluster current features, then train on pseudolabels.
      Tensor<float> feats = extract_features();
      auto km = kmeans(feats, n_clusters, mp.kmeans_iters,
                       derive_seed(seed, "kmeans"), epoch);
      pseudo = km.labels.assignments;
      run.emit(TraceEvent::recluster, epoch, -1);
      double frac = 1.0;
      if (!prev_assign.empty()) {
        // fraction of samples whose greedy-matched cluster changed
        std::map<std::pair<int, int>, std::size_t> overlap;
        for (std::size_t i = 0; i < pseudo.size(); ++i)
          ++overlap[{prev_assign[i], pseudo[i]}];
        std::vector<std::tuple<std::size_t, int, int>> cells;
        for (const auto& [k2, v] : overlap) cells.emplace_back(v, k2.first, k2.second);
        std::sort(cells.rbegin(), cells.rend());
        std::set<int> used_old, used_new;
        std::size_t agree = 0;
        for (const auto& [v, o, nw] : cells)
          if (!used_old.count(o) && !used_new.count(nw)) {
            used_old.insert(o);
            used_new.insert(nw);
            agree += v;
          }
        frac = 1.0 - static_cast<double>(agree) / static_cast<double>(pseudo.size());
      }
      prev_assign = pseudo;
      rec.extras["reassigned_frac"] = frac;
      rec.extras["kmeans_wcss"] = static_cast<double>(km.wcss);
      // fresh pseudolabel classifier per clustering (ids are not stable)
      net.head_param_set("dc").initialize(derive_seed(seed, "dc_head", epoch));
      opt.reset_state([](const std::string& n) { return n.rfind("head.dc.", 0) == 0; });
      run.emit(TraceEvent::head_reinit, epoch, -1);
    }

    auto batches = detail::make_batches(data.size(), cfg.batch_size, min_tail,
                                        RngStream::derived(seed, "shuffle", epoch));
    double loss_acc = 0.0, sup_acc = 0.0, ssl_acc = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      run.emit(TraceEvent::batch_assembled, epoch, global_step);
      const double lr = sched.at(static_cast<std::size_t>(global_step));
      double loss = 0.0;
      switch (cfg.method) {
        case Method::simclr:
          loss = simclr_step(batches[bi], epoch);
          run.emit(TraceEvent::loss_computed, epoch, global_step);
          opt.step(group, lr);
          run.emit(TraceEvent::student_update, epoch, global_step);
          break;
        case Method::dino: {
          auto [l, t_logits] = dino_arm(batches[bi], epoch, 1.0f, true);
          loss = l;
          run.emit(TraceEvent::loss_computed, epoch, global_step);
          opt.step(group, lr);
          run.emit(TraceEvent::student_update, epoch, global_step);
          teacher_post_step(epoch, global_step, t_logits);
          ssl_acc += l;
          log.step_loss_ssl.push_back(l);
          break;
        }
        case Method::mae:
          loss = mae_step(batches[bi], epoch);
          run.emit(TraceEvent::loss_computed, epoch, global_step);
          opt.step(group, lr);
          run.emit(TraceEvent::student_update, epoch, global_step);
          break;
        case Method::deepcluster:
          loss = deepcluster_step(batches[bi], epoch);
          run.emit(TraceEvent::loss_computed, epoch, global_step);
          opt.step(group, lr);
          run.emit(TraceEvent::student_update, epoch, global_step);
          break;
        case Method::supervised:
          loss = supervised_arm(batches[bi], epoch, 1.0f, true);
          run.emit(TraceEvent::loss_computed, epoch, global_step);
          opt.step(group, lr);
          run.emit(TraceEvent::student_update, epoch, global_step);
          sup_acc += loss;
          log.step_loss_supervised.push_back(loss);
          break;
        case Method::mixed: {
          double lsup = supervised_arm(batches[bi], epoch,
                                       static_cast<float>(mp.mixed.w_supervised), true);
          auto [lssl, t_logits] =
              dino_arm(batches[bi], epoch, static_cast<float>(mp.mixed.w_ssl), false);
          loss = static_cast<double>(
              mixed_loss(lsup, lssl, mp.mixed));
          run.emit(TraceEvent::loss_computed, epoch, global_step);
          opt.step(group, lr);
          run.emit(TraceEvent::student_update, epoch, global_step);
          teacher_post_step(epoch, global_step, t_logits);
          sup_acc += lsup;
          ssl_acc += lssl;
          log.step_loss_supervised.push_back(lsup);
          log.step_loss_ssl.push_back(lssl);
          break;
        }
        default: break;
      }
      log.step_loss.push_back(loss);
      loss_acc += loss;
      rec.lr_last = lr;
      ++global_step;
    }

    rec.loss_mean = batches.empty() ? 0.0 : loss_acc / static_cast<double>(batches.size());
    if (cfg.method == Method::mixed) {
      rec.extras["loss_supervised"] = sup_acc / static_cast<double>(batches.size());
      rec.extras["loss_ssl"] = ssl_acc / static_cast<double>(batches.size());
    }
    rec.wall_s = std::chrono::duration<double>(Clock::now() - t0).count();
    log.epochs.push_back(rec);
    run.emit(TraceEvent::epoch_end, epoch, -1);

    if (!out_path.empty() && cfg.checkpoint_interval > 0 &&
        (epoch + 1) % cfg.checkpoint_interval == 0 && epoch + 1 < cfg.epochs) {
      fs::path interim = out_path;
      interim += ".e" + std::to_string(epoch + 1);
      save_checkpoint(make_checkpoint(epoch + 1), interim);
      run.emit(TraceEvent::checkpoint_written, epoch, -1);
    }
  }

  PretrainOutputs out{make_checkpoint(cfg.epochs), log};
  if (!out_path.empty()) {
    save_checkpoint(out.checkpoint, out_path);
    run.emit(TraceEvent::checkpoint_written, cfg.epochs - 1, -1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Downstream finetuning.

struct FinetuneResult {
  std::shared_ptr<Network<float>> net;  // final-epoch model
  Checkpoint checkpoint;                // best-on-val parameters
  int best_epoch = -1;
  double best_val_accuracy = 0.0;
  double last_val_accuracy = 0.0;
  TrainingLog log;
};

/// Loads the pretrained backbone (or random-initializes one), replaces the
/// pretraining heads with a fresh classification head and trains on the
/// train split. The best-on-val parameter set is retained in the returned
/// checkpoint; when the manifest has no val split the last epoch wins.
inline FinetuneResult finetune(const FinetuneConfig& cfg_in, const Checkpoint* init,
                               const DatasetManifest& manifest, const fs::path& data_dir,
                               const TraceSink& trace = {}) {
  FinetuneConfig cfg = cfg_in;
  cfg.validate();
  if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
  SplitData train = load_split_data(manifest, data_dir, Split::train);
  require(!train.images.empty(), "finetune train split is empty");
  require(manifest.labeled(), "finetuning requires a labeled manifest");
  require(train.num_classes == cfg.num_classes,
          "num_classes does not match the manifest class count");
  SplitData val = load_split_data(manifest, data_dir, Split::val);

  EncoderConfig enc = init ? init->encoder : cfg.model;
  HeadConfig cls{HeadKind::classification, "cls", {}, cfg.num_classes, false};
  auto net = std::make_shared<Network<float>>(enc, std::vector<HeadConfig>{cls},
                                              cfg.seed);
  if (init) net->load(init->arrays_with_prefix("student."), /*backbone_only=*/true);

  typename AdamW<float>::Hyper hyper;
  hyper.weight_decay = cfg.weight_decay;
  AdamW<float> opt(hyper);
  detail::ParamGroup<float> group{net->param_sets()};

  const std::size_t steps_per_epoch =
      detail::make_batches(train.size(), cfg.batch_size, 1,
                           RngStream::derived(cfg.seed, "shuffle", 0))
          .size();
  LrSchedule sched{cfg.lr,
                   static_cast<std::size_t>(cfg.warmup_frac *
                                            static_cast<double>(steps_per_epoch * cfg.epochs)),
                   steps_per_epoch * static_cast<std::size_t>(cfg.epochs),
                   0.0, true};
  std::function<bool(const std::string&)> filter = nullptr;
  if (cfg.freeze_backbone)
    filter = [](const std::string& n) { return n.rfind("head.", 0) == 0; };

  auto val_accuracy = [&]() {
    if (val.images.empty()) return -1.0;
    std::vector<int> preds = predict_classes(*net, "cls", val.images, cfg.aug);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i] == val.labels[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(preds.size());
  };

  TrainingLog log;
  Network<float>::NamedArrays best_params = net->snapshot();
  int best_epoch = -1;
  double best_acc = -2.0;
  long global_step = 0;
  using Clock = std::chrono::steady_clock;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = Clock::now();
    if (trace) trace(TraceEvent::epoch_start, epoch, -1);
    auto batches = detail::make_batches(train.size(), cfg.batch_size, 1,
                                        RngStream::derived(cfg.seed, "shuffle", epoch));
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_acc = 0.0;
    for (const auto& batch : batches) {
      const double lr = sched.at(static_cast<std::size_t>(global_step));
      const std::size_t b = batch.size();
      std::vector<Image> views(b);
#pragma omp parallel for schedule(dynamic)
      for (long i = 0; i < static_cast<long>(b); ++i) {
        const std::size_t ii = static_cast<std::size_t>(i);
        views[ii] = make_supervised_view(
            train.images[batch[ii]], cfg.aug,
            RngStream::derived(cfg.seed, "aug.finetune", epoch, batch[ii]));
      }
      Tensor<float> in = stack_images(views);
      typename Network<float>::EmbedTrace tr;
      Tensor<float> emb = net->embed(in, tr);
      typename Head<float>::Trace htr;
      Tensor<float> logits = net->head("cls").forward(emb, htr);
      std::vector<int> lab(b);
      for (std::size_t i = 0; i < b; ++i) lab[i] = train.labels[batch[i]];
      auto lg = deepcluster_loss_with_grad(
          onehot_from_labels<float>(lab, cfg.num_classes), logits);
      group.zero_grads();
      Tensor<float> demb = net->head("cls").backward(htr, lg.grad);
      if (!cfg.freeze_backbone) net->backward_embed(tr, demb);
      opt.step(group, lr, filter);
      if (trace) trace(TraceEvent::student_update, epoch, global_step);
      loss_acc += static_cast<double>(lg.loss);
      log.step_loss.push_back(static_cast<double>(lg.loss));
      rec.lr_last = lr;
      ++global_step;
    }
    rec.loss_mean = batches.empty() ? 0.0 : loss_acc / static_cast<double>(batches.size());
    double acc = val_accuracy();
    if (acc >= 0.0) rec.extras["val_accuracy"] = acc;
    if (acc > best_acc) {
      best_acc = acc;
      best_epoch = epoch;
      best_params = net->snapshot();
    }
    rec.wall_s = std::chrono::duration<double>(Clock::now() - t0).count();
    log.epochs.push_back(rec);
    if (trace) trace(TraceEvent::epoch_end, epoch, -1);
  }

  FinetuneResult res;
  res.net = net;
  res.best_epoch = best_epoch;
  res.best_val_accuracy = best_acc < 0 ? -1.0 : best_acc;
  res.last_val_accuracy = val.images.empty() ? -1.0 : log.epochs.back().extras["val_accuracy"];
  res.log = log;

  Checkpoint c;
  c.method = "finetune";
  c.encoder = enc;
  c.epoch = static_cast<std::uint32_t>(cfg.epochs);
  c.seed = cfg.seed;
  c.metadata["heads"] = encode_head_configs({cls});
  c.metadata["num_classes"] = std::to_string(cfg.num_classes);
  c.metadata["init"] = init ? "checkpoint" : "random";
  c.metadata["best_epoch"] = std::to_string(best_epoch);
  {
    std::ostringstream os;
    os << std::setprecision(17) << res.best_val_accuracy;
    c.metadata["best_val_accuracy"] = os.str();
  }
  for (const auto& [name, value] : best_params)
    c.arrays.emplace_back("student." + name, value);
  c.config_digest = sha256(c.metadata["heads"] + "|" + arch_name(enc.arch));
  res.checkpoint = c;
  return res;
}

/// Rebuilds a network from a checkpoint produced by pretrain/finetune.
inline std::shared_ptr<Network<float>> network_from_checkpoint(const Checkpoint& c,
                                                               bool load_teacher = false) {
  std::vector<HeadConfig> heads;
  auto it = c.metadata.find("heads");
  if (it != c.metadata.end()) heads = decode_head_configs(it->second);
  auto net = std::make_shared<Network<float>>(c.encoder, heads, c.seed);
  net->load(c.arrays_with_prefix(load_teacher ? "teacher." : "student."));
  return net;
}

}  // namespace sslwb
