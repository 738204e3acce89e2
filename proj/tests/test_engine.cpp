#include "sslwb/engine.hpp"

#include <gtest/gtest.h>

#include "sslwb/synthetic.hpp"
#include "test_util.hpp"

using namespace sslwb;

namespace {

struct Corpus {
  fs::path dir;
  DatasetManifest manifest;
};

/// Tiny 3-class corpus shared by the engine tests (generated once).
const Corpus& tiny_corpus() {
  static Corpus c = [] {
    Corpus out;
    out.dir = fs::temp_directory_path() / "sslwb_engine_corpus";
    fs::remove_all(out.dir);
    SyntheticCorpusSpec spec;
    spec.num_classes = 3;
    spec.per_class = 10;
    spec.image_size = 16;
    spec.seed = 40;
    out.manifest = generate_synthetic_corpus(spec, out.dir);
    out.manifest = split_dataset(out.manifest, SplitRatios{0.8, 0.1, 0.1}, 40);
    return out;
  }();
  return c;
}

PretrainConfig tiny_config(Method m, std::uint64_t seed = 7) {
  PretrainConfig cfg;
  cfg.method = m;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.warmup_frac = 0.0;
  cfg.weight_decay = 1e-4;
  cfg.seed = seed;
  cfg.threads = 2;
  cfg.model.arch = Arch::patch_transformer;
  cfg.model.depth = 1;
  cfg.model.width = 8;
  cfg.model.heads = 2;
  cfg.model.patch_size = 4;
  cfg.model.input_size = 16;
  cfg.model.mlp_ratio = 2;
  cfg.aug.out_size_global = 16;
  cfg.aug.out_size_local = 8;
  cfg.params.local_crops = 2;
  cfg.params.proj_hidden = 16;
  cfg.params.proj_dim = 8;
  cfg.params.dino_hidden = 16;
  cfg.params.proto_dim = 12;
  cfg.params.decoder_dim = 8;
  cfg.params.decoder_depth = 1;
  cfg.params.decoder_heads = 2;
  cfg.params.clusters = 4;
  return cfg;
}

struct TraceRecorder {
  std::vector<std::tuple<TraceEvent, int, long>> events;
  TraceSink sink() {
    return [this](TraceEvent e, int epoch, long step) {
      events.emplace_back(e, epoch, step);
    };
  }
  std::vector<TraceEvent> sequence() const {
    std::vector<TraceEvent> out;
    for (const auto& [e, ep, st] : events) out.push_back(e);
    return out;
  }
};

}  // namespace

TEST(PretrainValidation, RejectsInvalidCombinations) {
  PretrainConfig cfg = tiny_config(Method::mae);
  cfg.model.arch = Arch::conv_residual;
  EXPECT_THROW(cfg.validate(), ValidationError);

  cfg = tiny_config(Method::simclr);
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), ValidationError);

  cfg = tiny_config(Method::mae);
  cfg.params.mask_ratio = 1.0;  // no visible patch left
  EXPECT_THROW(cfg.validate(), ValidationError);

  cfg = tiny_config(Method::dino);
  cfg.batch_size = 1024;  // above the memory cap
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Pretrain, MixedRequiresLabeledManifest) {
  const Corpus& c = tiny_corpus();
  DatasetManifest unlabeled = c.manifest;
  for (auto& r : unlabeled.records) r.class_id = 0;
  PretrainConfig cfg = tiny_config(Method::mixed);
  cfg.epochs = 1;
  EXPECT_THROW(pretrain(cfg, unlabeled, c.dir), ValidationError);
  EXPECT_THROW(pretrain_mixed(tiny_config(Method::dino), unlabeled, c.dir),
               ValidationError);
}

TEST(Pretrain, MethodNoneEmitsImmediateCheckpoint) {
  const Corpus& c = tiny_corpus();
  PretrainConfig cfg = tiny_config(Method::none);
  auto out = pretrain(cfg, c.manifest, c.dir);
  EXPECT_EQ(out.checkpoint.epoch, 0u);
  EXPECT_EQ(out.checkpoint.method, "none");
  EXPECT_TRUE(out.log.epochs.empty());
  bool has_backbone = false;
  for (const auto& [n, t] : out.checkpoint.arrays)
    has_backbone |= n.rfind("student.backbone.", 0) == 0;
  EXPECT_TRUE(has_backbone);
}

TEST(Pretrain, TraceOrderPerMethodMatchesAlgorithms) {
  const Corpus& c = tiny_corpus();
  // per-step order: views -> loss -> update
  for (Method m : {Method::simclr, Method::mae, Method::supervised}) {
    TraceRecorder rec;
    PretrainConfig cfg = tiny_config(m);
    cfg.epochs = 1;
    pretrain(cfg, c.manifest, c.dir, rec.sink());
    auto seq = rec.sequence();
    ASSERT_GE(seq.size(), 5u);
    EXPECT_EQ(seq.front(), TraceEvent::epoch_start);
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      if (seq[i] == TraceEvent::batch_assembled) {
        EXPECT_EQ(seq[i + 1], TraceEvent::loss_computed);
      }
      if (seq[i] == TraceEvent::loss_computed) {
        EXPECT_EQ(seq[i + 1], TraceEvent::student_update);
      }
    }
  }

  // dino: EMA strictly after the student update, center update after EMA
  {
    TraceRecorder rec;
    PretrainConfig cfg = tiny_config(Method::dino);
    cfg.epochs = 1;
    pretrain(cfg, c.manifest, c.dir, rec.sink());
    auto seq = rec.sequence();
    int updates = 0, emas = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] == TraceEvent::student_update) {
        ++updates;
        ASSERT_LT(i + 2, seq.size());
        EXPECT_EQ(seq[i + 1], TraceEvent::ema_update);
        EXPECT_EQ(seq[i + 2], TraceEvent::center_update);
      }
      if (seq[i] == TraceEvent::ema_update) {
        ++emas;
        EXPECT_EQ(seq[i - 1], TraceEvent::student_update);
      }
    }
    EXPECT_GT(updates, 0);
    EXPECT_EQ(updates, emas);
  }

  // deepcluster: recluster exactly once per epoch, before any gradient step
  {
    TraceRecorder rec;
    PretrainConfig cfg = tiny_config(Method::deepcluster);
    cfg.epochs = 2;
    pretrain(cfg, c.manifest, c.dir, rec.sink());
    int epoch_starts = 0, reclusters = 0;
    bool saw_recluster_this_epoch = false;
    for (const auto& [e, epoch, step] : rec.events) {
      if (e == TraceEvent::epoch_start) {
        ++epoch_starts;
        saw_recluster_this_epoch = false;
      }
      if (e == TraceEvent::recluster) {
        ++reclusters;
        EXPECT_FALSE(saw_recluster_this_epoch);
        saw_recluster_this_epoch = true;
      }
      if (e == TraceEvent::student_update) {
        EXPECT_TRUE(saw_recluster_this_epoch);
      }
    }
    EXPECT_EQ(epoch_starts, 2);
    EXPECT_EQ(reclusters, 2);
  }
}

TEST(Pretrain, DeterministicRunsProduceIdenticalCheckpoints) {
  const Corpus& c = tiny_corpus();
  for (Method m : {Method::simclr, Method::dino}) {
    PretrainConfig cfg = tiny_config(m);
    cfg.epochs = 1;
    auto a = pretrain(cfg, c.manifest, c.dir);
    auto b = pretrain(cfg, c.manifest, c.dir);
    EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
    ASSERT_EQ(a.log.step_loss.size(), b.log.step_loss.size());
    for (std::size_t i = 0; i < a.log.step_loss.size(); ++i)
      EXPECT_EQ(a.log.step_loss[i], b.log.step_loss[i]);
  }
}

TEST(Pretrain, LabelPermutationLeavesSslCheckpointsBitEqual) {
  const Corpus& c = tiny_corpus();
  DatasetManifest permuted = c.manifest;
  for (auto& r : permuted.records) r.class_id = 1 + (r.class_id % 3);
  for (Method m : {Method::simclr, Method::dino, Method::mae, Method::deepcluster}) {
    PretrainConfig cfg = tiny_config(m);
    cfg.epochs = 1;
    auto a = pretrain(cfg, c.manifest, c.dir);
    auto b = pretrain(cfg, permuted, c.dir);
    EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint))
        << method_name(m);
  }
  // control: the supervised method must NOT be label-blind
  PretrainConfig cfg = tiny_config(Method::supervised);
  cfg.epochs = 1;
  auto a = pretrain(cfg, c.manifest, c.dir);
  auto b = pretrain(cfg, permuted, c.dir);
  EXPECT_NE(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
}

TEST(Pretrain, OptimizerDecreasesLossOverFiveEpochs) {
  const Corpus& c = tiny_corpus();
  for (Method m : {Method::simclr, Method::dino, Method::mae, Method::deepcluster,
                   Method::supervised, Method::mixed}) {
    PretrainConfig cfg = tiny_config(m);
    cfg.epochs = 5;
    cfg.lr = 3e-3;
    cfg.warmup_frac = 0.2;
    if (m == Method::dino || m == Method::mixed) {
      // sharp teacher distillation needs a fast-tracking teacher and a small
      // step size to descend at this scale
      cfg.lr = 1e-3;
      cfg.params.teacher_momentum = 0.9;
    }
    if (m == Method::deepcluster) {
      // the pseudolabel head restarts every epoch; a decaying schedule would
      // starve the later heads, so this smoke run holds the rate constant
      cfg.lr = 2e-2;
      cfg.min_lr_frac = 1.0;
      cfg.params.clusters = 3;
    }
    auto out = pretrain(cfg, c.manifest, c.dir);
    ASSERT_EQ(out.log.epochs.size(), 5u);
    EXPECT_LT(out.log.epochs.back().loss_mean, out.log.epochs.front().loss_mean)
        << method_name(m);
  }
}

TEST(Pretrain, TeacherFollowsEmaRecurrenceEndpoints) {
  const Corpus& c = tiny_corpus();
  // momentum 1: the teacher never moves, so no gradient can have reached it.
  PretrainConfig cfg = tiny_config(Method::dino);
  cfg.epochs = 2;
  cfg.params.teacher_momentum = 1.0;
  auto out = pretrain(cfg, c.manifest, c.dir);
  HeadConfig dino{HeadKind::projection, "dino", {cfg.params.dino_hidden},
                  cfg.params.proto_dim, true};
  Network<float> init(cfg.model, {dino}, cfg.seed);
  auto teacher_arrays = out.checkpoint.arrays_with_prefix("teacher.");
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [n, t] : teacher_arrays) by_name[n] = &t;
  init.for_each_param([&](const Param<float>& p) {
    ASSERT_TRUE(by_name.count(p.name)) << p.name;
    EXPECT_EQ(by_name[p.name]->data, p.value.data) << p.name;
  });

  // momentum 0: the teacher equals the student after every step.
  cfg.params.teacher_momentum = 0.0;
  auto out0 = pretrain(cfg, c.manifest, c.dir);
  std::map<std::string, const Tensor<float>*> sb;
  auto student_arrays = out0.checkpoint.arrays_with_prefix("student.");
  for (const auto& [n, t] : student_arrays) sb[n] = &t;
  for (const auto& [n, t] : out0.checkpoint.arrays_with_prefix("teacher.")) {
    if (n == "center") continue;
    ASSERT_TRUE(sb.count(n)) << n;
    EXPECT_EQ(sb[n]->data, t.data) << n;
  }
}

TEST(Pretrain, MixedLossDecomposesExactly) {
  const Corpus& c = tiny_corpus();
  PretrainConfig cfg = tiny_config(Method::mixed);
  cfg.epochs = 2;
  cfg.params.mixed = MixedWeights{0.45, 0.55};
  auto out = pretrain(cfg, c.manifest, c.dir);
  ASSERT_EQ(out.log.step_loss.size(), out.log.step_loss_supervised.size());
  ASSERT_EQ(out.log.step_loss.size(), out.log.step_loss_ssl.size());
  for (std::size_t i = 0; i < out.log.step_loss.size(); ++i) {
    double expect =
        0.45 * out.log.step_loss_supervised[i] + 0.55 * out.log.step_loss_ssl[i];
    EXPECT_NEAR(out.log.step_loss[i], expect, 1e-9);
  }
}

TEST(Pretrain, DegenerateMixedWeightsMatchPureTrajectories) {
  const Corpus& c = tiny_corpus();
  {
    PretrainConfig mixed = tiny_config(Method::mixed);
    mixed.params.mixed = MixedWeights{1.0, 0.0};
    auto pure = pretrain(tiny_config(Method::supervised), c.manifest, c.dir);
    auto mix = pretrain(mixed, c.manifest, c.dir);
    ASSERT_EQ(pure.log.step_loss.size(), mix.log.step_loss_supervised.size());
    for (std::size_t i = 0; i < pure.log.step_loss.size(); ++i)
      EXPECT_NEAR(mix.log.step_loss_supervised[i], pure.log.step_loss[i], 1e-6);
  }
  {
    PretrainConfig mixed = tiny_config(Method::mixed);
    mixed.params.mixed = MixedWeights{0.0, 1.0};
    auto pure = pretrain(tiny_config(Method::dino), c.manifest, c.dir);
    auto mix = pretrain(mixed, c.manifest, c.dir);
    ASSERT_EQ(pure.log.step_loss.size(), mix.log.step_loss_ssl.size());
    for (std::size_t i = 0; i < pure.log.step_loss.size(); ++i)
      EXPECT_NEAR(mix.log.step_loss_ssl[i], pure.log.step_loss[i], 1e-6);
  }
}

TEST(CheckpointIO, SaveLoadSaveIsByteIdentical) {
  const Corpus& c = tiny_corpus();
  PretrainConfig cfg = tiny_config(Method::dino);
  cfg.epochs = 1;
  auto out = pretrain(cfg, c.manifest, c.dir);
  fs::path p1 = c.dir / "ck1.ckpt", p2 = c.dir / "ck2.ckpt";
  save_checkpoint(out.checkpoint, p1);
  Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  EXPECT_EQ(read_text_file(p1), read_text_file(p2));
}

TEST(CheckpointIO, TruncationAndCorruptionAreRejected) {
  const Corpus& c = tiny_corpus();
  PretrainConfig cfg = tiny_config(Method::none);
  auto out = pretrain(cfg, c.manifest, c.dir);
  std::string bytes = serialize_checkpoint(out.checkpoint);
  fs::path p = c.dir / "trunc.ckpt";
  write_file_atomic(p, bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(p), EngineError);
  std::string corrupt = bytes;
  corrupt[bytes.size() / 2] = static_cast<char>(corrupt[bytes.size() / 2] ^ 0x40);
  write_file_atomic(p, corrupt);
  EXPECT_THROW(load_checkpoint(p), EngineError);
  write_file_atomic(p, "not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(p), EngineError);
}

TEST(CheckpointIO, ResumeContinuesTrajectoryExactly) {
  const Corpus& c = tiny_corpus();
  PretrainConfig cfg = tiny_config(Method::simclr);
  cfg.epochs = 4;
  cfg.checkpoint_interval = 2;  // drop a mid-run checkpoint to resume from
  fs::path out_path = c.dir / "resume.ckpt";
  auto full = pretrain(cfg, c.manifest, c.dir, {}, nullptr, out_path);

  Checkpoint midpoint = load_checkpoint(c.dir / "resume.ckpt.e2");
  EXPECT_EQ(midpoint.epoch, 2u);
  auto second = pretrain(cfg, c.manifest, c.dir, {}, &midpoint);

  // the resumed run covers epochs 2..3; its steps must equal the tail of the
  // uninterrupted run
  const std::size_t tail = second.log.step_loss.size();
  ASSERT_EQ(full.log.step_loss.size(), 2 * tail);
  for (std::size_t i = 0; i < tail; ++i)
    EXPECT_NEAR(second.log.step_loss[i], full.log.step_loss[tail + i], 1e-6);

  Checkpoint bad = midpoint;
  bad.config_digest[0] = static_cast<std::uint8_t>(bad.config_digest[0] ^ 1);
  EXPECT_THROW(pretrain(cfg, c.manifest, c.dir, {}, &bad), ValidationError);
}

TEST(Finetune, FreezeBackboneKeepsBackboneBitExact) {
  const Corpus& c = tiny_corpus();
  PretrainConfig pcfg = tiny_config(Method::dino);
  pcfg.epochs = 1;
  auto pre = pretrain(pcfg, c.manifest, c.dir);

  FinetuneConfig fcfg;
  fcfg.epochs = 2;
  fcfg.batch_size = 8;
  fcfg.num_classes = 3;
  fcfg.seed = 5;
  fcfg.freeze_backbone = true;
  fcfg.model = pcfg.model;
  fcfg.aug = pcfg.aug;
  auto res = finetune(fcfg, &pre.checkpoint, c.manifest, c.dir);

  auto before = pre.checkpoint.arrays_with_prefix("student.backbone.");
  auto after = res.net->snapshot_backbone();  // names "backbone.*", same order
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i)
    EXPECT_EQ(before[i].second.data, after[i].second.data) << after[i].first;
}

TEST(Finetune, UnfrozenBackboneActuallyMoves) {
  const Corpus& c = tiny_corpus();
  PretrainConfig pcfg = tiny_config(Method::dino);
  pcfg.epochs = 1;
  auto pre = pretrain(pcfg, c.manifest, c.dir);
  FinetuneConfig fcfg;
  fcfg.epochs = 1;
  fcfg.batch_size = 8;
  fcfg.num_classes = 3;
  fcfg.seed = 5;
  fcfg.model = pcfg.model;
  fcfg.aug = pcfg.aug;
  auto res = finetune(fcfg, &pre.checkpoint, c.manifest, c.dir);
  auto before = pre.checkpoint.arrays_with_prefix("student.backbone.");
  auto after = res.net->snapshot_backbone();
  bool changed = false;
  for (std::size_t i = 0; i < before.size(); ++i)
    changed |= before[i].second.data != after[i].second.data;
  EXPECT_TRUE(changed);
}

TEST(Finetune, LoadedBackboneIsBitIdenticalBeforeTraining) {
  const Corpus& c = tiny_corpus();
  PretrainConfig pcfg = tiny_config(Method::simclr);
  pcfg.epochs = 1;
  auto pre = pretrain(pcfg, c.manifest, c.dir);
  auto net = network_from_checkpoint(pre.checkpoint);
  auto snap = net->snapshot();
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [n, t] : snap) by_name[n] = &t;
  for (const auto& [n, t] : pre.checkpoint.arrays_with_prefix("student.")) {
    ASSERT_TRUE(by_name.count(n)) << n;
    EXPECT_EQ(by_name[n]->data, t.data) << n;
  }
}

TEST(Finetune, RandomInitBaselineRunsWithoutCheckpoint) {
  const Corpus& c = tiny_corpus();
  FinetuneConfig fcfg;
  fcfg.epochs = 1;
  fcfg.batch_size = 8;
  fcfg.num_classes = 3;
  fcfg.seed = 9;
  fcfg.model = tiny_config(Method::none).model;
  fcfg.aug = tiny_config(Method::none).aug;
  auto res = finetune(fcfg, nullptr, c.manifest, c.dir);
  EXPECT_EQ(res.checkpoint.metadata.at("init"), "random");
  EXPECT_EQ(res.net->head("cls").config().output_dim, 3u);
  EXPECT_FALSE(res.log.epochs.empty());
  EXPECT_GE(res.best_val_accuracy, 0.0);  // val split exists in the fixture
}

TEST(TrainingLogFormat, OneLinePerEpoch) {
  const Corpus& c = tiny_corpus();
  PretrainConfig cfg = tiny_config(Method::deepcluster);
  cfg.epochs = 2;
  auto out = pretrain(cfg, c.manifest, c.dir);
  std::string text = out.log.to_text();
  std::vector<std::string> lines = split(trim(text), '\n');
  ASSERT_EQ(lines.size(), 3u);  // header + one line per epoch
  EXPECT_EQ(lines[0], "sslwb-log\t1");
  EXPECT_NE(lines[1].find("reassigned_frac"), std::string::npos);
}
