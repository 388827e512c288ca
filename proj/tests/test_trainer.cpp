#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "eac/synth.hpp"
#include "eac/trainer.hpp"
#include "testutil.hpp"

namespace fs = std::filesystem;
using eac::Adam;
using eac::EacVariant;
using eac::ExperimentConfig;
using eac::ParamRef;
using eac::Tensor;
using eac::WeightDecayMode;

namespace {

/// 3x32x32 synthetic corpus on disk plus a config pointing at it.
struct CorpusFixture {
  fs::path dir;
  ExperimentConfig cfg;

  explicit CorpusFixture(const std::string& name) : dir(eactest::temp_dir(name)) {
    eac::SynthSpec train_spec;
    train_spec.count = 48;
    train_spec.classes = 4;
    train_spec.seed = 501;
    eac::SynthSpec test_spec = train_spec;
    test_spec.count = 16;
    test_spec.seed = 502;
    eac::write_cifar_binary(dir / "train.bin", eac::make_synthetic_dataset<float>(train_spec));
    eac::write_cifar_binary(dir / "test.bin", eac::make_synthetic_dataset<float>(test_spec));
    cfg.train_path = (dir / "train.bin").string();
    cfg.test_path = (dir / "test.bin").string();
    cfg.classes = 4;
    cfg.noise = {0.25, 77};
    cfg.backbone.stage_widths = {6, 8};
    cfg.batch_size = 16;
    cfg.epochs = 2;
    cfg.lambda = 2.0;
    cfg.checkpoint_every = 1;
    cfg.deterministic = true;
  }
};

bool params_bitwise_equal(eac::Model<float>& a, eac::Model<float>& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].name != pb[i].name || !(*pa[i].value == *pb[i].value)) return false;
  return true;
}

void expect_history_equal_modulo_timing(const eac::TrainHistory& a,
                                        const eac::TrainHistory& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].epoch, b[i].epoch);
    EXPECT_EQ(a[i].lr, b[i].lr);
    EXPECT_EQ(a[i].l_cls, b[i].l_cls);
    EXPECT_EQ(a[i].l_c, b[i].l_c);
    EXPECT_EQ(a[i].l_total, b[i].l_total);
    EXPECT_EQ(a[i].train_accuracy, b[i].train_accuracy);
    if (std::isnan(a[i].test_accuracy)) EXPECT_TRUE(std::isnan(b[i].test_accuracy));
    else EXPECT_EQ(a[i].test_accuracy, b[i].test_accuracy);
  }
}

} // namespace

TEST(LearningRate, ExponentialScheduleOracle) {
  EXPECT_DOUBLE_EQ(eac::lr_at(0, 2e-4, 0.9), 2e-4);
  EXPECT_DOUBLE_EQ(eac::lr_at(1, 2e-4, 0.9), 1.8e-4);
  EXPECT_DOUBLE_EQ(eac::lr_at(2, 2e-4, 0.9), 2e-4 * 0.9 * 0.9);
  EXPECT_DOUBLE_EQ(eac::lr_at(10, 3e-3, 1.0), 3e-3);
  EXPECT_THROW(eac::lr_at(-1, 2e-4, 0.9), eac::ContractError);
}

TEST(AdamStep, SingleScalarOracles) {
  // w=1, g=0.5, lr=0.1, first step
  {
    Tensor<double> w({1}, 1.0), g({1}, 0.5);
    Adam<double> adam({ParamRef<double>{"p", &w, &g}}, 0.1);
    adam.step();
    EXPECT_DOUBLE_EQ(w.flat(0), 0.9000000019999999);
    EXPECT_EQ(adam.steps(), 1);
  }
  { // coupled decay folds wd*w into the gradient
    Tensor<double> w({1}, 1.0), g({1}, 0.5);
    Adam<double> adam({ParamRef<double>{"p", &w, &g}}, 0.1, 0.01, WeightDecayMode::coupled);
    adam.step();
    EXPECT_DOUBLE_EQ(w.flat(0), 0.9000000019607842);
  }
  { // decoupled decay shrinks the weight directly
    Tensor<double> w({1}, 1.0), g({1}, 0.5);
    Adam<double> adam({ParamRef<double>{"p", &w, &g}}, 0.1, 0.01, WeightDecayMode::decoupled);
    adam.step();
    EXPECT_DOUBLE_EQ(w.flat(0), 0.8990000019999999);
  }
}

TEST(AdamStep, FirstStepMagnitudeIsLearningRate) {
  // with bias correction, step 1 moves by ~lr * sign(g) for any grad scale
  for (double g0 : {1e-6, 1.0, 1e6}) {
    Tensor<double> w({1}, 0.0), g({1}, g0);
    Adam<double> adam({ParamRef<double>{"p", &w, &g}}, 0.01);
    adam.step();
    EXPECT_NEAR(w.flat(0), -0.01, 1e-4) << "g=" << g0;
  }
}

TEST(AdamStep, ZeroGradLeavesWeightsAlone) {
  Tensor<double> w({2}, 3.0), g({2}, 0.0);
  Adam<double> adam({ParamRef<double>{"p", &w, &g}}, 0.1);
  adam.step();
  EXPECT_DOUBLE_EQ(w.flat(0), 3.0);
  EXPECT_DOUBLE_EQ(w.flat(1), 3.0);
}

TEST(AdamStep, StateRoundTripContinuesBitwise) {
  const fs::path dir = eactest::temp_dir("adam_state");
  Tensor<double> wa({3}), ga({3});
  Tensor<double> wb({3}), gb({3});
  for (std::size_t i = 0; i < 3; ++i) {
    wa.flat(i) = wb.flat(i) = 0.5 + static_cast<double>(i);
    ga.flat(i) = gb.flat(i) = 0.1 * static_cast<double>(i + 1);
  }
  Adam<double> a({ParamRef<double>{"p", &wa, &ga}}, 0.05, 0.01);
  a.step();
  a.step();
  { // persist optimizer state through the container
    std::vector<std::pair<std::string, const Tensor<double>*>> tensors;
    nlohmann::json meta;
    a.export_state(tensors, meta);
    eac::save_checkpoint<double>(dir / "s.eac", meta, tensors);
  }
  Adam<double> b({ParamRef<double>{"p", &wb, &gb}}, 0.05, 0.01);
  b.import_state(eac::load_checkpoint<double>(dir / "s.eac"));
  EXPECT_EQ(b.steps(), 2);
  for (std::size_t i = 0; i < 3; ++i) wb.flat(i) = wa.flat(i);
  a.step();
  b.step();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(wa.flat(i), wb.flat(i));
}

TEST(ExperimentConfigValidation, NamesTheOffendingField) {
  ExperimentConfig cfg;
  cfg.train_path = "x";
  cfg.test_path = "y";
  EXPECT_NO_THROW(cfg.validate());
  auto expect_mentions = [](ExperimentConfig bad, const std::string& field) {
    try {
      bad.validate();
      FAIL() << "expected ConfigError for " << field;
    } catch (const eac::ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  ExperimentConfig bad = cfg;
  bad.train_path.clear();
  expect_mentions(bad, "train_path");
  bad = cfg;
  bad.epochs = 0;
  expect_mentions(bad, "epochs");
  bad = cfg;
  bad.batch_size = 0;
  expect_mentions(bad, "batch_size");
  bad = cfg;
  bad.lr = 0.0;
  expect_mentions(bad, "lr");
  bad = cfg;
  bad.lr_gamma = 1.5;
  expect_mentions(bad, "lr_gamma");
  bad = cfg;
  bad.lambda = -1.0;
  expect_mentions(bad, "lambda");
  bad = cfg;
  bad.noise.rate = 2.0;
  expect_mentions(bad, "noise");
  bad = cfg;
  bad.flip_probability = -0.1;
  expect_mentions(bad, "flip_probability");
}

TEST(EpochRecordJson, RoundTripIncludingMissingEval) {
  eac::EpochRecord r;
  r.epoch = 4;
  r.lr = 1.5e-4;
  r.l_cls = 0.25;
  r.l_c = 0.0125;
  r.l_total = 0.3125;
  r.train_accuracy = 0.75;
  r.seconds = 1.25;
  const auto j = eac::to_json(r);
  EXPECT_TRUE(j.at("test_accuracy").is_null());
  const auto back = eac::epoch_record_from_json(j);
  EXPECT_EQ(back.epoch, 4);
  EXPECT_EQ(back.lr, r.lr);
  EXPECT_EQ(back.l_total, r.l_total);
  EXPECT_TRUE(std::isnan(back.test_accuracy));
  r.test_accuracy = 0.5;
  EXPECT_EQ(eac::epoch_record_from_json(eac::to_json(r)).test_accuracy, 0.5);
}

TEST(History, JsonlRoundTrip) {
  const fs::path dir = eactest::temp_dir("history");
  eac::TrainHistory h(3);
  for (int e = 0; e < 3; ++e) {
    h[e].epoch = e;
    h[e].lr = 1e-4;
    h[e].l_total = 1.0 / (e + 1);
    h[e].train_accuracy = 0.3 * e;
    if (e != 1) h[e].test_accuracy = 0.25 * e;
  }
  eac::save_history(dir / "h.jsonl", h);
  const auto back = eac::load_history(dir / "h.jsonl");
  expect_history_equal_modulo_timing(h, back);
  std::ofstream(dir / "bad.jsonl") << "{not json}\n";
  EXPECT_THROW(eac::load_history(dir / "bad.jsonl"), eac::DataError);
}

TEST(TrainingBatch, AugmentationKeyedBySampleNotPosition) {
  eac::SynthSpec spec;
  spec.count = 6;
  spec.classes = 3;
  spec.seed = 9;
  auto ds = eac::make_synthetic_dataset<float>(spec);
  eac::EraseSpec erase;
  const auto a = eac::make_training_batch(ds, {0, 1, 2, 3, 4, 5}, EacVariant::full,
                                          erase, 42, 7, 0.5);
  const auto b = eac::make_training_batch(ds, {5, 3}, EacVariant::full, erase, 42, 7, 0.5);
  const std::size_t px = std::size_t(ds.channels) * ds.height * ds.width;
  // sample 5 is element 5 of batch a and element 0 of batch b
  for (std::size_t i = 0; i < px; ++i) {
    EXPECT_EQ(b.images.flat(i), a.images.flat(5 * px + i));
    EXPECT_EQ(b.images.flat(px + i), a.images.flat(3 * px + i));
  }
  EXPECT_EQ(a.labels[5], b.labels[0]);
  EXPECT_EQ(a.ids[5], 5u);
}

TEST(TrainingBatch, FlippedTensorIsExactMirror) {
  eac::SynthSpec spec;
  spec.count = 4;
  spec.classes = 2;
  spec.seed = 10;
  auto ds = eac::make_synthetic_dataset<float>(spec);
  eac::EraseSpec erase;
  const auto batch =
      eac::make_training_batch(ds, {0, 1, 2, 3}, EacVariant::full, erase, 1, 0, 0.5);
  EXPECT_TRUE(batch.flipped == eac::horizontal_flip(batch.images));
  const auto baseline =
      eac::make_training_batch(ds, {0, 1, 2, 3}, EacVariant::baseline, erase, 1, 0, 0.5);
  EXPECT_TRUE(baseline.flipped.empty());
}

TEST(TrainingBatch, EraseVariesAcrossEpochsAndSkipsNoErasing) {
  eac::SynthSpec spec;
  spec.count = 2;
  spec.classes = 2;
  spec.seed = 11;
  auto ds = eac::make_synthetic_dataset<float>(spec);
  eac::EraseSpec erase;
  const auto e0 = eac::make_training_batch(ds, {0, 1}, EacVariant::full, erase, 3, 0, 0.5);
  const auto e0_again = eac::make_training_batch(ds, {0, 1}, EacVariant::full, erase, 3, 0, 0.5);
  const auto e1 = eac::make_training_batch(ds, {0, 1}, EacVariant::full, erase, 3, 1, 0.5);
  EXPECT_TRUE(e0.images == e0_again.images);
  EXPECT_FALSE(e0.images == e1.images);
  const auto plain =
      eac::make_training_batch(ds, {0, 1}, EacVariant::no_erasing, erase, 3, 0, 0.5);
  const std::size_t px = std::size_t(ds.channels) * ds.height * ds.width;
  for (std::size_t i = 0; i < px; ++i) {
    EXPECT_EQ(plain.images.flat(i), ds.samples[0].pixels.flat(i));
    EXPECT_EQ(plain.images.flat(px + i), ds.samples[1].pixels.flat(i));
  }
}

TEST(Evaluate, ArgmaxWithTiesToLowestIndex) {
  auto model = eactest::tiny_model();
  for (auto& p : model.backbone.parameters()) p.value->fill(0.0);
  model.head.weight().fill(0.0);
  model.head.bias().fill(0.0);
  eac::Dataset<double> ds;
  ds.classes = 3;
  ds.channels = 2;
  ds.height = ds.width = 6;
  for (std::size_t i = 0; i < 4; ++i) {
    eac::LabeledImage<double> s;
    s.id = i;
    s.pixels = Tensor<double>({2, 6, 6}, 0.3);
    s.true_label = static_cast<int>(i % 3);
    s.given_label = s.true_label;
    ds.samples.push_back(std::move(s));
  }
  // all-zero logits: every prediction ties -> class 0; truths are 0,1,2,0
  EXPECT_DOUBLE_EQ(eac::evaluate(model, ds), 0.5);
  model.head.bias().flat(1) = 1.0; // now always predicts class 1
  EXPECT_DOUBLE_EQ(eac::evaluate(model, ds), 0.25);
  // batching must not change the verdict
  EXPECT_DOUBLE_EQ(eac::evaluate(model, ds, 2), 0.25);
  EXPECT_DOUBLE_EQ(eac::evaluate(model, ds, 3), 0.25);
}

TEST(ModelCheckpoint, ArchitectureTravelsWithWeights) {
  const fs::path dir = eactest::temp_dir("model_ckpt");
  auto model = eactest::tiny_model(21);
  nlohmann::json meta{{"epoch_next", 3}};
  eac::save_model_checkpoint(dir / "m.eac", model, meta);
  auto loaded = eac::load_model_checkpoint<double>(dir / "m.eac");
  EXPECT_EQ(loaded.head.classes(), 3);
  EXPECT_EQ(loaded.backbone.config().stage_widths, (std::vector<int>{3, 4}));
  eac::Rng rng(5);
  Tensor<double> probe({2, 2, 6, 6});
  eactest::fill_uniform(probe, rng, 0.0, 1.0);
  auto [p1, l1] = eac::pool_and_logits(model.head, model.backbone.forward(probe));
  auto [p2, l2] = eac::pool_and_logits(loaded.head, loaded.backbone.forward(probe));
  EXPECT_TRUE(l1 == l2); // bitwise
}

TEST(ModelCheckpoint, OptimizerStateIsOptional) {
  const fs::path dir = eactest::temp_dir("opt_ckpt");
  auto model = eactest::tiny_model(22);
  eac::Adam<double> adam(model.parameters(), 1e-3);
  for (auto& p : model.parameters()) p.grad->fill(0.01);
  adam.step();
  eac::save_model_checkpoint<double>(dir / "with.eac", model, {}, &adam);
  eac::save_model_checkpoint<double>(dir / "without.eac", model, {});
  const auto with = eac::load_checkpoint<double>(dir / "with.eac");
  EXPECT_EQ(with.meta.at("adam_step").get<int>(), 1);
  EXPECT_NO_THROW(with.tensor("adam.m.head.weight"));
  const auto without = eac::load_checkpoint<double>(dir / "without.eac");
  EXPECT_THROW(without.tensor("adam.m.head.weight"), eac::IoError);
}

TEST(Fit, ProducesHistoryManifestAndCheckpoints) {
  CorpusFixture fx("fit_basic");
  eac::FitOptions opts;
  opts.out_dir = fx.dir / "run";
  const auto result = eac::fit<float>(fx.cfg, opts);
  ASSERT_EQ(result.history.size(), 2u);
  EXPECT_EQ(result.history[0].epoch, 0);
  EXPECT_EQ(result.history[1].epoch, 1);
  EXPECT_DOUBLE_EQ(result.history[0].lr, 2e-4);
  EXPECT_DOUBLE_EQ(result.history[1].lr, 1.8e-4);
  EXPECT_FALSE(std::isnan(result.history[1].test_accuracy));
  EXPECT_EQ(result.manifest.rows.size(), 12u); // 48 * 0.25
  EXPECT_TRUE(fs::exists(opts.out_dir / "noise_manifest.csv"));
  EXPECT_TRUE(fs::exists(opts.out_dir / "history.jsonl"));
  EXPECT_TRUE(fs::exists(opts.out_dir / "checkpoint_latest.eac"));
  EXPECT_TRUE(fs::exists(opts.out_dir / "checkpoint_final.eac"));
  const auto disk_history = eac::load_history(opts.out_dir / "history.jsonl");
  expect_history_equal_modulo_timing(result.history, disk_history);
  const auto disk_manifest = eac::load_manifest(opts.out_dir / "noise_manifest.csv");
  EXPECT_TRUE(disk_manifest == result.manifest);
}

TEST(Fit, FinalCheckpointReproducesModelBitwise) {
  CorpusFixture fx("fit_ckpt");
  eac::FitOptions opts;
  opts.out_dir = fx.dir / "run";
  auto result = eac::fit<float>(fx.cfg, opts);
  auto loaded = eac::load_model_checkpoint<float>(opts.out_dir / "checkpoint_final.eac");
  EXPECT_TRUE(params_bitwise_equal(result.model, loaded));
  eac::Rng rng(3);
  Tensor<float> probe({2, 3, 32, 32});
  eactest::fill_uniform(probe, rng, 0.0, 1.0);
  auto [pa, la] = eac::pool_and_logits(result.model.head, result.model.backbone.forward(probe));
  auto [pb, lb] = eac::pool_and_logits(loaded.head, loaded.backbone.forward(probe));
  EXPECT_TRUE(la == lb);
}

TEST(Fit, RepeatRunsAreBitwiseIdentical) {
  CorpusFixture fx("fit_repeat");
  eac::FitOptions oa, ob;
  oa.out_dir = fx.dir / "a";
  ob.out_dir = fx.dir / "b";
  auto ra = eac::fit<float>(fx.cfg, oa);
  auto rb = eac::fit<float>(fx.cfg, ob);
  EXPECT_TRUE(params_bitwise_equal(ra.model, rb.model));
  expect_history_equal_modulo_timing(ra.history, rb.history);
  EXPECT_TRUE(ra.manifest == rb.manifest);
}

TEST(Fit, SeedsChangeTheRun) {
  CorpusFixture fx("fit_seeds");
  fx.cfg.epochs = 1;
  eac::FitOptions opts;
  auto base = eac::fit<float>(fx.cfg, opts);
  auto cfg2 = fx.cfg;
  cfg2.model_seed += 1;
  auto other = eac::fit<float>(cfg2, opts);
  EXPECT_FALSE(params_bitwise_equal(base.model, other.model));
  auto cfg3 = fx.cfg;
  cfg3.noise.seed += 1;
  auto third = eac::fit<float>(cfg3, opts);
  EXPECT_FALSE(base.manifest == third.manifest);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
  CorpusFixture fx("fit_resume");
  fx.cfg.epochs = 3;
  eac::FitOptions straight;
  straight.out_dir = fx.dir / "straight";
  const auto full = eac::fit<float>(fx.cfg, straight);

  auto head_cfg = fx.cfg;
  head_cfg.epochs = 2;
  eac::FitOptions part;
  part.out_dir = fx.dir / "resumed";
  eac::fit<float>(head_cfg, part);
  part.resume = true;
  std::ostringstream log;
  part.log = &log;
  const auto resumed = eac::fit<float>(fx.cfg, part);

  EXPECT_NE(log.str().find("resuming at epoch 2"), std::string::npos);
  auto full_model = full.model;
  auto resumed_model = resumed.model;
  EXPECT_TRUE(params_bitwise_equal(full_model, resumed_model));
  expect_history_equal_modulo_timing(full.history, resumed.history);
  const auto disk = eac::load_history(part.out_dir / "history.jsonl");
  expect_history_equal_modulo_timing(resumed.history, disk);
}

TEST(Fit, ResumeWithEverythingDoneRunsNoEpochs) {
  CorpusFixture fx("fit_done");
  fx.cfg.epochs = 1;
  eac::FitOptions opts;
  opts.out_dir = fx.dir / "run";
  const auto first = eac::fit<float>(fx.cfg, opts);
  opts.resume = true;
  const auto again = eac::fit<float>(fx.cfg, opts);
  auto a = first.model, b = again.model;
  EXPECT_TRUE(params_bitwise_equal(a, b));
  EXPECT_EQ(again.history.size(), 1u);
}

TEST(Fit, BaselineVariantTrains) {
  CorpusFixture fx("fit_baseline");
  fx.cfg.variant = EacVariant::baseline;
  fx.cfg.epochs = 1;
  const auto result = eac::fit<float>(fx.cfg, {});
  ASSERT_EQ(result.history.size(), 1u);
  EXPECT_EQ(result.history[0].l_c, 0.0);
  EXPECT_EQ(result.history[0].l_total, result.history[0].l_cls);
}

TEST(Fit, RejectsMismatchedDatasets) {
  CorpusFixture fx("fit_mismatch");
  fx.cfg.test_path = fx.cfg.train_path; // fine: same dims
  EXPECT_NO_THROW(eac::fit<float>(fx.cfg, {}));
  fx.cfg.epochs = 0;
  EXPECT_THROW(eac::fit<float>(fx.cfg, {}), eac::ConfigError);
}
