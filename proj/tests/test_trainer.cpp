#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <cstring>
#include <fstream>
#include <random>

#include <unistd.h>

#include "anet/evaluator.hpp"
#include "anet/trainer.hpp"
#include "test_util.hpp"

namespace anet {
namespace {

namespace fs = std::filesystem;

// ---- amsgrad ----------------------------------------------------------------

Parameter<double> make_param(const std::vector<double>& values) {
  Parameter<double> p;
  p.name = "w";
  p.value = Tensor<double>({static_cast<Index>(values.size())});
  for (std::size_t i = 0; i < values.size(); ++i) p.value[static_cast<Index>(i)] = values[i];
  p.zero_grad();
  return p;
}

void set_grad(Parameter<double>& p, const std::vector<double>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) p.grad[static_cast<Index>(i)] = g[i];
  p.has_grad = true;
}

TEST(Amsgrad, FirstStepMatchesClosedForm) {
  const AmsgradOptions o;
  const double lr = 0.01;
  const std::vector<double> g{0.3, -2.0, 1e-3};
  Parameter<double> p = make_param({1.0, 1.0, 1.0});
  MomentState<double> s;
  set_grad(p, g);
  amsgrad_step(p, s, lr, o);
  for (std::size_t i = 0; i < g.size(); ++i) {
    // m_hat = g and sqrt(v_hat) = |g| after one step from zero moments.
    const double want = 1.0 - lr * g[i] / (std::abs(g[i]) + o.eps);
    EXPECT_NEAR(p.value[static_cast<Index>(i)], want, 1e-15);
    EXPECT_NEAR(1.0 - p.value[static_cast<Index>(i)], std::copysign(lr, g[i]), lr * 1e-4);
  }
  EXPECT_EQ(s.step, 1);
}

TEST(Amsgrad, ZeroGradientLeavesParameters) {
  Parameter<double> p = make_param({0.5, -0.25});
  MomentState<double> s;
  for (int t = 0; t < 20; ++t) {
    set_grad(p, {0.0, 0.0});
    amsgrad_step(p, s, 0.1, {});
  }
  EXPECT_EQ(p.value[0], 0.5);
  EXPECT_EQ(p.value[1], -0.25);
}

TEST(Amsgrad, SecondMomentMaxNeverDecreases) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  Parameter<double> p = make_param({0, 0, 0, 0});
  MomentState<double> s;
  Tensor<double> prev = Tensor<double>::zeros({4});
  for (int t = 0; t < 200; ++t) {
    // Shrinking gradients make v fall while vmax must hold.
    const double scale = 10.0 / (1 + t);
    set_grad(p, {scale * normal(rng), scale * normal(rng), scale * normal(rng), scale * normal(rng)});
    amsgrad_step(p, s, 0.01, {});
    for (Index i = 0; i < 4; ++i) {
      EXPECT_GE(s.vmax[i], prev[i]);
      EXPECT_GE(s.vmax[i], s.v[i]);
    }
    prev = s.vmax;
  }
}

TEST(Amsgrad, SkipsFrozenAndGradlessParameters) {
  Parameter<double> frozen = make_param({1.0});
  frozen.trainable = false;
  set_grad(frozen, {1.0});
  Parameter<double> idle = make_param({2.0});
  Amsgrad<double> opt;
  opt.step({&frozen, &idle}, 0.1);
  EXPECT_EQ(frozen.value[0], 1.0);
  EXPECT_EQ(idle.value[0], 2.0);
  EXPECT_TRUE(opt.state().empty());
}

// ---- schedule ---------------------------------------------------------------

TEST(Schedule, StepDecayAtBoundaries) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 6e-4);
  EXPECT_DOUBLE_EQ(learning_rate(c, 59), 6e-4);
  EXPECT_NEAR(learning_rate(c, 60), 6e-5, 1e-18);
  EXPECT_NEAR(learning_rate(c, 119), 6e-5, 1e-18);
  EXPECT_NEAR(learning_rate(c, 120), 6e-6, 1e-18);
  EXPECT_NEAR(learning_rate(c, 150), 6e-7, 1e-18);
  EXPECT_NEAR(learning_rate(c, 209), 6e-7, 1e-18);
}

TEST(Schedule, StagesAndObjectives) {
  TrainConfig c;
  c.variant = Variant::kANet;
  EXPECT_EQ(stage_of(c, 149), 1);
  EXPECT_EQ(stage_of(c, 150), 2);
  EXPECT_EQ(objective_for(c, 1), Objective::kFull);
  EXPECT_EQ(objective_for(c, 2), Objective::kStage2);
  c.variant = Variant::kANetNoAc;
  EXPECT_EQ(stage_of(c, 200), 1);
  c.no_ac_two_stage = true;
  EXPECT_EQ(stage_of(c, 200), 2);
  EXPECT_EQ(objective_for(c, 2), Objective::kStage2NoAc);
  c.variant = Variant::kBaseline;
  EXPECT_EQ(stage_of(c, 200), 1);
  EXPECT_EQ(objective_for(c, 1), Objective::kBaseline);
  c.variant = Variant::kVan;
  EXPECT_EQ(objective_for(c, 1), Objective::kVan);
}

TEST(Schedule, InvalidConfigsRejected) {
  TrainConfig c;
  c.stage1_epochs = 300;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.stage1_epochs = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.p = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

// ---- training ---------------------------------------------------------------

Dataset train_data(int ids = 6, int per_id = 4, std::uint64_t seed = 5) {
  SyntheticSpec spec;
  spec.id_count = ids;
  spec.images_per_id = per_id;
  spec.image_size = 16;
  spec.seed = seed;
  return gen_synthetic(spec);
}

ModelConfig small_model(Variant v = Variant::kANet) {
  ModelConfig cfg;
  cfg.backbone.stage_channels = {4, 4, 8};
  cfg.backbone.image_size = 16;
  cfg.variant = v;
  cfg.s_f = 8;
  cfg.s_a = 4;
  cfg.s_j = 8;
  cfg.se_reduction = 4;
  cfg.cbam_reduction = 4;
  cfg.cbam_kernel = 3;
  return cfg;
}

TrainConfig small_train(Variant v, int epochs, int stage1) {
  TrainConfig c;
  c.variant = v;
  c.epochs_total = epochs;
  c.stage1_epochs = stage1;
  c.decay_epochs = {};
  c.lr = 3e-3;
  c.p = 3;
  c.k = 2;
  c.steps_per_epoch = 2;
  c.seed = 17;
  return c;
}

std::vector<double> loss_stream(const Dataset& ds, Variant v, int steps) {
  Trainer t(ds, small_model(v), small_train(v, 3, 2));
  std::vector<double> out;
  for (int s = 0; s < steps; ++s) out.push_back(t.step(0, s, s).report.total);
  return out;
}

TEST(Trainer, SameSeedSameFirstSteps) {
  const Dataset ds = train_data();
  for (Variant v : {Variant::kBaseline, Variant::kANet}) {
    const auto a = loss_stream(ds, v, 5), b = loss_stream(ds, v, 5);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(a[i], b[i], 1e-12) << variant_name(v) << " step " << i;
  }
}

TEST(Trainer, PureStageOneNeverEvaluatesAc) {
  const Dataset ds = train_data();
  Trainer t(ds, small_model(), small_train(Variant::kANet, 2, 2));
  int steps = 0;
  t.run({[&](const StepRecord& r) {
    ++steps;
    EXPECT_EQ(r.report.stage, 1);
    EXPECT_FALSE(r.report.ac_id);
    EXPECT_FALSE(r.report.ac_tri);
    EXPECT_TRUE(r.report.tri_f && r.report.id_f);
  }});
  EXPECT_EQ(steps, 4);
}

TEST(Trainer, StageBoundarySwitchesTerms) {
  const Dataset ds = train_data();
  Trainer t(ds, small_model(), small_train(Variant::kANet, 3, 2));
  t.run({[&](const StepRecord& r) {
    if (r.epoch < 2) {
      EXPECT_FALSE(r.report.ac_id || r.report.ac_tri);
    } else {
      EXPECT_FALSE(r.report.tri_f || r.report.id_f);
      ASSERT_TRUE(r.report.ac_id && r.report.ac_tri);
      EXPECT_GT(*r.report.ac_id, 0.0);
      EXPECT_GT(*r.report.ac_tri, 0.0);
    }
  }});
}

std::map<std::string, Tensor<float>> snapshot(Model<float>& m, Partition part) {
  std::map<std::string, Tensor<float>> out;
  for (const auto* p : m.store().parameters(part)) out[p->name] = p->value;
  return out;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

TEST(Trainer, StageTwoFreezesBackboneExactly) {
  const Dataset ds = train_data();
  Trainer t(ds, small_model(), small_train(Variant::kANet, 3, 2));
  t.run_epoch();
  t.run_epoch();
  const auto backbone = snapshot(t.model(), Partition::kBackbone);
  const auto joint = snapshot(t.model(), Partition::kJointModule);
  std::map<std::string, Tensor<float>> stats;
  for (const auto& b : t.model().store().buffers()) stats[b.name] = b.stats.mean;
  const auto moments_before = t.optimizer().state();

  t.run_epoch();
  for (const auto* p : t.model().store().parameters(Partition::kBackbone)) {
    EXPECT_FALSE(p->trainable);
    EXPECT_TRUE(same_bits(p->value, backbone.at(p->name))) << p->name;
    const auto& before = moments_before.at(p->name);
    const auto& after = t.optimizer().state().at(p->name);
    EXPECT_EQ(before.step, after.step);
    EXPECT_TRUE(same_bits(before.m, after.m) && same_bits(before.vmax, after.vmax)) << p->name;
  }
  for (const auto& b : t.model().store().buffers()) {
    if (b.name.rfind("backbone.", 0) == 0) EXPECT_TRUE(same_bits(b.stats.mean, stats.at(b.name))) << b.name;
  }
  int changed = 0;
  for (const auto* p : t.model().store().parameters(Partition::kJointModule)) {
    changed += !same_bits(p->value, joint.at(p->name));
  }
  EXPECT_GT(changed, 0);
}

TEST(Trainer, StageOneLossFalls) {
  const Dataset ds = train_data(6, 4);
  TrainConfig c = small_train(Variant::kVan, 30, 30);
  Trainer t(ds, small_model(Variant::kVan), c);
  std::vector<double> per_epoch(30, 0.0);
  t.run({[&](const StepRecord& r) { per_epoch[static_cast<std::size_t>(r.epoch)] += r.report.total; }});
  double first = 0.0, last = 0.0;
  for (int e = 0; e < 10; ++e) {
    first += per_epoch[static_cast<std::size_t>(e)];
    last += per_epoch[static_cast<std::size_t>(20 + e)];
  }
  EXPECT_LT(last, first);
}

TEST(Trainer, RejectsSingleIdentityAndOversizedP) {
  const Dataset one = train_data(1, 4);
  EXPECT_THROW(Trainer(one, small_model(), small_train(Variant::kANet, 2, 1)), std::invalid_argument);
  const Dataset two = train_data(2, 4);
  EXPECT_THROW(Trainer(two, small_model(), small_train(Variant::kANet, 2, 1)), std::invalid_argument);
}

TEST(Trainer, StepRecordIsOneJsonLine) {
  const Dataset ds = train_data();
  Trainer t(ds, small_model(), small_train(Variant::kANet, 3, 2));
  const std::string line = step_record_json(t.step(0, 0, 0));
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_NE(line.find("\"objective\":\"L\""), std::string::npos) << line;
}

// ---- checkpoints ------------------------------------------------------------

fs::path temp_path(const std::string& stem) {
  return fs::temp_directory_path() / (stem + "_" + std::to_string(::getpid()) + ".ckpt");
}

Tensor<float> forward_f(Model<float>& m, const Dataset& ds) {
  std::vector<const Image*> images;
  for (const auto& s : ds.samples) images.push_back(&s.image);
  ForwardOptions o;
  o.train = false;
  o.update_stats = false;
  Graph<float> g;
  return m.select(m.forward(g, stack_images(images), o), Selector::kJ).value();
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const Dataset ds = train_data();
  Trainer t(ds, small_model(), small_train(Variant::kANet, 3, 2));
  t.run_epoch();
  const fs::path path = temp_path("roundtrip");
  t.save(path);

  Trainer fresh(ds, small_model(), small_train(Variant::kANet, 3, 2));
  fresh.resume(path);
  EXPECT_EQ(fresh.epoch(), 1);
  EXPECT_EQ(fresh.rng_state(), t.rng_state());
  EXPECT_TRUE(same_bits(forward_f(fresh.model(), ds), forward_f(t.model(), ds)));

  // Both continue identically.
  const StepRecord a = t.step(1, 0, 2), b = fresh.step(1, 0, 2);
  EXPECT_EQ(a.report.total, b.report.total);

  const fs::path again = temp_path("roundtrip2");
  fresh.save(again);
  t.save(path);
  std::ifstream fa(path, std::ios::binary), fb(again, std::ios::binary);
  const std::string ba((std::istreambuf_iterator<char>(fa)), {}), bb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(ba, bb);
  fs::remove(path);
  fs::remove(again);
}

TEST(Checkpoint, TruncatedFileLeavesModelUntouched) {
  const Dataset ds = train_data();
  Model<float> source(small_model());
  const fs::path path = temp_path("trunc");
  save_checkpoint(path, source);
  fs::resize_file(path, fs::file_size(path) / 2);

  ModelConfig other = small_model();
  other.init_seed = 42;
  Model<float> target(other);
  const Tensor<float> before = forward_f(target, ds);
  try {
    load_checkpoint(path, target);
    FAIL() << "expected rejection";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(same_bits(before, forward_f(target, ds)));
  fs::remove(path);
}

TEST(Checkpoint, DigestMismatchPrintsBothDigests) {
  Model<float> source(small_model());
  const fs::path path = temp_path("digest");
  save_checkpoint(path, source);
  ModelConfig other = small_model();
  other.s_j = 12;
  Model<float> target(other);
  try {
    load_checkpoint(path, target);
    FAIL() << "expected rejection";
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(digest_hex(config_digest(source.config()))), std::string::npos) << msg;
    EXPECT_NE(msg.find(digest_hex(config_digest(target.config()))), std::string::npos) << msg;
    EXPECT_NE(msg.find("joint.weight"), std::string::npos) << msg;
  }
  fs::remove(path);
}

TEST(Checkpoint, ShapeMismatchNamesFirstParameter) {
  Model<float> source(small_model());
  ModelConfig other = small_model();
  other.s_f = 10;
  Model<float> target(other);
  LoadOptions opts;
  opts.check_digest = false;
  Checkpoint c = capture_checkpoint(source, nullptr, 0, "");
  try {
    apply_checkpoint(c, target, nullptr, opts);
    FAIL() << "expected rejection";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter reid.weight"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, BadMagicRejected) {
  const fs::path path = temp_path("magic");
  std::ofstream(path) << "NOTACHECKPOINT";
  Model<float> m(small_model());
  EXPECT_THROW(load_checkpoint(path, m), CheckpointError);
  fs::remove(path);
}

TEST(Checkpoint, ExtractionIdenticalAfterReload) {
  const Dataset ds = train_data(4, 3);
  Trainer t(ds, small_model(), small_train(Variant::kANet, 3, 2));
  t.run_epoch();
  const fs::path path = temp_path("extract");
  t.save(path);
  ModelConfig cfg = t.model().config();
  cfg.init_seed = 1234;
  Model<float> reloaded(cfg);
  load_checkpoint(path, reloaded);
  for (Selector s : {Selector::kF, Selector::kJ, Selector::kFA}) {
    EXPECT_EQ(extract_features(ds, t.model(), s), extract_features(ds, reloaded, s));
  }
  fs::remove(path);
}

}  // namespace
}  // namespace anet
