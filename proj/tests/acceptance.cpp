// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>

#include <unistd.h>

#include "anet/experiment.hpp"
#include "anet/gradcheck_suite.hpp"
#include "retrieval_oracle.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace anet;

namespace {

int failures = 0;

void verdict(int id, bool pass, const std::string& title, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("criterion %2d: %s  %s | %s\n", id, pass ? "PASS" : "FAIL", title.c_str(), detail.c_str());
  std::fflush(stdout);
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path temp_file(const std::string& stem) {
  return fs::temp_directory_path() / (stem + "_" + std::to_string(::getpid()) + ".ckpt");
}

// ---- 1 ----------------------------------------------------------------------

void gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_primitive = 0.0, worst_composed = 0.0;
  bool ok = true;
  std::string worst_name;
  for (const auto& r : primitive_suite()) {
    ok = ok && r.passed && r.max_rel_error <= 1e-6;
    if (r.max_rel_error > worst_primitive) worst_primitive = r.max_rel_error, worst_name = r.name;
  }
  for (const auto& r : composed_suite()) {
    ok = ok && r.passed && r.max_rel_error <= 1e-4;
    worst_composed = std::max(worst_composed, r.max_rel_error);
  }
  const double secs = since(t0);
  verdict(1, ok && secs < 120.0, "gradient correctness",
          fmt("primitive max rel %.2e (%s) <= 1e-6, composed max rel %.2e <= 1e-4, %.1fs < 120s", worst_primitive,
              worst_name.c_str(), worst_composed, secs));
}

// ---- 2 ----------------------------------------------------------------------

void metric_oracle() {
  using namespace anet::test;
  Instance hand;
  hand.q = Eigen::MatrixXd::Zero(1, 1);
  hand.qid = {0};
  hand.qcam = {0};
  hand.g.resize(3, 1);
  hand.g << 0.1, 0.2, 0.3;
  hand.gid = {0, 1, 0};
  hand.gcam = {1, 1, 1};
  const double hand_ap = rank_and_score(query_of(hand), gallery_of(hand), true).map;
  bool ok = std::abs(hand_ap - 5.0 / 6.0) <= 1e-9;

  std::mt19937_64 rng(77);
  double worst = 0.0;
  int compared = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const bool filter = trial % 2 == 0;
    const Instance in = random_instance(rng, trial % 3 == 0);
    const OracleResult want = oracle(in, filter);
    if (want.ap.empty()) continue;
    const EvalReport got = rank_and_score(query_of(in), gallery_of(in), filter);
    if (got.per_query_ap.size() != want.ap.size() || got.cmc.size() != want.cmc.size()) {
      ok = false;
      continue;
    }
    double mean = 0.0;
    for (std::size_t i = 0; i < want.ap.size(); ++i) {
      worst = std::max(worst, std::abs(got.per_query_ap[i] - want.ap[i]));
      mean += want.ap[i] / want.ap.size();
    }
    worst = std::max(worst, std::abs(got.map - mean));
    for (std::size_t k = 0; k < want.cmc.size(); ++k) worst = std::max(worst, std::abs(got.cmc[k] - want.cmc[k]));
    ++compared;
  }
  ok = ok && worst <= 1e-9 && compared >= 900;
  verdict(2, ok, "metric oracle equivalence",
          fmt("hand case AP %.10f, %d/1000 random instances scored, max |diff| %.1e <= 1e-9", hand_ap, compared, worst));
}

// ---- 3, 4, 5, 8, 10 share the ablation run -----------------------------------

struct AnetRunChecks {
  bool ac_positive = true;
  int ac_steps = 0;
  std::vector<std::pair<double, double>> ac_first_last;  // per seed: first vs final stage-2 epoch mean AC_ID
  bool frozen_identical = true;
  int backbone_params = 0;
  int joint_changed = 0;
  bool stats_identical = true;
};

void directional(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const DataSplit split = load_split(cfg.data);
  const int stage1 = cfg.train.stage1_epochs;

  AnetRunChecks checks;
  std::map<std::string, Tensor<float>> at_stage1_end;
  std::map<std::string, Tensor<float>> stats_at_stage1_end;
  std::optional<Model<float>> kept;

  AblationObserver observer;
  observer.hooks = [&](Variant v, std::uint64_t) {
    TrainHooks h;
    if (v != Variant::kANet) return h;
    at_stage1_end.clear();
    stats_at_stage1_end.clear();
    h.on_epoch_end = [&](int epoch, Model<float>& m) {
      if (epoch != stage1 - 1) return;
      for (const auto* p : m.store().parameters()) at_stage1_end[p->name] = p->value;
      for (const auto& b : m.store().buffers()) stats_at_stage1_end[b.name] = b.stats.mean;
    };
    return h;
  };
  observer.finished = [&](Variant v, std::uint64_t seed, TrainOutcome& out) {
    if (v != Variant::kANet) return;
    std::map<int, std::pair<double, int>> ac_by_epoch;
    for (const auto& r : out.steps) {
      if (r.report.stage != 2) continue;
      ++checks.ac_steps;
      const bool pos = r.report.ac_id && r.report.ac_tri && *r.report.ac_id > 0.0 && *r.report.ac_tri > 0.0;
      checks.ac_positive = checks.ac_positive && pos;
      if (r.report.ac_id) {
        ac_by_epoch[r.epoch].first += *r.report.ac_id;
        ac_by_epoch[r.epoch].second += 1;
      }
    }
    if (!ac_by_epoch.empty()) {
      const auto& first = ac_by_epoch.begin()->second;
      const auto& last = ac_by_epoch.rbegin()->second;
      checks.ac_first_last.emplace_back(first.first / first.second, last.first / last.second);
    }
    for (auto* p : out.model.store().parameters()) {
      const auto it = at_stage1_end.find(p->name);
      if (it == at_stage1_end.end()) continue;
      if (p->partition == Partition::kBackbone) {
        ++checks.backbone_params;
        checks.frozen_identical = checks.frozen_identical && same_bits(p->value, it->second);
      } else if (p->partition == Partition::kJointModule) {
        checks.joint_changed += !same_bits(p->value, it->second);
      }
    }
    for (const auto& b : out.model.store().buffers()) {
      if (b.name.rfind("backbone.", 0) == 0)
        checks.stats_identical = checks.stats_identical && same_bits(b.stats.mean, stats_at_stage1_end.at(b.name));
    }
    if (seed == 1) kept.emplace(std::move(out.model));
  };

  const std::vector<Variant> variants{Variant::kBaseline, Variant::kVan, Variant::kANet};
  const AblationTable table = ablate(
      cfg, split, variants, {1, 2, 3},
      [&](Variant v, std::uint64_t seed, const std::string& status) {
        std::fprintf(stderr, "[%7.1fs] %s seed %llu: %s\n", since(t0), variant_name(v),
                     static_cast<unsigned long long>(seed), status.c_str());
      },
      observer);
  const double secs = since(t0);
  std::fputs(table.to_text().c_str(), stdout);

  auto med = [&](Variant v, Selector s) {
    const AblationRow* r = table.row(v);
    if (!r || !r->cells.count(s) || r->cells.at(s).map.size() != 3) return -1.0;
    return r->cells.at(s).median_map;
  };
  const double base = med(Variant::kBaseline, Selector::kF);
  const double van = med(Variant::kVan, Selector::kF);
  const double anet = med(Variant::kANet, Selector::kJ);
  const bool ok3 = base >= 0 && van >= 0 && anet >= 0 && anet - van >= -0.01 && van - base >= -0.01 && anet > base &&
                   secs < 45 * 60;
  verdict(3, ok3, "directional improvement",
          fmt("median mAP ANet(j) %.4f, VAN(f) %.4f, Baseline(f) %.4f; ANet-VAN %+.4f, VAN-Base %+.4f (>= -0.01), "
              "ANet>Base %s; %.0fs < 2700s",
              anet, van, base, anet - van, van - base, anet > base ? "yes" : "no", secs));

  bool falling = !checks.ac_first_last.empty();
  std::string ac_detail;
  for (const auto& [first, last] : checks.ac_first_last) {
    falling = falling && last < first;
    ac_detail += fmt("%.4f->%.4f ", first, last);
  }
  verdict(4, falling && checks.ac_positive && checks.ac_steps > 0, "amelioration constraint behaviour",
          "mean AC_ID first->final stage-2 epoch per seed: " + ac_detail +
              fmt("; AC_ID and AC_tri > 0 at all %d stage-2 steps: %s", checks.ac_steps,
                  checks.ac_positive ? "yes" : "no"));

  verdict(5, checks.frozen_identical && checks.stats_identical && checks.backbone_params > 0 && checks.joint_changed > 0,
          "freezing exactness",
          fmt("%d backbone parameters bitwise equal to stage-1 end: %s; running stats unchanged: %s; %d joint-module "
              "parameters changed",
              checks.backbone_params, checks.frozen_identical ? "yes" : "no", checks.stats_identical ? "yes" : "no",
              checks.joint_changed));

  // 8: vehicleid protocol on the held-out identities with the seed-1 ANet model.
  if (kept) {
    Dataset test = split.query;
    test.samples.insert(test.samples.end(), split.gallery.samples.begin(), split.gallery.samples.end());
    const EvalReport a = vehicleid_protocol(test, *kept, Selector::kJ, 10, 2024);
    const EvalReport b = vehicleid_protocol(test, *kept, Selector::kJ, 10, 2024);
    const bool ok8 = a.repeats == 10 && a.map_std && a.r1_std && a.r5_std && a.to_json() == b.to_json();
    verdict(8, ok8, "protocol fidelity",
            fmt("10 repeats: mAP %.4f +- %.4f, R1 %.4f +- %.4f, R5 %.4f +- %.4f; same seed reproduces report: %s",
                a.map, a.map_std.value_or(-1), a.r1, a.r1_std.value_or(-1), a.r5, a.r5_std.value_or(-1),
                a.to_json() == b.to_json() ? "yes" : "no"));

    // 10: checkpoint round trip on 100 random images.
    Dataset random_images;
    random_images.meta = split.train.meta;
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<float> px(0.f, 1.f);
    const Index side = cfg.data.synthetic.image_size;
    for (int i = 0; i < 100; ++i) {
      Sample s;
      s.identity = i;
      s.image = Image({3, side, side});
      for (Index k = 0; k < s.image.size(); ++k) s.image[k] = px(rng);
      random_images.samples.push_back(std::move(s));
    }
    const fs::path path = temp_file("acceptance_c10");
    bool ok10 = true;
    std::string detail;
    for (Selector s : {Selector::kF, Selector::kJ, Selector::kFA}) {
      const Eigen::MatrixXd before = extract_features(random_images, *kept, s);
      save_checkpoint(path, *kept);
      ModelConfig mc = kept->config();
      mc.init_seed = 999;
      Model<float> loaded(mc);
      load_checkpoint(path, loaded);
      const Eigen::MatrixXd after = extract_features(random_images, loaded, s);
      const bool same = before.size() == after.size() &&
                        std::memcmp(before.data(), after.data(), sizeof(double) * before.size()) == 0;
      ok10 = ok10 && same;
      detail += std::string(selector_name(s)) + (same ? " identical " : " DIFFERS ");
    }
    fs::remove(path);
    verdict(10, ok10, "checkpoint round trip", "save->load->extract on 100 random images: " + detail);
  } else {
    verdict(8, false, "protocol fidelity", "no trained ANet model available");
    verdict(10, false, "checkpoint round trip", "no trained ANet model available");
  }
}

// ---- 6 ----------------------------------------------------------------------

void masking(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.set("variant", "van");
  const DataSplit split = load_split(c.data);
  ModelConfig mc = c.model;
  mc.id_count = static_cast<int>(split.train.identities().size());
  mc.attribute_classes = split.train.meta.attribute_classes;
  Model<float> model(mc);

  std::map<int, int> class_of;
  for (int id : split.train.identities()) class_of.emplace(id, static_cast<int>(class_of.size()));
  std::vector<const Image*> images;
  BatchTargets targets;
  for (int i = 0; i < 16; ++i) {
    const Sample& s = split.train.samples[static_cast<std::size_t>(i * 3)];
    images.push_back(&s.image);
    targets.ids.push_back(class_of.at(s.identity));
    auto attrs = s.attributes;
    attrs[0] = std::nullopt;
    targets.attributes.push_back(attrs);
  }
  Graph<float> g;
  const LossOutput<float> loss =
      compute_loss(model.forward(g, stack_images(images), {}), targets, c.train.weights, Objective::kVan, 1);
  model.store().zero_grad();
  g.backward(loss.total);
  long zero = 0, total = 0;
  int branch0 = 0;
  bool others_move = false;
  for (const auto* p : model.store().parameters(Partition::kAttributeBranches)) {
    if (p->name.rfind("branch0.", 0) == 0) {
      ++branch0;
      for (Index i = 0; i < p->grad.size(); ++i, ++total) zero += p->grad[i] == 0.0f;
    } else {
      others_move = others_move || p->grad.vec().cwiseAbs().maxCoeff() > 0.0f;
    }
  }
  verdict(6, branch0 > 0 && zero == total && others_move, "masking exactness",
          fmt("VAN batch with attribute 0 absent: %ld/%ld branch-0 gradient elements exactly zero over %d parameters; "
              "branch 1 receives gradient: %s",
              zero, total, branch0, others_move ? "yes" : "no"));
}

// ---- 7 ----------------------------------------------------------------------

void determinism(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.set("variant", "anet");
  c.train.epochs_total = 3;
  c.train.stage1_epochs = 2;
  c.train.steps_per_epoch = 4;
  const DataSplit split = load_split(c.data);
  auto run = [&](const fs::path& path) {
    ModelConfig mc = c.model;
    mc.backbone.image_size = c.data.synthetic.image_size;
    Trainer t(split.train, mc, c.train);
    std::vector<double> totals;
    t.run({[&](const StepRecord& r) { totals.push_back(r.report.total); }});
    t.save(path);
    return totals;
  };
  const fs::path pa = temp_file("acceptance_c7a"), pb = temp_file("acceptance_c7b");
  const auto a = run(pa), b = run(pb);
  double worst = 0.0;
  for (std::size_t i = 0; i < 5 && i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  const bool bitwise = read_bytes(pa) == read_bytes(pb);
  fs::remove(pa);
  fs::remove(pb);
  verdict(7, a.size() >= 5 && worst <= 1e-12 && bitwise, "determinism",
          fmt("first 5 step losses max |diff| %.1e <= 1e-12; final checkpoints (%zu steps, through stage 2) bitwise "
              "equal: %s",
              worst, a.size(), bitwise ? "yes" : "no"));
}

// ---- 9 ----------------------------------------------------------------------

ModelConfig identity_config(Variant v) {
  ModelConfig cfg;
  cfg.backbone.stage_channels = {4, 4, 8};
  cfg.backbone.image_size = 16;
  cfg.variant = v;
  cfg.s_f = 6;
  cfg.s_a = 3;
  cfg.s_j = 5;
  cfg.se_reduction = 4;
  cfg.cbam_reduction = 4;
  cfg.cbam_kernel = 3;
  cfg.attribute_classes = {3, 2};
  cfg.id_count = 4;
  return cfg;
}

void structural() {
  using anet::test::random_tensor;
  // Compensation off.
  Model<double> anet(identity_config(Variant::kANet));
  for (auto* p : anet.store().parameters()) {
    if (p->name.rfind("joint.theta_g", 0) == 0 && p->name.find("weight") != std::string::npos) p->value.vec().setZero();
  }
  Graph<double> g;
  const auto out = anet.forward(g, random_tensor({3, 3, 16, 16}, 91, 0, 1), {});
  const auto& jm = *anet.joint_module();
  const auto head = linear(gap(out.F), g.constant(jm.weight->value), g.constant(jm.bias->value));
  const bool comp_off = out.J.value() == out.F.value() && out.j.value() == head.value();

  // Branch order.
  NormOptions norm;
  norm.update_stats = false;
  bool order = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto a = g.constant(random_tensor({2, 8, 2, 2}, 100 + seed));
    auto b = g.constant(random_tensor({2, 8, 2, 2}, 200 + seed));
    auto c = g.constant(random_tensor({2, 8, 2, 2}, 300 + seed));
    order = order && fuse_attributes(g, {a, b, c}, jm, norm).value() == fuse_attributes(g, {c, a, b}, jm, norm).value() &&
            fuse_attributes(g, {a, b}, jm, norm).value() == fuse_attributes(g, {b, a}, jm, norm).value();
  }

  // Attention variant bounds.
  Model<double> att(identity_config(Variant::kANetAtt));
  long inside = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor<double> F = random_tensor({2, 8, 2, 2}, 400 + seed, -2, 2);
    auto J = joint_feature_att(g, g.constant(F), g.constant(random_tensor({2, 8, 2, 2}, 500 + seed)),
                               *att.joint_module()->cbam);
    for (Index i = 0; i < F.size(); ++i, ++total) {
      const double j = J.value()[i], f = F[i];
      inside += std::abs(j) >= std::abs(f) && std::abs(j) <= 2.0 * std::abs(f) && j * f >= 0.0;
    }
  }
  verdict(9, comp_off && order && inside == total, "structural identities",
          fmt("zero distillation gives J == F and j == head(F) bitwise: %s; fusion order invariant bitwise: %s; "
              "attention J between 1x and 2x F: %ld/%ld elements",
              comp_off ? "yes" : "no", order ? "yes" : "no", inside, total));
}

}  // namespace

int main(int argc, char** argv) {
  const std::string config_path = argc > 1 ? argv[1] : ANET_ACCEPTANCE_CONFIG;
  const RunConfig cfg = load_config(config_path);
  cfg.validate();
  std::printf("acceptance config: %s\n", config_path.c_str());
  const auto t0 = std::chrono::steady_clock::now();
  gradients();
  metric_oracle();
  masking(cfg);
  determinism(cfg);
  structural();
  directional(cfg);
  std::printf("%d criteria failed; total %.0fs\n", failures, since(t0));
  return failures == 0 ? 0 : 1;
}
