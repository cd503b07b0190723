#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "anet/gradcheck.hpp"
#include "anet/losses.hpp"
#include "test_util.hpp"

namespace anet {
namespace {

using test::random_tensor;
using D = double;

// ---- oracles ---------------------------------------------------------------

double smoothed_ce_oracle(const std::vector<double>& z, int target, double eps) {
  const double m = static_cast<double>(z.size());
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double norm = 0;
  for (double v : z) norm += std::exp(v - mx);
  double loss = 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double q = (static_cast<int>(k) == target ? 1.0 - eps : 0.0) + eps / m;
    loss -= q * (z[k] - mx - std::log(norm));
  }
  return loss;
}

double dist(const Tensor<D>& x, Index a, Index b) {
  double s = 0;
  for (Index c = 0; c < x.dim(1); ++c) s += std::pow(x.at(a, c) - x.at(b, c), 2);
  return std::sqrt(std::max(s, 1e-12));
}

// Enumerates every (anchor, positive, negative) triple and keeps the largest
// hinge per anchor. `same(a, b)` decides positives; `valid(a)` gates anchors.
template <typename Same, typename Valid>
double triplet_oracle(const Tensor<D>& x, double margin, Same same, Valid valid, bool self_positive) {
  const Index n = x.dim(0);
  double total = 0;
  int anchors = 0;
  for (Index a = 0; a < n; ++a) {
    if (!valid(a)) continue;
    double worst = -1;
    for (Index p = 0; p < n; ++p) {
      if (!valid(p) || !same(a, p) || (p == a && !self_positive)) continue;
      for (Index q = 0; q < n; ++q) {
        if (!valid(q) || same(a, q)) continue;
        const double dp = p == a ? 1e-6 : dist(x, a, p);
        worst = std::max(worst, std::max(0.0, margin + dp - dist(x, a, q)));
      }
    }
    if (worst < 0) continue;
    total += worst;
    ++anchors;
  }
  return anchors ? total / anchors : 0.0;
}

Tensor<D> points(std::initializer_list<std::pair<double, double>> xy) {
  Tensor<D> t({static_cast<Index>(xy.size()), 2});
  Index i = 0;
  for (auto [x, y] : xy) {
    t.at(i, 0) = x;
    t.at(i, 1) = y;
    ++i;
  }
  return t;
}

// ---- label-smoothed CE -----------------------------------------------------

TEST(CeLabelSmooth, UniformLogitsGiveLogM) {
  for (double eps : {0.0, 0.1, 0.5}) {
    Graph<D> g;
    auto loss = ce_label_smooth(g.constant(Tensor<D>::constant({1, 7}, 0.3)), {2}, eps);
    EXPECT_NEAR(loss.value().item(), std::log(7.0), 1e-12);
  }
}

TEST(CeLabelSmooth, ZeroEpsilonIsPlainCrossEntropy) {
  Graph<D> g;
  Tensor<D> z({1, 3});
  z[0] = 4.0, z[1] = -1.0, z[2] = 0.5;
  auto loss = ce_label_smooth(g.constant(z), {0}, 0.0);
  const double lse = std::log(std::exp(4.0) + std::exp(-1.0) + std::exp(0.5));
  EXPECT_NEAR(loss.value().item(), lse - 4.0, 1e-12);
}

TEST(CeLabelSmooth, MatchesDirectSummation) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<D> z = random_tensor({1, 5}, 100 + static_cast<std::uint64_t>(trial), -4, 4);
    const int target = static_cast<int>(rng() % 5);
    Graph<D> g;
    auto loss = ce_label_smooth(g.constant(z), {target}, 0.1);
    std::vector<double> zv(z.data(), z.data() + 5);
    EXPECT_NEAR(loss.value().item(), smoothed_ce_oracle(zv, target, 0.1), 1e-7);
  }
}

TEST(CeLabelSmooth, ShiftInvariant) {
  const Tensor<D> z = random_tensor({4, 6}, 2, -3, 3);
  Tensor<D> shifted = z;
  for (Index i = 0; i < z.size(); ++i) shifted[i] += 37.5;
  Graph<D> g;
  const std::vector<int> t{0, 5, 2, -1};
  EXPECT_NEAR(ce_label_smooth(g.constant(z), t, 0.1).value().item(),
              ce_label_smooth(g.constant(shifted), t, 0.1).value().item(), 1e-6);
}

TEST(CeLabelSmooth, AbsentTargetsExcludedFromMean) {
  const Tensor<D> z = random_tensor({3, 4}, 3);
  Graph<D> g;
  const double all = ce_label_smooth(g.constant(z), {1, -1, 3}, 0.1).value().item();
  std::vector<double> r0(z.data(), z.data() + 4), r2(z.data() + 8, z.data() + 12);
  EXPECT_NEAR(all, 0.5 * (smoothed_ce_oracle(r0, 1, 0.1) + smoothed_ce_oracle(r2, 3, 0.1)), 1e-12);
  EXPECT_EQ(ce_label_smooth(g.constant(z), {-1, -1, -1}, 0.1).value().item(), 0.0);
}

// ---- batch-hard triplet ----------------------------------------------------

TEST(TripletBatchHard, IdenticalEmbeddingsGiveMargin) {
  Graph<D> g;
  auto r = triplet_batch_hard(g.constant(Tensor<D>::constant({4, 3}, 0.7)), {0, 0, 1, 1}, 0.3);
  EXPECT_NEAR(r.loss.value().item(), 0.3, 1e-12);
}

TEST(TripletBatchHard, SeparatedIdentitiesGiveZero) {
  Graph<D> g;
  auto r = triplet_batch_hard(g.constant(points({{0, 0}, {0, 0}, {10, 0}, {10, 0}})), {0, 0, 1, 1}, 0.3);
  EXPECT_EQ(r.loss.value().item(), 0.0);
}

TEST(TripletBatchHard, HandSetPointsMatchExhaustiveOracle) {
  const Tensor<D> x = points({{0, 0}, {1, 0}, {0.5, 0.2}, {3, 1}});
  const std::vector<int> ids{0, 0, 1, 1};
  Graph<D> g;
  auto r = triplet_batch_hard(g.constant(x), ids, 0.3);
  const double oracle = triplet_oracle(
      x, 0.3, [&](Index a, Index b) { return ids[a] == ids[b]; }, [](Index) { return true; }, true);
  EXPECT_NEAR(r.loss.value().item(), oracle, 1e-12);
  // Anchor 0: hardest positive 1 (d=1), hardest negative 2 (d=0.5385).
  EXPECT_EQ(r.mining.positives[0], 1);
  EXPECT_EQ(r.mining.negatives[0], 2);
}

TEST(TripletBatchHard, RandomBatchesMatchOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 4 + static_cast<Index>(rng() % 8);
    std::vector<int> ids;
    for (Index i = 0; i < n; ++i) ids.push_back(static_cast<int>(rng() % 3));
    ids[0] = 0, ids[1] = 1;
    const Tensor<D> x = random_tensor({n, 3}, 500 + static_cast<std::uint64_t>(trial));
    Graph<D> g;
    auto r = triplet_batch_hard(g.constant(x), ids, 0.3);
    const double oracle = triplet_oracle(
        x, 0.3, [&](Index a, Index b) { return ids[a] == ids[b]; }, [](Index) { return true; }, true);
    EXPECT_NEAR(r.loss.value().item(), oracle, 1e-12);
  }
}

TEST(TripletBatchHard, SingleIdentityRejected) {
  Graph<D> g;
  EXPECT_THROW(triplet_batch_hard(g.constant(random_tensor({3, 2}, 5)), {4, 4, 4}, 0.3), std::invalid_argument);
}

TEST(TripletBatchHard, NonNegativeAndTranslationInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor<D> x = random_tensor({6, 4}, 600 + seed);
    Tensor<D> moved = x;
    const Tensor<D> shift = random_tensor({4}, 700 + seed, -5, 5);
    for (Index r = 0; r < 6; ++r)
      for (Index c = 0; c < 4; ++c) moved.at(r, c) += shift[c];
    Graph<D> g;
    const std::vector<int> ids{0, 0, 1, 1, 2, 2};
    const double a = triplet_batch_hard(g.constant(x), ids, 0.3).loss.value().item();
    const double b = triplet_batch_hard(g.constant(moved), ids, 0.3).loss.value().item();
    EXPECT_GE(a, 0.0);
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(TripletBatchHard, GradCheck) {
  auto rep = grad_check(
      "triplet_batch_hard",
      [](Graph<D>&, const std::vector<Var<D>>& in) {
        return triplet_batch_hard(in[0], {0, 0, 1, 1, 2, 2}, 2.0).loss;
      },
      {random_tensor({6, 3}, 8)}, {});
  EXPECT_TRUE(rep.passed) << rep.summary();
}

// ---- attribute-pattern triplet ---------------------------------------------

using Labels = std::vector<std::vector<std::optional<int>>>;

TEST(TripletAttributePattern, SinglePatternGivesZero) {
  Graph<D> g;
  const Labels l(4, {1, 2});
  auto r = triplet_attribute_pattern(g.constant(random_tensor({4, 3}, 9)), l, 0.3);
  EXPECT_EQ(r.loss.value().item(), 0.0);
  EXPECT_EQ(r.mining.excluded, 4);
}

TEST(TripletAttributePattern, AllColorMissingIsMasked) {
  Graph<D> g;
  const Labels l{{std::nullopt, 0}, {std::nullopt, 1}, {std::nullopt, 0}, {std::nullopt, 2}};
  auto r = triplet_attribute_pattern(g.constant(random_tensor({4, 3}, 10)), l, 0.3);
  EXPECT_EQ(r.loss.value().item(), 0.0);
  EXPECT_EQ(r.mining.masked, 4);
}

TEST(TripletAttributePattern, TwoPatternsMatchOracle) {
  const Tensor<D> x = points({{0, 0}, {0.4, 0}, {0.2, 0.1}, {2, 2}, {1, 0}});
  const Labels l{{0, 0}, {0, 0}, {1, 0}, {1, 0}, {0, std::nullopt}};
  Graph<D> g;
  auto r = triplet_attribute_pattern(g.constant(x), l, 0.3);
  auto key = [&](Index i) { return l[static_cast<std::size_t>(i)]; };
  auto valid = [&](Index i) { return key(i)[0].has_value() && key(i)[1].has_value(); };
  const double oracle = triplet_oracle(x, 0.3, [&](Index a, Index b) { return key(a) == key(b); }, valid, false);
  EXPECT_NEAR(r.loss.value().item(), oracle, 1e-12);
  EXPECT_GT(oracle, 0.0);
  EXPECT_EQ(r.mining.masked, 1);
}

TEST(TripletAttributePattern, UnpairedAnchorsExcluded) {
  // Pattern (2,2) appears once: no same-pattern partner, so anchor 2 is dropped.
  const Tensor<D> x = points({{0, 0}, {1, 0}, {5, 5}});
  const Labels l{{0, 0}, {0, 0}, {2, 2}};
  Graph<D> g;
  auto r = triplet_attribute_pattern(g.constant(x), l, 0.3);
  EXPECT_EQ(r.mining.anchors, (std::vector<Index>{0, 1}));
  EXPECT_EQ(r.mining.excluded, 1);
}

// ---- composite -------------------------------------------------------------

LossReport all_parts(double v, int n) {
  LossReport r;
  r.tri_f = r.id_f = r.tri_g = r.tri_j = r.id_j = r.ac_id = r.ac_tri = v;
  r.att.assign(static_cast<std::size_t>(n), v);
  return r;
}

TEST(Composite, VanOfOnesIsFour) {
  EXPECT_DOUBLE_EQ(composite(all_parts(1.0, 2), LossWeights{}, Objective::kVan, 1), 4.0);
}

TEST(Composite, ZeroLambdaLeavesJointModule) {
  LossWeights w;
  w.lambda = 0.0;
  LossReport r = all_parts(0.0, 2);
  r.tri_j = 0.7, r.id_j = 1.3, r.tri_g = 0.2, r.tri_f = 5.0, r.id_f = 9.0, r.att = {3.0, 4.0};
  EXPECT_DOUBLE_EQ(composite(r, w, Objective::kFull, 1), composite(r, w, Objective::kJointModule, 1));
  EXPECT_DOUBLE_EQ(composite(r, w, Objective::kFull, 1), 2.2);
}

TEST(Composite, Stage2CancelledEqualsLiteral) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    LossReport r;
    r.tri_f = U(rng), r.id_f = U(rng), r.tri_g = U(rng), r.tri_j = U(rng), r.id_j = U(rng);
    r.ac_id = U(rng), r.ac_tri = U(rng);
    r.att = {U(rng), U(rng)};
    LossWeights w;
    w.lambda_a = U(rng), w.lambda_g = U(rng), w.lambda = U(rng);
    EXPECT_NEAR(composite(r, w, Objective::kStage2, 2), composite_stage2_uncancelled(r, w), 1e-7);
  }
}

TEST(Composite, Stage2OutsideStage2Rejected) {
  EXPECT_THROW(composite(all_parts(1.0, 2), LossWeights{}, Objective::kStage2, 1), std::invalid_argument);
  EXPECT_THROW(objective_terms(Objective::kStage2NoAc, LossWeights{}, 2, 1), std::invalid_argument);
}

TEST(Composite, FullWithOnlyFTermsIsBaseline) {
  LossReport r = all_parts(0.0, 2);
  r.tri_f = 0.4, r.id_f = 2.5;
  EXPECT_DOUBLE_EQ(composite(r, LossWeights{}, Objective::kFull, 1), composite(r, LossWeights{}, Objective::kBaseline, 1));
}

TEST(Composite, MissingPartRejected) {
  LossReport r;
  r.tri_f = 1.0;
  EXPECT_THROW(composite(r, LossWeights{}, Objective::kBaseline, 1), std::invalid_argument);
}

// ---- amelioration constraints ----------------------------------------------

TEST(AcId, EqualLossesGiveLogTwo) {
  Graph<D> g;
  auto v = g.constant(random_tensor({5}, 12, 0, 3));
  EXPECT_NEAR(ac_id(v, v).value().item(), std::log(2.0), 1e-15);
}

TEST(AcId, MuchSmallerJIsNearZeroButPositive) {
  Graph<D> g;
  auto j = g.constant(Tensor<D>::constant({3}, 0.0));
  auto f = g.constant(Tensor<D>::constant({3}, 40.0));
  const double v = ac_id(j, f).value().item();
  EXPECT_GT(v, 0.0);
  EXPECT_LT(v, 1e-15);
}

TEST(AcId, MatchesDirectFormulaAndStopsGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor<D> cj = random_tensor({4}, 800 + seed, 0, 4), cf = random_tensor({4}, 900 + seed, 0, 4);
    Graph<D> g;
    auto j = g.leaf(cj), f = g.leaf(cf);
    auto v = ac_id(j, f);
    double oracle = 0;
    for (Index i = 0; i < 4; ++i) oracle += std::log1p(std::exp(cj[i] - cf[i])) / 4.0;
    EXPECT_NEAR(v.value().item(), oracle, 1e-9);
    g.backward(v);
    EXPECT_TRUE(g.has_grad(j.id()));
    EXPECT_FALSE(g.has_grad(f.id()));
  }
}

TEST(AcId, MonotoneInJLoss) {
  Graph<D> g;
  auto f = g.constant(Tensor<D>::constant({2}, 1.0));
  double prev = 0;
  for (double x : {-3.0, -1.0, 0.0, 0.5, 2.0, 6.0}) {
    const double v = ac_id(g.constant(Tensor<D>::constant({2}, x)), f).value().item();
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(AcTri, IdenticalEmbeddingsGiveTwoLogTwo) {
  Graph<D> g;
  auto e = g.constant(random_tensor({4, 3}, 13));
  EXPECT_NEAR(ac_tri(e, e, {0, 0, 1, 1}, PairSpace::kJ).value().item(), 2 * std::log(2.0), 1e-12);
}

TEST(AcTri, BetterJGoesToZero) {
  // f: positives 20 apart, negatives within 6. j: positives collapsed, negatives 100 apart.
  const Tensor<D> f = points({{0, 0}, {20, 0}, {5, 3}, {25, 3}});
  const Tensor<D> j = points({{0, 0}, {0, 0}, {100, 0}, {100, 0}});
  Graph<D> g;
  const double v = ac_tri(g.constant(j), g.constant(f), {0, 0, 1, 1}, PairSpace::kJ).value().item();
  EXPECT_GT(v, 0.0);
  EXPECT_LT(v, 1e-8);
}

TEST(AcTri, HandSetBatchMatchesAnchorwiseOracle) {
  const Tensor<D> f = points({{0, 0}, {1, 0}, {0, 2}, {1, 3}});
  const Tensor<D> j = points({{0, 0}, {0.5, 0}, {0, 1}, {2, 2}});
  const std::vector<int> ids{0, 0, 1, 1};
  Graph<D> g;
  const double v = ac_tri(g.constant(j), g.constant(f), ids, PairSpace::kJ).value().item();
  double oracle = 0;
  for (Index a = 0; a < 4; ++a) {
    Index p = -1, n = -1;
    for (Index b = 0; b < 4; ++b) {
      if (b == a) continue;
      if (ids[a] == ids[b] && (p < 0 || dist(j, a, b) > dist(j, a, p))) p = b;
      if (ids[a] != ids[b] && (n < 0 || dist(j, a, b) < dist(j, a, n))) n = b;
    }
    oracle += std::log1p(std::exp(dist(j, a, p) - dist(f, a, p))) + std::log1p(std::exp(dist(f, a, n) - dist(j, a, n)));
  }
  EXPECT_NEAR(v, oracle / 4.0, 1e-12);
}

TEST(AcTri, FSideGetsNoGradientAndSingleIdRejected) {
  Graph<D> g;
  auto j = g.leaf(random_tensor({4, 3}, 14)), f = g.leaf(random_tensor({4, 3}, 15));
  g.backward(ac_tri(j, f, {0, 0, 1, 1}, PairSpace::kJ));
  EXPECT_TRUE(g.has_grad(j.id()));
  EXPECT_FALSE(g.has_grad(f.id()));
  EXPECT_THROW(ac_tri(j, f, {2, 2, 2, 2}, PairSpace::kJ), std::invalid_argument);
}

TEST(AcTri, GradCheck) {
  const Tensor<D> f = random_tensor({6, 3}, 16);
  auto rep = grad_check(
      "ac_tri",
      [&](Graph<D>& g, const std::vector<Var<D>>& in) { return ac_tri(in[0], g.constant(f), {0, 0, 1, 1, 2, 2}, PairSpace::kJ); },
      {random_tensor({6, 3}, 17)}, {});
  EXPECT_TRUE(rep.passed) << rep.summary();
}

// ---- batch objective on a model ------------------------------------------

ModelConfig small_config(Variant v) {
  ModelConfig cfg;
  cfg.backbone.stage_channels = {4, 4, 8};
  cfg.backbone.image_size = 16;
  cfg.variant = v;
  cfg.s_f = 6;
  cfg.s_a = 3;
  cfg.s_j = 5;
  cfg.se_reduction = 4;
  cfg.attribute_classes = {3, 2};
  cfg.id_count = 3;
  return cfg;
}

BatchTargets small_targets() {
  BatchTargets t;
  t.ids = {0, 0, 1, 1, 2, 2};
  t.attributes = {{0, 1}, {0, 1}, {1, 0}, {1, std::nullopt}, {0, 1}, {0, 1}};
  return t;
}

TEST(ComputeLoss, TotalReproducesComposite) {
  const Tensor<D> images = random_tensor({6, 3, 16, 16}, 18, 0, 1);
  for (auto [variant, objective, stage] :
       {std::tuple{Variant::kBaseline, Objective::kBaseline, 1}, std::tuple{Variant::kVan, Objective::kVan, 1},
        std::tuple{Variant::kANet, Objective::kFull, 1}, std::tuple{Variant::kANet, Objective::kStage2, 2},
        std::tuple{Variant::kANetAtt, Objective::kFull, 1}, std::tuple{Variant::kANetNoAc, Objective::kStage2NoAc, 2}}) {
    Model<D> model(small_config(variant));
    Graph<D> g;
    auto out = compute_loss(model.forward(g, images, {}), small_targets(), LossWeights{}, objective, stage);
    EXPECT_NEAR(out.report.total, composite(out.report, LossWeights{}, objective, stage), 1e-6) << objective_name(objective);
    if (has_branches(variant)) EXPECT_EQ(out.report.masked_counts, (std::vector<int>{0, 1}));
    EXPECT_EQ(out.report.ac_id.has_value(), objective == Objective::kStage2);
    if (out.report.ac_id) EXPECT_GT(*out.report.ac_id, 0.0);
    if (out.report.ac_tri) EXPECT_GT(*out.report.ac_tri, 0.0);
  }
}

TEST(ComputeLoss, ObjectiveNeedingJointModuleRejectedForVan) {
  Model<D> model(small_config(Variant::kVan));
  Graph<D> g;
  auto x = model.forward(g, random_tensor({6, 3, 16, 16}, 19), {});
  EXPECT_THROW(compute_loss(x, small_targets(), LossWeights{}, Objective::kFull, 1), std::invalid_argument);
}

TEST(ComputeLoss, AbsentAttributeGivesExactlyZeroBranchGradients) {
  Model<D> model(small_config(Variant::kVan));
  BatchTargets t = small_targets();
  for (auto& row : t.attributes) row[0] = std::nullopt;
  Graph<D> g;
  auto out = compute_loss(model.forward(g, random_tensor({6, 3, 16, 16}, 20, 0, 1), {}), t, LossWeights{}, Objective::kVan, 1);
  EXPECT_EQ(out.report.masked_counts[0], 6);
  g.backward(out.total);
  int checked = 0;
  for (auto* p : model.store().parameters(Partition::kAttributeBranches)) {
    if (p->name.rfind("branch0.", 0) != 0) continue;
    for (Index i = 0; i < p->grad.size(); ++i) ASSERT_EQ(p->grad[i], 0.0) << p->name << "[" << i << "]";
    ++checked;
  }
  EXPECT_EQ(checked, 7);
  bool branch1_moves = false;
  for (auto* p : model.store().parameters(Partition::kAttributeBranches)) {
    if (p->name.rfind("branch1.", 0) == 0) branch1_moves |= p->grad.vec().cwiseAbs().maxCoeff() > 0;
  }
  EXPECT_TRUE(branch1_moves);
}

TEST(ComputeLoss, GradCheckFullObjective) {
  Model<D> model(small_config(Variant::kANet));
  const Tensor<D> images = random_tensor({6, 3, 16, 16}, 21, 0, 1);
  auto rep = grad_check_parameters(
      "L over all parameters",
      [&](Graph<D>& g) {
        ForwardOptions opts;
        opts.update_stats = false;
        return compute_loss(model.forward(g, images, opts), small_targets(), LossWeights{}, Objective::kFull, 1).total;
      },
      model.store().parameters(), {1e-5, 1e-4, 1e-4});
  EXPECT_TRUE(rep.passed) << rep.summary();
}

TEST(ComputeLoss, GradCheckStage2Objective) {
  Model<D> model(small_config(Variant::kANet));
  model.store().set_trainable(Partition::kBackbone, false);
  const Tensor<D> images = random_tensor({6, 3, 16, 16}, 22, 0, 1);
  std::vector<Parameter<D>*> params = model.store().parameters(Partition::kAttributeBranches);
  for (auto* p : model.store().parameters(Partition::kJointModule)) params.push_back(p);
  auto rep = grad_check_parameters(
      "L' over stage-2 parameters",
      [&](Graph<D>& g) {
        ForwardOptions opts;
        opts.update_stats = false;
        opts.freeze_backbone = true;
        return compute_loss(model.forward(g, images, opts), small_targets(), LossWeights{}, Objective::kStage2, 2).total;
      },
      params, {1e-5, 1e-4, 1e-4});
  EXPECT_TRUE(rep.passed) << rep.summary();
}

}  // namespace
}  // namespace anet
