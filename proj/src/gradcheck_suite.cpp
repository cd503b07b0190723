#include "anet/gradcheck_suite.hpp"

#include <random>

#include "anet/losses.hpp"
#include "anet/model.hpp"
#include "anet/ops.hpp"

namespace anet {

namespace {

using D = double;

Tensor<D> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<D> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

// Reduces an op output to a scalar with fixed random weights.
Var<D> weighted_sum(Var<D> y, std::uint64_t seed) {
  return sum(mul(y, y.graph().constant(random_tensor(y.shape(), seed))));
}

const GradCheckOptions kPrimitive{1e-5, 1e-6, 1e-4};
const GradCheckOptions kComposed{1e-5, 1e-4, 1e-4};

ModelConfig composed_config(Variant v) {
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
  cfg.id_count = 3;
  return cfg;
}

BatchTargets composed_targets() {
  BatchTargets t;
  t.ids = {0, 0, 1, 1, 2, 2};
  t.attributes = {{0, 1}, {0, 1}, {1, 0}, {1, std::nullopt}, {0, 1}, {0, 1}};
  return t;
}

}  // namespace

std::vector<GradCheckReport> primitive_suite() {
  std::vector<GradCheckReport> out;
  auto run = [&](const std::string& name, const LeafFunction& fn, std::vector<Tensor<D>> inputs) {
    out.push_back(grad_check(name, fn, std::move(inputs), kPrimitive));
  };

  run("linear", [](Graph<D>&, const std::vector<Var<D>>& in) { return weighted_sum(linear(in[0], in[1], in[2]), 99); },
      {random_tensor({5, 3}, 1), random_tensor({4, 3}, 2), random_tensor({4}, 3)});
  for (int stride : {1, 2}) {
    run("conv2d/stride" + std::to_string(stride),
        [stride](Graph<D>&, const std::vector<Var<D>>& in) {
          return weighted_sum(conv2d(in[0], in[1], in[2], stride, 1), 5);
        },
        {random_tensor({2, 2, 5, 5}, 1), random_tensor({3, 2, 3, 3}, 2), random_tensor({3}, 3)});
  }
  const std::pair<NormMode, const char*> modes[] = {
      {NormMode::kBatch, "batch_norm"}, {NormMode::kInstance, "instance_norm"}, {NormMode::kIbnSplit, "ibn"}};
  for (const auto& [mode, label] : modes) {
    for (bool train : {true, false}) {
      const Index stat_channels = mode == NormMode::kIbnSplit ? 2 : 4;
      run(std::string(label) + (train ? "/train" : "/eval"),
          [mode = mode, train, stat_channels](Graph<D>&, const std::vector<Var<D>>& in) {
            RunningStats<D> stats{random_tensor({stat_channels}, 8), random_tensor({stat_channels}, 9, 0.5, 2.0)};
            return weighted_sum(normalize(in[0], mode, in[1], in[2], &stats, NormOptions{train, false, 0.9, 1e-5}),
                                4);
          },
          {random_tensor({3, 4, 3, 3}, 1, -2.0, 2.0), random_tensor({4}, 2, 0.5, 1.5), random_tensor({4}, 3)});
    }
  }
  const std::vector<std::pair<std::string, std::function<Var<D>(Var<D>)>>> unary = {
      {"relu", [](Var<D> x) { return relu(x); }},
      {"sigmoid", [](Var<D> x) { return sigmoid(x); }},
      {"softplus", [](Var<D> x) { return softplus(x); }},
      {"softmax", [](Var<D> x) { return softmax(x); }},
      {"l2norm", [](Var<D> x) { return l2norm(x); }},
      {"pairwise_sq_dist", [](Var<D> x) { return pairwise_sq_dist(x); }},
      {"sqrt_floor", [](Var<D> x) { return sqrt_floor(add_scalar(x, 2.0), 1e-12); }},
      {"gap", [](Var<D> x) { return gap(x); }},
      {"global_max_pool", [](Var<D> x) { return global_max_pool(x); }},
      {"channel_pool", [](Var<D> x) { return channel_pool(x); }},
  };
  for (const auto& [name, op] : unary) {
    const bool spatial = name == "gap" || name == "global_max_pool" || name == "channel_pool";
    run(name, [&op = op](Graph<D>&, const std::vector<Var<D>>& in) { return weighted_sum(op(in[0]), 21); },
        {spatial ? random_tensor({2, 3, 3, 4}, 17) : random_tensor({4, 5}, 17)});
  }
  run("channel_gate/spatial_gate",
      [](Graph<D>&, const std::vector<Var<D>>& in) {
        return weighted_sum(spatial_gate(channel_gate(in[0], in[1]), in[2]), 1);
      },
      {random_tensor({2, 3, 3, 4}, 1), random_tensor({2, 3}, 2), random_tensor({2, 1, 3, 4}, 3)});
  run("add/sub/mul/scale",
      [](Graph<D>&, const std::vector<Var<D>>& in) {
        return weighted_sum(sub(mul(in[0], in[1]), scale(add(in[0], in[1]), 3.0)), 7);
      },
      {random_tensor({3, 3}, 1), random_tensor({3, 3}, 2)});
  run("sum_n",
      [](Graph<D>&, const std::vector<Var<D>>& in) { return weighted_sum(mul(sum_n(in), in[1]), 11); },
      {random_tensor({2, 3}, 1), random_tensor({2, 3}, 2), random_tensor({2, 3}, 3)});
  run("concat/slice/gather",
      [](Graph<D>&, const std::vector<Var<D>>& in) {
        auto c = concat<D>({in[0], in[1]}, 1);
        return add(add(weighted_sum(slice(c, 1, 2, 3), 8), weighted_sum(gather(c, {{0, 1}, {2, 5}, {1, 0}}), 9)),
                   weighted_sum(c, 10));
      },
      {random_tensor({3, 3}, 1), random_tensor({3, 3}, 2)});
  run("sum/mean/masked_mean",
      [](Graph<D>&, const std::vector<Var<D>>& in) {
        return add(add(sum(mul(in[0], in[0])), mean(mul(in[0], in[0]))), masked_mean(in[0], {true, false, true}));
      },
      {random_tensor({3}, 4)});
  run("cross_entropy",
      [](Graph<D>&, const std::vector<Var<D>>& in) { return weighted_sum(cross_entropy(in[0], {2, -1, 0, 4}, 0.1), 3); },
      {random_tensor({4, 5}, 1, -3.0, 3.0)});
  return out;
}

std::vector<GradCheckReport> composed_suite() {
  std::vector<GradCheckReport> out;
  ForwardOptions stage1;
  stage1.update_stats = false;
  ForwardOptions stage2 = stage1;
  stage2.freeze_backbone = true;

  {
    Model<D> model(composed_config(Variant::kANet));
    const Tensor<D> images = random_tensor({6, 3, 16, 16}, 21, 0, 1);
    out.push_back(grad_check_parameters(
        "anet forward + L, all parameters",
        [&](Graph<D>& g) {
          return compute_loss(model.forward(g, images, stage1), composed_targets(), LossWeights{}, Objective::kFull, 1)
              .total;
        },
        model.store().parameters(), kComposed));
  }
  {
    // L' trains branches and the joint module; the backbone is frozen and
    // the reid head only enters through detached terms.
    Model<D> model(composed_config(Variant::kANet));
    model.store().set_trainable(Partition::kBackbone, false);
    const Tensor<D> images = random_tensor({6, 3, 16, 16}, 22, 0, 1);
    std::vector<Parameter<D>*> params = model.store().parameters(Partition::kAttributeBranches);
    for (auto* p : model.store().parameters(Partition::kJointModule)) params.push_back(p);
    out.push_back(grad_check_parameters(
        "anet forward + L', branch and joint parameters",
        [&](Graph<D>& g) {
          return compute_loss(model.forward(g, images, stage2), composed_targets(), LossWeights{}, Objective::kStage2, 2)
              .total;
        },
        params, kComposed));
  }
  {
    Model<D> model(composed_config(Variant::kANetAtt));
    const Tensor<D> images = random_tensor({6, 3, 16, 16}, 23, 0, 1);
    out.push_back(grad_check_parameters(
        "anet_att forward + L, all parameters",
        [&](Graph<D>& g) {
          return compute_loss(model.forward(g, images, stage1), composed_targets(), LossWeights{}, Objective::kFull, 1)
              .total;
        },
        model.store().parameters(), kComposed));
  }
  return out;
}

}  // namespace anet
