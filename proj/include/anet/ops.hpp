#pragma once

#include <type_traits>
#include <utility>
#include <vector>

#include "anet/autodiff.hpp"

namespace anet {

// Differentiable primitives. Every op records a node on the graph of its
// first argument; inputs must belong to the same graph.

template <typename Scalar>
Var<Scalar> detach(Var<Scalar> x);

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b);
/// Elementwise sum of equally shaped inputs. Each element adds its n terms in
/// ascending order, so the result does not depend on the order of parts.
template <typename Scalar>
Var<Scalar> sum_n(const std::vector<Var<Scalar>>& parts);
template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar factor);
template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> x, Scalar offset);

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x);
template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x);
/// max(x, 0) + log1p(exp(-|x|)).
template <typename Scalar>
Var<Scalar> softplus(Var<Scalar> x);
/// Row-wise softmax of an N x m array.
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x);
/// sqrt(max(x, floor)); the gradient is zero where the floor is active.
template <typename Scalar>
Var<Scalar> sqrt_floor(Var<Scalar> x, Scalar floor);

/// Cross-correlation of N x Cin x H x W with Cout x Cin x k x k, optional
/// per-output-channel bias (pass an invalid Var for none).
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, int stride, int padding);
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, int stride, int padding) {
  return conv2d(x, weight, Var<Scalar>(), stride, padding);
}

template <typename Scalar>
struct RunningStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
};

enum class NormMode { kBatch, kInstance, kIbnSplit };

struct NormOptions {
  bool train = true;
  bool update_stats = true;
  double momentum = 0.9;
  double eps = 1e-5;
};

/// Batch statistics (train) or running statistics (inference) per channel.
/// In train mode with update_stats set, `stats` is blended with the batch
/// moments: running = momentum * running + (1 - momentum) * batch.
template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta,
                       std::type_identity_t<RunningStats<Scalar>>* stats, const NormOptions& options);
template <typename Scalar>
Var<Scalar> instance_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, double eps = 1e-5);
/// kIbnSplit: first C/2 channels instance-normalized, the rest batch-normalized.
/// `stats` then covers only the batch-normalized half.
template <typename Scalar>
Var<Scalar> normalize(Var<Scalar> x, NormMode mode, Var<Scalar> gamma, Var<Scalar> beta,
                      std::type_identity_t<RunningStats<Scalar>>* stats, const NormOptions& options);

/// Spatial global average pooling: N x C x H x W -> N x C.
template <typename Scalar>
Var<Scalar> gap(Var<Scalar> x);
/// Spatial global max pooling: N x C x H x W -> N x C.
template <typename Scalar>
Var<Scalar> global_max_pool(Var<Scalar> x);
/// Mean and max across channels: N x C x H x W -> N x 2 x H x W.
template <typename Scalar>
Var<Scalar> channel_pool(Var<Scalar> x);

/// y = x W^T + b for x of shape N x in and W of shape out x in.
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias);
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight) {
  return linear(x, weight, Var<Scalar>());
}

/// x (N x C x H x W) scaled by gate (N x C), broadcast over space.
template <typename Scalar>
Var<Scalar> channel_gate(Var<Scalar> x, Var<Scalar> gate);
/// x (N x C x H x W) scaled by gate (N x 1 x H x W), broadcast over channels.
template <typename Scalar>
Var<Scalar> spatial_gate(Var<Scalar> x, Var<Scalar> gate);

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, int axis);
template <typename Scalar>
Var<Scalar> slice(Var<Scalar> x, int axis, Index begin, Index count);

/// Row-wise L2 normalization of N x D.
template <typename Scalar>
Var<Scalar> l2norm(Var<Scalar> x);
/// ||x_i||^2 + ||x_j||^2 - 2 x_i.x_j, clamped at zero, with an exact zero
/// diagonal. N x D -> N x N.
template <typename Scalar>
Var<Scalar> pairwise_sq_dist(Var<Scalar> x);
/// Picks x(r, c) for each (r, c) pair of a 2-D array.
template <typename Scalar>
Var<Scalar> gather(Var<Scalar> x, const std::vector<std::pair<Index, Index>>& cells);

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x);
template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x);
/// Mean over the entries where mask is set; an empty mask yields a constant 0.
template <typename Scalar>
Var<Scalar> masked_mean(Var<Scalar> x, const std::vector<bool>& mask);

/// Per-row cross-entropy against label-smoothed targets:
/// q_target = 1 - eps + eps / m, q_other = eps / m. A target of -1 marks an
/// absent label; that row's loss and gradient are zero.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, const std::vector<int>& targets, Scalar epsilon);

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  return sub(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(Scalar s, Var<Scalar> x) {
  return scale(x, s);
}

}  // namespace anet
