#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "anet/ops.hpp"

namespace anet {

enum class Variant { kBaseline, kVan, kANet, kANetAtt, kANetNoAc };
enum class BranchKind { kAttention, kFc };
enum class Selector { kF, kJ, kFA };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);
const char* selector_name(Selector s);
Selector parse_selector(const std::string& s);

inline bool has_branches(Variant v) { return v != Variant::kBaseline; }
inline bool has_joint_module(Variant v) {
  return v == Variant::kANet || v == Variant::kANetAtt || v == Variant::kANetNoAc;
}
/// Variants whose J is built from the distilled map G_reid.
inline bool has_distillation(Variant v) { return v == Variant::kANet || v == Variant::kANetNoAc; }
bool selector_supported(Variant v, Selector s);

struct BackboneConfig {
  std::vector<int> stage_channels{16, 32, 64};
  int blocks_per_stage = 1;
  bool ibn = true;
  int image_size = 64;

  int final_channels() const { return stage_channels.back(); }
  /// Spatial side of F(I); every stage halves the resolution.
  int feature_size() const;
  void validate() const;
};

struct ModelConfig {
  BackboneConfig backbone;
  Variant variant = Variant::kANet;
  BranchKind branch = BranchKind::kAttention;
  int s_f = 64;
  int s_a = 16;
  int s_j = 64;
  int se_reduction = 16;
  int cbam_reduction = 16;
  int cbam_kernel = 7;
  std::vector<int> attribute_classes{4, 4};
  int id_count = 2;
  std::uint64_t init_seed = 1;

  void validate() const;
};

// ---- parameters ------------------------------------------------------------

template <typename Scalar>
struct Buffer {
  std::string name;
  RunningStats<Scalar> stats;
};

/// Owns every parameter and normalization buffer of a model. Element
/// addresses are stable for the store's lifetime (including moves).
template <typename Scalar>
class ParameterStore {
 public:
  Parameter<Scalar>& create(const std::string& name, Partition partition, Tensor<Scalar> init);
  RunningStats<Scalar>& create_stats(const std::string& name, Index channels);

  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;
  std::vector<Parameter<Scalar>*> parameters(Partition partition);
  std::deque<Buffer<Scalar>>& buffers() { return buffers_; }
  const std::deque<Buffer<Scalar>>& buffers() const { return buffers_; }

  Parameter<Scalar>* find(const std::string& name);
  const Parameter<Scalar>* find(const std::string& name) const;
  RunningStats<Scalar>* find_stats(const std::string& name);

  void set_trainable(Partition partition, bool trainable);
  void zero_grad();
  std::size_t parameter_count() const;

 private:
  std::deque<Parameter<Scalar>> params_;
  std::deque<Buffer<Scalar>> buffers_;
};

// ---- layers ----------------------------------------------------------------

struct ForwardOptions {
  bool train = true;
  bool update_stats = true;
  /// Backbone normalization runs on running statistics and is never updated.
  bool freeze_backbone = false;
};

template <typename Scalar>
struct NormLayer {
  NormMode mode = NormMode::kBatch;
  Parameter<Scalar>* gamma = nullptr;
  Parameter<Scalar>* beta = nullptr;
  RunningStats<Scalar>* stats = nullptr;

  Var<Scalar> operator()(Graph<Scalar>& g, Var<Scalar> x, const NormOptions& options) const;
};

/// Pre-activation residual block: x + conv(relu(norm(conv(relu(norm(x)))))),
/// with a strided 1x1 projection on the normalized input when the shape changes.
template <typename Scalar>
struct ResidualBlock {
  int stride = 1;
  NormLayer<Scalar> norm1;
  Parameter<Scalar>* conv1 = nullptr;
  NormLayer<Scalar> norm2;
  Parameter<Scalar>* conv2 = nullptr;
  Parameter<Scalar>* projection = nullptr;
};

template <typename Scalar>
struct Backbone {
  BackboneConfig config;
  Parameter<Scalar>* stem = nullptr;
  std::vector<ResidualBlock<Scalar>> blocks;
  NormLayer<Scalar> final_norm;
};

template <typename Scalar>
struct ReidHead {
  Parameter<Scalar>* weight = nullptr;  // s_f x c
  Parameter<Scalar>* bias = nullptr;
  Parameter<Scalar>* classifier = nullptr;  // id_count x s_f, no bias
};

template <typename Scalar>
struct AttributeBranch {
  BranchKind kind = BranchKind::kAttention;
  // SE gate c -> c/r -> c; absent for kFc.
  Parameter<Scalar>* se_w1 = nullptr;
  Parameter<Scalar>* se_b1 = nullptr;
  Parameter<Scalar>* se_w2 = nullptr;
  Parameter<Scalar>* se_b2 = nullptr;
  Parameter<Scalar>* weight = nullptr;  // s_a x c
  Parameter<Scalar>* bias = nullptr;
  Parameter<Scalar>* classifier = nullptr;  // m_i x s_a, no bias
};

template <typename Scalar>
struct ConvNormRelu {
  int kernel = 1;
  Parameter<Scalar>* weight = nullptr;
  NormLayer<Scalar> norm;
};

template <typename Scalar>
struct Cbam {
  Parameter<Scalar>* fc1_w = nullptr;
  Parameter<Scalar>* fc1_b = nullptr;
  Parameter<Scalar>* fc2_w = nullptr;
  Parameter<Scalar>* fc2_b = nullptr;
  Parameter<Scalar>* spatial_w = nullptr;  // 1 x 2 x k x k
  Parameter<Scalar>* spatial_b = nullptr;
};

template <typename Scalar>
struct JointModule {
  ConvNormRelu<Scalar> theta_a;   // 1x1
  ConvNormRelu<Scalar> theta_g2;  // 3x3, applied first
  ConvNormRelu<Scalar> theta_g1;  // 3x3
  Parameter<Scalar>* weight = nullptr;  // s_j x c
  Parameter<Scalar>* bias = nullptr;
  Parameter<Scalar>* classifier = nullptr;  // id_count x s_j
  std::optional<Cbam<Scalar>> cbam;
};

// ---- forward pieces --------------------------------------------------------

template <typename Scalar>
Var<Scalar> backbone_forward(Graph<Scalar>& g, Var<Scalar> images, const Backbone<Scalar>& net,
                             const ForwardOptions& options);
template <typename Scalar>
Var<Scalar> residual_block_forward(Graph<Scalar>& g, Var<Scalar> x, const ResidualBlock<Scalar>& block,
                                   const NormOptions& norm);

/// f = W_f GAP(F) + b_f.
template <typename Scalar>
Var<Scalar> reid_feature(Graph<Scalar>& g, Var<Scalar> feature_map, const ReidHead<Scalar>& head);

template <typename Scalar>
struct AttributeOutput {
  Var<Scalar> gate;    // N x c, attention variant only
  Var<Scalar> map;     // A_i, attention variant only
  Var<Scalar> vector;  // a_i
  Var<Scalar> logits;
};

/// A_i = F * sigmoid(SE(GAP(F))); a_i = W_a GAP(A_i) + b_a.
template <typename Scalar>
AttributeOutput<Scalar> attribute_forward(Graph<Scalar>& g, Var<Scalar> feature_map,
                                          const AttributeBranch<Scalar>& branch);
/// a_i = W_a GAP(F) + b_a without attention; produces no A_i.
template <typename Scalar>
AttributeOutput<Scalar> attribute_forward_fc(Graph<Scalar>& g, Var<Scalar> feature_map,
                                             const AttributeBranch<Scalar>& branch);

/// [f, a_1, ..., a_n] along the feature axis.
template <typename Scalar>
Var<Scalar> concat_features(Var<Scalar> f, const std::vector<Var<Scalar>>& attribute_vectors);

template <typename Scalar>
Var<Scalar> conv_norm_relu(Graph<Scalar>& g, Var<Scalar> x, const ConvNormRelu<Scalar>& layer,
                           const NormOptions& norm);

/// G = S + theta_A(S) with S = sum_i A_i.
template <typename Scalar>
Var<Scalar> fuse_attributes(Graph<Scalar>& g, const std::vector<Var<Scalar>>& attribute_maps,
                            const JointModule<Scalar>& jm, const NormOptions& norm);
template <typename Scalar>
Var<Scalar> pooled_attribute(Var<Scalar> fused) {
  return gap(fused);
}
/// G_reid = theta_g1(theta_g2(G)).
template <typename Scalar>
Var<Scalar> distill(Graph<Scalar>& g, Var<Scalar> fused, const JointModule<Scalar>& jm, const NormOptions& norm);
/// J = F + G_reid.
template <typename Scalar>
Var<Scalar> joint_feature(Var<Scalar> feature_map, Var<Scalar> distilled) {
  return add(feature_map, distilled);
}
/// j = W_j GAP(J) + b_j.
template <typename Scalar>
Var<Scalar> joint_embed(Graph<Scalar>& g, Var<Scalar> joint, const JointModule<Scalar>& jm);
/// CBAM(G) = channel gate then spatial gate; returns the N x c x h x w gate.
template <typename Scalar>
Var<Scalar> cbam_gate(Graph<Scalar>& g, Var<Scalar> fused, const Cbam<Scalar>& cbam);
/// J = F * CBAM(G) + F.
template <typename Scalar>
Var<Scalar> joint_feature_att(Graph<Scalar>& g, Var<Scalar> feature_map, Var<Scalar> fused,
                              const Cbam<Scalar>& cbam);

// ---- full model ------------------------------------------------------------

template <typename Scalar>
struct Features {
  Var<Scalar> F;
  Var<Scalar> f;
  Var<Scalar> id_logits_f;
  std::vector<AttributeOutput<Scalar>> attributes;
  Var<Scalar> G;
  Var<Scalar> g;
  Var<Scalar> G_reid;
  Var<Scalar> J;
  Var<Scalar> j;
  Var<Scalar> id_logits_j;
};

template <typename Scalar>
class Model {
 public:
  explicit Model(ModelConfig config);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<Scalar>& store() { return store_; }
  const ParameterStore<Scalar>& store() const { return store_; }

  Backbone<Scalar>& backbone() { return backbone_; }
  ReidHead<Scalar>& reid_head() { return reid_; }
  std::vector<AttributeBranch<Scalar>>& branches() { return branches_; }
  JointModule<Scalar>* joint_module() { return joint_ ? &*joint_ : nullptr; }

  /// images: N x 3 x H x W.
  Features<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& images, const ForwardOptions& options);
  /// Raw (unnormalized) test feature for a selector, N x dim.
  Var<Scalar> select(const Features<Scalar>& features, Selector selector) const;

  /// Copies every parameter and buffer with a matching name (values cast).
  template <typename Other>
  void copy_from(const Model<Other>& other);

 private:
  ModelConfig config_;
  ParameterStore<Scalar> store_;
  Backbone<Scalar> backbone_;
  ReidHead<Scalar> reid_;
  std::vector<AttributeBranch<Scalar>> branches_;
  std::optional<JointModule<Scalar>> joint_;
};

template <typename Scalar>
template <typename Other>
void Model<Scalar>::copy_from(const Model<Other>& other) {
  for (const Parameter<Other>* p : other.store().parameters()) {
    if (Parameter<Scalar>* mine = store_.find(p->name)) {
      require_shape(p->value.shape(), mine->value.shape(), p->name.c_str());
      mine->value = p->value.template cast<Scalar>();
    }
  }
  for (const auto& b : other.store().buffers()) {
    if (RunningStats<Scalar>* mine = store_.find_stats(b.name)) {
      mine->mean = b.stats.mean.template cast<Scalar>();
      mine->var = b.stats.var.template cast<Scalar>();
    }
  }
}

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace anet
