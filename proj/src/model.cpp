#include "anet/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace anet {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kVan: return "van";
    case Variant::kANet: return "anet";
    case Variant::kANetAtt: return "anet_att";
    case Variant::kANetNoAc: return "anet_no_ac";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::kBaseline, Variant::kVan, Variant::kANet, Variant::kANetAtt, Variant::kANetNoAc}) {
    if (s == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown variant '" + s + "' (baseline|van|anet|anet_att|anet_no_ac)");
}

const char* selector_name(Selector s) {
  switch (s) {
    case Selector::kF: return "f";
    case Selector::kJ: return "j";
    case Selector::kFA: return "fa";
  }
  return "?";
}

Selector parse_selector(const std::string& s) {
  if (s == "f") return Selector::kF;
  if (s == "j") return Selector::kJ;
  if (s == "fa") return Selector::kFA;
  throw std::invalid_argument("unknown selector '" + s + "' (f|j|fa)");
}

bool selector_supported(Variant v, Selector s) {
  switch (s) {
    case Selector::kF: return true;
    case Selector::kFA: return has_branches(v);
    case Selector::kJ: return has_joint_module(v);
  }
  return false;
}

int BackboneConfig::feature_size() const {
  return image_size >> static_cast<int>(stage_channels.size());
}

void BackboneConfig::validate() const {
  if (stage_channels.empty()) throw std::invalid_argument("backbone: stage_channels is empty");
  for (int c : stage_channels) {
    if (c < 2 || c % 2 != 0) throw std::invalid_argument("backbone: stage widths must be even and >= 2");
  }
  if (blocks_per_stage < 1) throw std::invalid_argument("backbone: blocks_per_stage must be >= 1");
  const int down = 1 << static_cast<int>(stage_channels.size());
  if (image_size % down != 0 || image_size / down < 2) {
    throw std::invalid_argument("backbone: image_size " + std::to_string(image_size) + " leaves a feature map below 2x2 after " +
                                std::to_string(stage_channels.size()) + " stride-2 stages");
  }
}

void ModelConfig::validate() const {
  backbone.validate();
  if (s_f < 1 || s_a < 1 || s_j < 1) throw std::invalid_argument("model: feature sizes must be positive");
  if (id_count < 2) throw std::invalid_argument("model: id_count must be >= 2");
  if (se_reduction < 1 || cbam_reduction < 1) throw std::invalid_argument("model: reduction ratios must be >= 1");
  if (cbam_kernel < 1 || cbam_kernel % 2 == 0) throw std::invalid_argument("model: cbam_kernel must be odd");
  if (has_branches(variant)) {
    if (attribute_classes.empty()) {
      throw std::invalid_argument(std::string("model: variant ") + variant_name(variant) + " needs at least one attribute");
    }
    for (int m : attribute_classes) {
      if (m < 2) throw std::invalid_argument("model: every attribute needs >= 2 classes");
    }
  }
  if (has_joint_module(variant) && branch == BranchKind::kFc) {
    throw std::invalid_argument(std::string("model: variant ") + variant_name(variant) +
                                " requires attention branches (the joint module fuses A_i maps); fc branches are VAN-only");
  }
}

// ---- store -----------------------------------------------------------------

template <typename Scalar>
Parameter<Scalar>& ParameterStore<Scalar>::create(const std::string& name, Partition partition, Tensor<Scalar> init) {
  if (find(name)) throw std::logic_error("duplicate parameter " + name);
  Parameter<Scalar>& p = params_.emplace_back();
  p.name = name;
  p.partition = partition;
  p.value = std::move(init);
  p.zero_grad();
  return p;
}

template <typename Scalar>
RunningStats<Scalar>& ParameterStore<Scalar>::create_stats(const std::string& name, Index channels) {
  Buffer<Scalar>& b = buffers_.emplace_back();
  b.name = name;
  b.stats.mean = Tensor<Scalar>::zeros({channels});
  b.stats.var = Tensor<Scalar>::constant({channels}, Scalar(1));
  return b.stats;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> ParameterStore<Scalar>::parameters() {
  std::vector<Parameter<Scalar>*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> ParameterStore<Scalar>::parameters() const {
  std::vector<const Parameter<Scalar>*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> ParameterStore<Scalar>::parameters(Partition partition) {
  std::vector<Parameter<Scalar>*> out;
  for (auto& p : params_) {
    if (p.partition == partition) out.push_back(&p);
  }
  return out;
}

template <typename Scalar>
Parameter<Scalar>* ParameterStore<Scalar>::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename Scalar>
const Parameter<Scalar>* ParameterStore<Scalar>::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename Scalar>
RunningStats<Scalar>* ParameterStore<Scalar>::find_stats(const std::string& name) {
  for (auto& b : buffers_) {
    if (b.name == name) return &b.stats;
  }
  return nullptr;
}

template <typename Scalar>
void ParameterStore<Scalar>::set_trainable(Partition partition, bool trainable) {
  for (auto& p : params_) {
    if (p.partition == partition) p.trainable = trainable;
  }
}

template <typename Scalar>
void ParameterStore<Scalar>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename Scalar>
std::size_t ParameterStore<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

// ---- layers ----------------------------------------------------------------

template <typename Scalar>
Var<Scalar> NormLayer<Scalar>::operator()(Graph<Scalar>& g, Var<Scalar> x, const NormOptions& options) const {
  return normalize(x, mode, g.param(*gamma), g.param(*beta), stats, options);
}

template <typename Scalar>
Var<Scalar> residual_block_forward(Graph<Scalar>& g, Var<Scalar> x, const ResidualBlock<Scalar>& block,
                                   const NormOptions& norm) {
  Var<Scalar> pre = relu(block.norm1(g, x, norm));
  Var<Scalar> h = conv2d(pre, g.param(*block.conv1), block.stride, 1);
  h = relu(block.norm2(g, h, norm));
  h = conv2d(h, g.param(*block.conv2), 1, 1);
  Var<Scalar> skip = block.projection ? conv2d(pre, g.param(*block.projection), block.stride, 0) : x;
  return add(skip, h);
}

namespace {

NormOptions backbone_norm(const ForwardOptions& options) {
  NormOptions n;
  if (options.freeze_backbone) {
    n.train = false;
    n.update_stats = false;
  } else {
    n.train = options.train;
    n.update_stats = options.train && options.update_stats;
  }
  return n;
}

NormOptions head_norm(const ForwardOptions& options) {
  NormOptions n;
  n.train = options.train;
  n.update_stats = options.train && options.update_stats;
  return n;
}

}  // namespace

template <typename Scalar>
Var<Scalar> backbone_forward(Graph<Scalar>& g, Var<Scalar> images, const Backbone<Scalar>& net,
                             const ForwardOptions& options) {
  const BackboneConfig& cfg = net.config;
  const Shape expected{images.shape().empty() ? 0 : images.dim(0), 3, cfg.image_size, cfg.image_size};
  require_shape(images.shape(), expected, "backbone input");
  const NormOptions norm = backbone_norm(options);
  Var<Scalar> x = conv2d(images, g.param(*net.stem), 1, 1);
  for (const auto& block : net.blocks) x = residual_block_forward(g, x, block, norm);
  return relu(net.final_norm(g, x, norm));
}

template <typename Scalar>
Var<Scalar> reid_feature(Graph<Scalar>& g, Var<Scalar> feature_map, const ReidHead<Scalar>& head) {
  return linear(gap(feature_map), g.param(*head.weight), g.param(*head.bias));
}

template <typename Scalar>
AttributeOutput<Scalar> attribute_forward(Graph<Scalar>& g, Var<Scalar> feature_map,
                                          const AttributeBranch<Scalar>& branch) {
  if (branch.kind != BranchKind::kAttention) throw std::logic_error("attribute_forward: branch has no attention block");
  AttributeOutput<Scalar> out;
  Var<Scalar> squeeze = gap(feature_map);
  Var<Scalar> hidden = relu(linear(squeeze, g.param(*branch.se_w1), g.param(*branch.se_b1)));
  out.gate = sigmoid(linear(hidden, g.param(*branch.se_w2), g.param(*branch.se_b2)));
  out.map = channel_gate(feature_map, out.gate);
  out.vector = linear(gap(out.map), g.param(*branch.weight), g.param(*branch.bias));
  out.logits = linear(out.vector, g.param(*branch.classifier));
  return out;
}

template <typename Scalar>
AttributeOutput<Scalar> attribute_forward_fc(Graph<Scalar>& g, Var<Scalar> feature_map,
                                             const AttributeBranch<Scalar>& branch) {
  AttributeOutput<Scalar> out;
  out.vector = linear(gap(feature_map), g.param(*branch.weight), g.param(*branch.bias));
  out.logits = linear(out.vector, g.param(*branch.classifier));
  return out;
}

template <typename Scalar>
Var<Scalar> concat_features(Var<Scalar> f, const std::vector<Var<Scalar>>& attribute_vectors) {
  if (attribute_vectors.empty()) return f;
  std::vector<Var<Scalar>> parts{f};
  parts.insert(parts.end(), attribute_vectors.begin(), attribute_vectors.end());
  return concat(parts, 1);
}

template <typename Scalar>
Var<Scalar> conv_norm_relu(Graph<Scalar>& g, Var<Scalar> x, const ConvNormRelu<Scalar>& layer,
                           const NormOptions& norm) {
  Var<Scalar> h = conv2d(x, g.param(*layer.weight), 1, layer.kernel / 2);
  return relu(layer.norm(g, h, norm));
}

template <typename Scalar>
Var<Scalar> fuse_attributes(Graph<Scalar>& g, const std::vector<Var<Scalar>>& attribute_maps,
                            const JointModule<Scalar>& jm, const NormOptions& norm) {
  if (attribute_maps.empty()) throw std::invalid_argument("fuse_attributes: no attribute maps (n = 0)");
  for (const auto& m : attribute_maps) require_shape(m.shape(), attribute_maps.front().shape(), "fuse_attributes map");
  Var<Scalar> s = attribute_maps.size() == 1 ? attribute_maps.front() : sum_n(attribute_maps);
  return add(s, conv_norm_relu(g, s, jm.theta_a, norm));
}

template <typename Scalar>
Var<Scalar> distill(Graph<Scalar>& g, Var<Scalar> fused, const JointModule<Scalar>& jm, const NormOptions& norm) {
  return conv_norm_relu(g, conv_norm_relu(g, fused, jm.theta_g2, norm), jm.theta_g1, norm);
}

template <typename Scalar>
Var<Scalar> joint_embed(Graph<Scalar>& g, Var<Scalar> joint, const JointModule<Scalar>& jm) {
  return linear(gap(joint), g.param(*jm.weight), g.param(*jm.bias));
}

template <typename Scalar>
Var<Scalar> cbam_gate(Graph<Scalar>& g, Var<Scalar> fused, const Cbam<Scalar>& cbam) {
  Var<Scalar> w1 = g.param(*cbam.fc1_w), b1 = g.param(*cbam.fc1_b);
  Var<Scalar> w2 = g.param(*cbam.fc2_w), b2 = g.param(*cbam.fc2_b);
  auto mlp = [&](Var<Scalar> v) { return linear(relu(linear(v, w1, b1)), w2, b2); };
  Var<Scalar> channel = sigmoid(add(mlp(gap(fused)), mlp(global_max_pool(fused))));
  Var<Scalar> refined = channel_gate(fused, channel);
  const int k = static_cast<int>(cbam.spatial_w->value.dim(3));
  Var<Scalar> spatial =
      sigmoid(conv2d(channel_pool(refined), g.param(*cbam.spatial_w), g.param(*cbam.spatial_b), 1, k / 2));
  // Combined gate = channel * spatial, expressed on a ones map of G's shape.
  Var<Scalar> ones = g.constant(Tensor<Scalar>::constant(fused.shape(), Scalar(1)));
  return spatial_gate(channel_gate(ones, channel), spatial);
}

template <typename Scalar>
Var<Scalar> joint_feature_att(Graph<Scalar>& g, Var<Scalar> feature_map, Var<Scalar> fused, const Cbam<Scalar>& cbam) {
  require_shape(fused.shape(), feature_map.shape(), "joint_feature_att G");
  return add(mul(feature_map, cbam_gate(g, fused, cbam)), feature_map);
}

// ---- model -----------------------------------------------------------------

namespace {

template <typename Scalar>
class Builder {
 public:
  Builder(ParameterStore<Scalar>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  Parameter<Scalar>* conv(const std::string& name, Partition part, Index cout, Index cin, Index k) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(cin * k * k)));
    return fill(name, part, {cout, cin, k, k}, [&] { return dist(rng_); });
  }
  Parameter<Scalar>* dense(const std::string& name, Partition part, Index out, Index in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    return fill(name, part, {out, in}, [&] { return dist(rng_); });
  }
  Parameter<Scalar>* classifier(const std::string& name, Partition part, Index out, Index in) {
    std::normal_distribution<double> dist(0.0, 0.01);
    return fill(name, part, {out, in}, [&] { return dist(rng_); });
  }
  Parameter<Scalar>* constant(const std::string& name, Partition part, Shape shape, double v) {
    return &store_.create(name, part, Tensor<Scalar>::constant(shape, static_cast<Scalar>(v)));
  }
  NormLayer<Scalar> norm(const std::string& name, Partition part, Index channels, NormMode mode) {
    NormLayer<Scalar> n;
    n.mode = mode;
    n.gamma = constant(name + ".gamma", part, {channels}, 1.0);
    n.beta = constant(name + ".beta", part, {channels}, 0.0);
    const Index batch_channels = mode == NormMode::kBatch ? channels : mode == NormMode::kIbnSplit ? channels - channels / 2 : 0;
    if (batch_channels > 0) n.stats = &store_.create_stats(name + ".running", batch_channels);
    return n;
  }

 private:
  template <typename Draw>
  Parameter<Scalar>* fill(const std::string& name, Partition part, Shape shape, Draw draw) {
    Tensor<Scalar> t = Tensor<Scalar>::zeros(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(draw());
    return &store_.create(name, part, std::move(t));
  }

  ParameterStore<Scalar>& store_;
  std::mt19937_64 rng_;
};

}  // namespace

template <typename Scalar>
Model<Scalar>::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  Builder<Scalar> b(store_, config_.init_seed);
  const auto& bc = config_.backbone;
  const Index c = bc.final_channels();

  backbone_.config = bc;
  const Partition bb = Partition::kBackbone;
  backbone_.stem = b.conv("backbone.stem.weight", bb, bc.stage_channels[0], 3, 3);
  Index cin = bc.stage_channels[0];
  for (std::size_t s = 0; s < bc.stage_channels.size(); ++s) {
    const Index cout = bc.stage_channels[s];
    const bool ibn = bc.ibn && s < 2;
    for (int k = 0; k < bc.blocks_per_stage; ++k) {
      const std::string prefix = "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(k);
      ResidualBlock<Scalar> block;
      block.stride = k == 0 ? 2 : 1;
      block.norm1 = b.norm(prefix + ".norm1", bb, cin, ibn ? NormMode::kIbnSplit : NormMode::kBatch);
      block.conv1 = b.conv(prefix + ".conv1.weight", bb, cout, cin, 3);
      block.norm2 = b.norm(prefix + ".norm2", bb, cout, NormMode::kBatch);
      block.conv2 = b.conv(prefix + ".conv2.weight", bb, cout, cout, 3);
      if (block.stride != 1 || cin != cout) block.projection = b.conv(prefix + ".projection.weight", bb, cout, cin, 1);
      backbone_.blocks.push_back(block);
      cin = cout;
    }
  }
  backbone_.final_norm = b.norm("backbone.final_norm", bb, c, NormMode::kBatch);

  const Partition rh = Partition::kReidHead;
  reid_.weight = b.dense("reid.weight", rh, config_.s_f, c);
  reid_.bias = b.constant("reid.bias", rh, {config_.s_f}, 0.0);
  reid_.classifier = b.classifier("reid.classifier", rh, config_.id_count, config_.s_f);

  if (has_branches(config_.variant)) {
    const Partition ab = Partition::kAttributeBranches;
    const Index hidden = std::max<Index>(1, c / config_.se_reduction);
    for (std::size_t i = 0; i < config_.attribute_classes.size(); ++i) {
      const std::string prefix = "branch" + std::to_string(i);
      AttributeBranch<Scalar> br;
      br.kind = config_.branch;
      if (br.kind == BranchKind::kAttention) {
        br.se_w1 = b.dense(prefix + ".se.fc1.weight", ab, hidden, c);
        br.se_b1 = b.constant(prefix + ".se.fc1.bias", ab, {hidden}, 0.0);
        br.se_w2 = b.dense(prefix + ".se.fc2.weight", ab, c, hidden);
        br.se_b2 = b.constant(prefix + ".se.fc2.bias", ab, {c}, 0.0);
      }
      br.weight = b.dense(prefix + ".weight", ab, config_.s_a, c);
      br.bias = b.constant(prefix + ".bias", ab, {config_.s_a}, 0.0);
      br.classifier = b.classifier(prefix + ".classifier", ab, config_.attribute_classes[i], config_.s_a);
      branches_.push_back(br);
    }
  }

  if (has_joint_module(config_.variant)) {
    const Partition jp = Partition::kJointModule;
    JointModule<Scalar> jm;
    auto cnr = [&](const std::string& name, int k) {
      ConvNormRelu<Scalar> l;
      l.kernel = k;
      l.weight = b.conv("joint." + name + ".weight", jp, c, c, k);
      l.norm = b.norm("joint." + name + ".norm", jp, c, NormMode::kBatch);
      return l;
    };
    jm.theta_a = cnr("theta_a", 1);
    if (has_distillation(config_.variant)) {
      jm.theta_g2 = cnr("theta_g2", 3);
      jm.theta_g1 = cnr("theta_g1", 3);
    }
    if (config_.variant == Variant::kANetAtt) {
      Cbam<Scalar> cb;
      const Index hidden = std::max<Index>(1, c / config_.cbam_reduction);
      cb.fc1_w = b.dense("joint.cbam.fc1.weight", jp, hidden, c);
      cb.fc1_b = b.constant("joint.cbam.fc1.bias", jp, {hidden}, 0.0);
      cb.fc2_w = b.dense("joint.cbam.fc2.weight", jp, c, hidden);
      cb.fc2_b = b.constant("joint.cbam.fc2.bias", jp, {c}, 0.0);
      cb.spatial_w = b.conv("joint.cbam.spatial.weight", jp, 1, 2, config_.cbam_kernel);
      cb.spatial_b = b.constant("joint.cbam.spatial.bias", jp, {1}, 0.0);
      jm.cbam = cb;
    }
    jm.weight = b.dense("joint.weight", jp, config_.s_j, c);
    jm.bias = b.constant("joint.bias", jp, {config_.s_j}, 0.0);
    jm.classifier = b.classifier("joint.classifier", jp, config_.id_count, config_.s_j);
    joint_ = jm;
  }
}

template <typename Scalar>
Features<Scalar> Model<Scalar>::forward(Graph<Scalar>& g, const Tensor<Scalar>& images, const ForwardOptions& options) {
  Features<Scalar> out;
  out.F = backbone_forward(g, g.constant(images), backbone_, options);
  out.f = reid_feature(g, out.F, reid_);
  out.id_logits_f = linear(out.f, g.param(*reid_.classifier));
  for (const auto& br : branches_) {
    out.attributes.push_back(br.kind == BranchKind::kAttention ? attribute_forward(g, out.F, br)
                                                               : attribute_forward_fc(g, out.F, br));
  }
  if (joint_) {
    const NormOptions norm = head_norm(options);
    std::vector<Var<Scalar>> maps;
    for (const auto& a : out.attributes) maps.push_back(a.map);
    out.G = fuse_attributes(g, maps, *joint_, norm);
    out.g = pooled_attribute(out.G);
    if (joint_->cbam) {
      out.J = joint_feature_att(g, out.F, out.G, *joint_->cbam);
    } else {
      out.G_reid = distill(g, out.G, *joint_, norm);
      out.J = joint_feature(out.F, out.G_reid);
    }
    out.j = joint_embed(g, out.J, *joint_);
    out.id_logits_j = linear(out.j, g.param(*joint_->classifier));
  }
  return out;
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::select(const Features<Scalar>& features, Selector selector) const {
  if (!selector_supported(config_.variant, selector)) {
    throw std::invalid_argument(std::string("selector ") + selector_name(selector) + " is not available for variant " +
                                variant_name(config_.variant));
  }
  switch (selector) {
    case Selector::kF: return features.f;
    case Selector::kJ: return features.j;
    case Selector::kFA: {
      std::vector<Var<Scalar>> parts;
      for (const auto& a : features.attributes) parts.push_back(a.vector);
      return concat_features(features.f, parts);
    }
  }
  return features.f;
}

#define ANET_INSTANTIATE_MODEL(S)                                                                               \
  template class ParameterStore<S>;                                                                             \
  template class Model<S>;                                                                                      \
  template struct NormLayer<S>;                                                                                 \
  template Var<S> residual_block_forward(Graph<S>&, Var<S>, const ResidualBlock<S>&, const NormOptions&);      \
  template Var<S> backbone_forward(Graph<S>&, Var<S>, const Backbone<S>&, const ForwardOptions&);              \
  template Var<S> reid_feature(Graph<S>&, Var<S>, const ReidHead<S>&);                                         \
  template AttributeOutput<S> attribute_forward(Graph<S>&, Var<S>, const AttributeBranch<S>&);                 \
  template AttributeOutput<S> attribute_forward_fc(Graph<S>&, Var<S>, const AttributeBranch<S>&);              \
  template Var<S> concat_features(Var<S>, const std::vector<Var<S>>&);                                         \
  template Var<S> conv_norm_relu(Graph<S>&, Var<S>, const ConvNormRelu<S>&, const NormOptions&);               \
  template Var<S> fuse_attributes(Graph<S>&, const std::vector<Var<S>>&, const JointModule<S>&, const NormOptions&); \
  template Var<S> distill(Graph<S>&, Var<S>, const JointModule<S>&, const NormOptions&);                       \
  template Var<S> joint_embed(Graph<S>&, Var<S>, const JointModule<S>&);                                       \
  template Var<S> cbam_gate(Graph<S>&, Var<S>, const Cbam<S>&);                                                \
  template Var<S> joint_feature_att(Graph<S>&, Var<S>, Var<S>, const Cbam<S>&);

ANET_INSTANTIATE_MODEL(float)
ANET_INSTANTIATE_MODEL(double)

}  // namespace anet
