#include "anet/trainer.hpp"

#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace anet {

void TrainConfig::validate() const {
  if (epochs_total < 1) throw std::invalid_argument("train: epochs_total must be >= 1");
  if (stage1_epochs < 0 || stage1_epochs > epochs_total) {
    throw std::invalid_argument("train: stage1_epochs must lie in [0, epochs_total]");
  }
  if (is_two_stage(*this) && stage1_epochs == 0) {
    throw std::invalid_argument("train: two-stage variants need stage1_epochs >= 1");
  }
  if (lr <= 0 || decay_factor <= 0) throw std::invalid_argument("train: lr and decay_factor must be positive");
  if (p < 2 || k < 1) throw std::invalid_argument("train: PK batches need P >= 2 and K >= 1");
  if (steps_per_epoch < 0) throw std::invalid_argument("train: steps_per_epoch must be >= 0");
  if (weights.lambda_a < 0 || weights.lambda_g < 0 || weights.lambda < 0) {
    throw std::invalid_argument("train: loss weights must be non-negative");
  }
  if (weights.epsilon < 0 || weights.epsilon >= 1) throw std::invalid_argument("train: label smoothing must lie in [0, 1)");
}

double learning_rate(const TrainConfig& c, int epoch) {
  double lr = c.lr;
  for (int boundary : c.decay_epochs) {
    if (epoch >= boundary) lr *= c.decay_factor;
  }
  return lr;
}

bool is_two_stage(const TrainConfig& c) {
  switch (c.variant) {
    case Variant::kANet:
    case Variant::kANetAtt: return true;
    case Variant::kANetNoAc: return c.no_ac_two_stage;
    default: return false;
  }
}

int stage_of(const TrainConfig& c, int epoch) { return is_two_stage(c) && epoch >= c.stage1_epochs ? 2 : 1; }

Objective objective_for(const TrainConfig& c, int stage) {
  switch (c.variant) {
    case Variant::kBaseline: return Objective::kBaseline;
    case Variant::kVan: return Objective::kVan;
    case Variant::kANetNoAc: return stage == 2 ? Objective::kStage2NoAc : Objective::kFull;
    case Variant::kANet:
    case Variant::kANetAtt: return stage == 2 ? Objective::kStage2 : Objective::kFull;
  }
  return Objective::kFull;
}

void freeze_backbone(Model<float>& model) { model.store().set_trainable(Partition::kBackbone, false); }

std::string step_record_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["global_step"] = r.global_step;
  j["stage"] = r.report.stage;
  j["lr"] = r.lr;
  j["objective"] = objective_name(r.report.objective);
  for (Term t : {Term::kTriF, Term::kIdF, Term::kTriG, Term::kTriJ, Term::kIdJ, Term::kAcId, Term::kAcTri}) {
    if (auto v = r.report.value(t)) j[term_name(t)] = *v;
  }
  if (!r.report.att.empty()) {
    auto& att = j["att"] = nlohmann::ordered_json::array();
    for (const auto& v : r.report.att) att.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr));
    j["masked_counts"] = r.report.masked_counts;
  }
  if (r.report.tri_g) j["pattern_excluded"] = r.report.pattern_excluded;
  j["total"] = r.report.total;
  return j.dump();
}

namespace {

ModelConfig adapt(ModelConfig mc, const Dataset& train, const TrainConfig& tc) {
  mc.variant = tc.variant;
  mc.id_count = static_cast<int>(train.identities().size());
  mc.attribute_classes = train.meta.attribute_classes;
  mc.init_seed = tc.seed;
  return mc;
}

}  // namespace

Trainer::Trainer(const Dataset& train_set, ModelConfig model_config, TrainConfig config)
    : train_(train_set),
      config_(std::move(config)),
      model_((config_.validate(), adapt(std::move(model_config), train_set, config_))),
      optimizer_(config_.amsgrad),
      rng_(config_.seed) {
  const auto ids = train_.identities();
  if (ids.size() < 2) throw std::invalid_argument("train: dataset needs at least 2 identities");
  if (static_cast<std::size_t>(config_.p) > ids.size()) {
    throw std::invalid_argument("train: P=" + std::to_string(config_.p) + " exceeds " + std::to_string(ids.size()) +
                                " training identities");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) class_of_[ids[i]] = static_cast<int>(i);
}

int Trainer::steps_per_epoch() const {
  if (config_.steps_per_epoch > 0) return config_.steps_per_epoch;
  const std::size_t batch = static_cast<std::size_t>(config_.p * config_.k);
  return static_cast<int>(std::max<std::size_t>(1, train_.samples.size() / batch));
}

StepRecord Trainer::step(int epoch, int step_in_epoch, long global_step) {
  const int stage = stage_of(config_, epoch);
  const PKBatch batch = pk_sample(train_, config_.p, config_.k, rng_);

  std::vector<Sample> samples;
  samples.reserve(batch.indices.size());
  BatchTargets targets;
  for (std::size_t idx : batch.indices) {
    samples.push_back(augment(train_.samples[idx], rng_, config_.augment));
    targets.ids.push_back(class_of_.at(samples.back().identity));
    targets.attributes.push_back(samples.back().attributes);
  }
  std::vector<const Image*> images;
  for (const auto& s : samples) images.push_back(&s.image);

  ForwardOptions opts;
  opts.freeze_backbone = stage == 2;
  Graph<float> g;
  const Features<float> features = model_.forward(g, stack_images(images), opts);
  LossOutput<float> loss = compute_loss(features, targets, config_.weights, objective_for(config_, stage), stage,
                                        config_.pair_space);
  model_.store().zero_grad();
  g.backward(loss.total);

  StepRecord rec;
  rec.epoch = epoch;
  rec.step = step_in_epoch;
  rec.global_step = global_step;
  rec.lr = learning_rate(config_, epoch);
  rec.report = loss.report;
  optimizer_.step(model_.store().parameters(), rec.lr);
  return rec;
}

void Trainer::run_epoch(const TrainHooks& hooks) {
  if (epoch_ >= config_.epochs_total) return;
  if (stage_of(config_, epoch_) == 2) freeze_backbone(model_);
  const int steps = steps_per_epoch();
  for (int s = 0; s < steps; ++s) {
    StepRecord rec = step(epoch_, s, global_step_++);
    if (hooks.on_step) hooks.on_step(rec);
  }
  if (hooks.on_epoch_end) hooks.on_epoch_end(epoch_, model_);
  ++epoch_;
}

void Trainer::run(const TrainHooks& hooks) {
  while (epoch_ < config_.epochs_total) run_epoch(hooks);
}

std::string Trainer::rng_state() const {
  std::ostringstream s;
  s << rng_ << ' ' << global_step_;
  return s.str();
}

void Trainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, model_, &optimizer_, static_cast<std::uint32_t>(epoch_), rng_state());
}

void Trainer::resume(const std::filesystem::path& path) {
  LoadOptions opts;
  opts.require_moments = false;
  const Checkpoint c = load_checkpoint(path, model_, &optimizer_, opts);
  std::istringstream s(c.rng_state);
  Rng rng;
  long global = 0;
  if (!(s >> rng >> global)) throw CheckpointError(path.string() + ": unreadable sampler state");
  rng_ = rng;
  global_step_ = global;
  epoch_ = static_cast<int>(c.epoch);
  if (stage_of(config_, epoch_) == 2) freeze_backbone(model_);
}

}  // namespace anet
