#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "anet/checkpoint.hpp"
#include "anet/data.hpp"
#include "anet/losses.hpp"
#include "anet/optim.hpp"

namespace anet {

struct TrainConfig {
  Variant variant = Variant::kANet;
  int epochs_total = 210;
  int stage1_epochs = 150;
  double lr = 0.0006;
  double decay_factor = 0.1;
  std::vector<int> decay_epochs{60, 120, 150};
  LossWeights weights;
  AmsgradOptions amsgrad;
  int p = 4;
  int k = 4;
  /// 0: one pass worth of batches, max(1, train images / (P K)).
  int steps_per_epoch = 0;
  AugmentPolicy augment;
  PairSpace pair_space = PairSpace::kJ;
  /// anet_no_ac only: keep the frozen-backbone second stage (without AC).
  bool no_ac_two_stage = false;
  std::uint64_t seed = 1;

  void validate() const;
};

/// lr * decay_factor^(number of decay epochs <= epoch).
double learning_rate(const TrainConfig& config, int epoch);
bool is_two_stage(const TrainConfig& config);
int stage_of(const TrainConfig& config, int epoch);
Objective objective_for(const TrainConfig& config, int stage);

/// Marks the backbone partition non-trainable.
void freeze_backbone(Model<float>& model);

struct StepRecord {
  int epoch = 0;
  int step = 0;
  long global_step = 0;
  double lr = 0.0;
  LossReport report;
};

/// One JSON object (single line) per step.
std::string step_record_json(const StepRecord& record);

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  /// Called after the last step of each epoch.
  std::function<void(int epoch, Model<float>&)> on_epoch_end;
};

class Trainer {
 public:
  /// id_count and attribute_classes of `model_config` are taken from the
  /// training set; init_seed from the train seed.
  Trainer(const Dataset& train_set, ModelConfig model_config, TrainConfig config);

  /// Runs the remaining epochs.
  void run(const TrainHooks& hooks = {});
  void run_epoch(const TrainHooks& hooks = {});
  StepRecord step(int epoch, int step_in_epoch, long global_step);

  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  Amsgrad<float>& optimizer() { return optimizer_; }
  const TrainConfig& config() const { return config_; }
  int epoch() const { return epoch_; }
  int steps_per_epoch() const;

  std::string rng_state() const;
  void save(const std::filesystem::path& path) const;
  /// Restores parameters, buffers, moments, epoch and sampler state.
  void resume(const std::filesystem::path& path);

 private:
  const Dataset& train_;
  TrainConfig config_;
  Model<float> model_;
  Amsgrad<float> optimizer_;
  Rng rng_;
  int epoch_ = 0;
  long global_step_ = 0;
  std::map<int, int> class_of_;  // dataset id -> classifier index
};

}  // namespace anet
