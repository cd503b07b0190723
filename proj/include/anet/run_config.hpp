#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "anet/trainer.hpp"

namespace anet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSpec {
  /// Folder with train/query/gallery manifests; empty means generate the
  /// synthetic set in memory from `synthetic`.
  std::string dir;
  SyntheticSpec synthetic;
  int train_ids = 64;
  int query_per_id = 2;
};

/// Everything a run needs, resolved before any module starts.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataSpec data;
  std::string out = "runs/default";
  /// Save a checkpoint every N epochs (0: final only).
  int checkpoint_every = 0;

  /// Sets one dotted key, e.g. "train.lr" or "loss.lambda_a".
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Flat "key = value" text; parsing it back gives an identical config.
  std::string to_text() const;
  void validate() const;
};

/// Lines are "key = value", "# comment" or "[section]"; keys under a
/// section header get the "section." prefix. Errors cite source:line.
RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
void write_config(const RunConfig& config, const std::filesystem::path& path);

/// Applies "key=value" overrides in order.
void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides);

}  // namespace anet
