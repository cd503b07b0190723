#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "anet/evaluator.hpp"
#include "anet/run_config.hpp"

namespace anet {

struct DataSplit {
  Dataset train;
  Dataset query;
  Dataset gallery;
};

/// Manifest file names inside a data folder.
inline constexpr const char* kTrainManifest = "train.jsonl";
inline constexpr const char* kQueryManifest = "query.jsonl";
inline constexpr const char* kGalleryManifest = "gallery.jsonl";

/// Generates the synthetic set and splits off held-out identities.
DataSplit generate_split(const DataSpec& spec);
/// Loads the three manifests from spec.dir, or generates when dir is empty.
/// Image sizes are checked against spec.synthetic.image_size.
DataSplit load_split(const DataSpec& spec);
void write_split(const DataSplit& split, const std::filesystem::path& dir);

/// Test-time selectors reported per variant.
std::vector<Selector> report_selectors(Variant v);

struct TrainOutcome {
  Model<float> model;
  std::vector<StepRecord> steps;
};

/// Trains from scratch under config; hooks are forwarded to the trainer.
TrainOutcome train_model(const RunConfig& config, const Dataset& train, const TrainHooks& hooks = {});

struct Cell {
  std::vector<double> map, r1, r5;  // one entry per seed
  double median_map = 0.0, median_r1 = 0.0, median_r5 = 0.0;
};

struct AblationRow {
  Variant variant = Variant::kBaseline;
  std::map<Selector, Cell> cells;
  std::vector<std::string> errors;  // "seed N: message"
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  std::string to_json() const;
  /// Aligned text table, one line per variant.
  std::string to_text() const;
  const AblationRow* row(Variant v) const;
};

double median(std::vector<double> values);

using AblationProgress = std::function<void(Variant, std::uint64_t seed, const std::string& status)>;

/// Optional per-cell access to training: hooks for the run and the finished
/// model with its step records.
struct AblationObserver {
  std::function<TrainHooks(Variant, std::uint64_t seed)> hooks;
  std::function<void(Variant, std::uint64_t seed, TrainOutcome&)> finished;
};

/// Trains every variant for every seed on the same split and scores each
/// reported selector with the fixed protocol. A failing cell is recorded and
/// the run continues.
AblationTable ablate(const RunConfig& base, const DataSplit& split, const std::vector<Variant>& variants,
                     const std::vector<std::uint64_t>& seeds, const AblationProgress& progress = {},
                     const AblationObserver& observer = {});

}  // namespace anet
