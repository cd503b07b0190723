#include "anet/experiment.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace anet {

namespace fs = std::filesystem;

DataSplit generate_split(const DataSpec& spec) {
  if (spec.train_ids >= spec.synthetic.id_count) {
    throw DataError("data.train_ids (" + std::to_string(spec.train_ids) + ") must be below data.ids (" +
                    std::to_string(spec.synthetic.id_count) + ")");
  }
  HoldoutSplit h = split_holdout(gen_synthetic(spec.synthetic), spec.train_ids, spec.query_per_id);
  return {std::move(h.train), std::move(h.query), std::move(h.gallery)};
}

DataSplit load_split(const DataSpec& spec) {
  if (spec.dir.empty()) return generate_split(spec);
  ManifestOptions opts;
  opts.attribute_classes = std::vector<int>{spec.synthetic.color_classes, spec.synthetic.type_classes};
  DataSplit out;
  const fs::path dir(spec.dir);
  opts.split = Split::kTrain;
  out.train = load_manifest(dir / kTrainManifest, opts);
  opts.split = Split::kQuery;
  out.query = load_manifest(dir / kQueryManifest, opts);
  opts.split = Split::kGallery;
  out.gallery = load_manifest(dir / kGalleryManifest, opts);
  const Index side = spec.synthetic.image_size;
  for (const Dataset* d : {&out.train, &out.query, &out.gallery}) {
    for (const auto& s : d->samples) {
      if (s.image.dim(1) != side || s.image.dim(2) != side) {
        throw DataError(s.path + ": image is " + std::to_string(s.image.dim(2)) + "x" + std::to_string(s.image.dim(1)) +
                        ", config expects data.image_size = " + std::to_string(side));
      }
    }
  }
  return out;
}

void write_split(const DataSplit& split, const fs::path& dir) {
  write_manifest(split.train, dir / kTrainManifest, dir / "images" / "train");
  write_manifest(split.query, dir / kQueryManifest, dir / "images" / "query");
  write_manifest(split.gallery, dir / kGalleryManifest, dir / "images" / "gallery");
}

std::vector<Selector> report_selectors(Variant v) {
  switch (v) {
    case Variant::kBaseline: return {Selector::kF};
    case Variant::kVan: return {Selector::kF, Selector::kFA};
    case Variant::kANet: return {Selector::kF, Selector::kJ};
    case Variant::kANetAtt:
    case Variant::kANetNoAc: return {Selector::kJ};
  }
  return {};
}

TrainOutcome train_model(const RunConfig& config, const Dataset& train, const TrainHooks& hooks) {
  config.validate();
  ModelConfig mc = config.model;
  mc.backbone.image_size = config.data.synthetic.image_size;
  TrainConfig tc = config.train;
  Trainer trainer(train, mc, tc);
  std::vector<StepRecord> steps;
  TrainHooks inner = hooks;
  inner.on_step = [&](const StepRecord& r) {
    steps.push_back(r);
    if (hooks.on_step) hooks.on_step(r);
  };
  trainer.run(inner);
  return {std::move(trainer.model()), std::move(steps)};
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const AblationRow* AblationTable::row(Variant v) const {
  for (const auto& r : rows)
    if (r.variant == v) return &r;
  return nullptr;
}

std::string AblationTable::to_json() const {
  nlohmann::ordered_json j;
  j["seeds"] = seeds;
  auto& rows_json = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["variant"] = variant_name(r.variant);
    for (const auto& [sel, c] : r.cells) {
      nlohmann::ordered_json cell;
      cell["median_map"] = c.median_map;
      cell["median_r1"] = c.median_r1;
      cell["median_r5"] = c.median_r5;
      cell["map"] = c.map;
      cell["r1"] = c.r1;
      cell["r5"] = c.r5;
      row["cells"][selector_name(sel)] = cell;
    }
    row["errors"] = r.errors;
    rows_json.push_back(row);
  }
  return j.dump(2);
}

std::string AblationTable::to_text() const {
  std::ostringstream out;
  out << std::left << std::setw(12) << "variant";
  for (const char* sel : {"f", "fa", "j"}) out << std::setw(24) << (std::string(sel) + " mAP/R1/R5");
  out << "errors\n";
  out << std::fixed << std::setprecision(3);
  for (const auto& r : rows) {
    out << std::setw(12) << variant_name(r.variant);
    for (Selector sel : {Selector::kF, Selector::kFA, Selector::kJ}) {
      auto it = r.cells.find(sel);
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(3);
      if (it == r.cells.end() || it->second.map.empty()) cell << "-";
      else cell << it->second.median_map << "/" << it->second.median_r1 << "/" << it->second.median_r5;
      out << std::setw(24) << cell.str();
    }
    out << r.errors.size() << "\n";
  }
  return out.str();
}

AblationTable ablate(const RunConfig& base, const DataSplit& split, const std::vector<Variant>& variants,
                     const std::vector<std::uint64_t>& seeds, const AblationProgress& progress,
                     const AblationObserver& observer) {
  AblationTable table;
  table.seeds = seeds;
  for (Variant v : variants) {
    AblationRow row;
    row.variant = v;
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = base;
      cfg.set("variant", variant_name(v));
      cfg.set("seed", std::to_string(seed));
      if (progress) progress(v, seed, "training");
      try {
        TrainOutcome outcome = train_model(cfg, split.train, observer.hooks ? observer.hooks(v, seed) : TrainHooks{});
        for (Selector sel : report_selectors(v)) {
          const EvalReport rep = evaluate_fixed(split.query, split.gallery, outcome.model, sel);
          Cell& c = row.cells[sel];
          c.map.push_back(rep.map);
          c.r1.push_back(rep.r1);
          c.r5.push_back(rep.r5);
        }
        if (observer.finished) observer.finished(v, seed, outcome);
        if (progress) progress(v, seed, "done");
      } catch (const std::exception& e) {
        row.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
        if (progress) progress(v, seed, std::string("failed: ") + e.what());
      }
    }
    for (auto& [sel, c] : row.cells) {
      c.median_map = median(c.map);
      c.median_r1 = median(c.r1);
      c.median_r5 = median(c.r5);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace anet
