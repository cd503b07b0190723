#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "anet/experiment.hpp"
#include "anet/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace anet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kRuntime = 2, kVerification = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

bool non_empty_dir(const fs::path& dir) { return fs::exists(dir) && !fs::is_empty(dir); }

// Base config: file (if any), then data-folder keys, then flag overrides.
RunConfig resolve(const std::string& config_path, const std::string& data_dir, const std::vector<std::string>& sets) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
  if (!data_dir.empty()) {
    const fs::path data_cfg = fs::path(data_dir) / "config.txt";
    if (fs::exists(data_cfg)) {
      const RunConfig d = load_config(data_cfg);
      for (const auto& key : RunConfig::keys())
        if (key.rfind("data.", 0) == 0) cfg.set(key, d.get(key));
    }
    cfg.data.dir = data_dir;
  }
  apply_overrides(cfg, sets);
  cfg.validate();
  return cfg;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  std::string out, config;
  std::uint64_t seed = 1;
  int ids = 0, per_id = 0, image_size = 0, train_ids = 0, query_per_id = 0;
  bool force = false;
};

int gen_data(const GenDataArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
  cfg.data.synthetic.seed = a.seed;
  if (a.ids) {
    cfg.data.synthetic.id_count = a.ids;
    if (!a.train_ids) cfg.data.train_ids = std::max(1, a.ids * 4 / 5);
  }
  if (a.per_id) {
    cfg.data.synthetic.images_per_id = a.per_id;
    if (!a.query_per_id) cfg.data.query_per_id = std::max(1, a.per_id / 4);
  }
  if (a.image_size) cfg.set("data.image_size", std::to_string(a.image_size));
  if (a.train_ids) cfg.data.train_ids = a.train_ids;
  if (a.query_per_id) cfg.data.query_per_id = a.query_per_id;
  cfg.data.dir = a.out;
  if (cfg.data.train_ids >= cfg.data.synthetic.id_count || cfg.data.train_ids < 1) {
    throw UsageError("--train-ids must lie in [1, ids)");
  }

  const fs::path out(a.out);
  if (non_empty_dir(out)) {
    if (!a.force) throw UsageError(out.string() + " exists and is not empty; pass --force to overwrite");
    fs::remove_all(out);
  }
  fs::create_directories(out);
  DataSpec spec = cfg.data;
  spec.dir.clear();
  const DataSplit split = generate_split(spec);
  write_split(split, out);
  write_config(cfg, out / "config.txt");
  std::cout << "wrote " << split.train.samples.size() << " train, " << split.query.samples.size() << " query, "
            << split.gallery.samples.size() << " gallery images to " << out.string() << "\n";
  return kOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config, variant, out, data;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
};

int train(const TrainArgs& a) {
  std::vector<std::string> sets = a.sets;
  if (!a.variant.empty()) sets.push_back("variant=" + a.variant);
  if (!a.out.empty()) sets.push_back("out=" + a.out);
  if (a.seed >= 0) sets.push_back("seed=" + std::to_string(a.seed));
  const RunConfig cfg = resolve(a.config, a.data, sets);

  const fs::path out(cfg.out);
  fs::create_directories(out);
  write_config(cfg, out / "config.txt");
  std::cout << cfg.to_text() << std::flush;

  const DataSplit split = load_split(cfg.data);
  std::ofstream log(out / "loss.jsonl");
  if (!log) throw std::runtime_error("cannot write " + (out / "loss.jsonl").string());

  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc = cfg.model;
  mc.backbone.image_size = cfg.data.synthetic.image_size;
  Trainer trainer(split.train, mc, cfg.train);
  TrainHooks hooks;
  double epoch_total = 0.0;
  int epoch_steps = 0;
  hooks.on_step = [&](const StepRecord& r) {
    log << step_record_json(r) << "\n";
    epoch_total += r.report.total;
    ++epoch_steps;
  };
  hooks.on_epoch_end = [&](int epoch, Model<float>&) {
    std::fprintf(stderr, "epoch %d stage %d mean loss %.5f (%.1fs)\n", epoch, stage_of(cfg.train, epoch),
                 epoch_total / std::max(1, epoch_steps), seconds_since(t0));
    epoch_total = 0.0;
    epoch_steps = 0;
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_e%03d.ckpt", epoch + 1);
      trainer.save(out / name);
    }
  };
  // The hook needs the trainer for saving, so epochs are driven here.
  while (trainer.epoch() < cfg.train.epochs_total) trainer.run_epoch(hooks);
  trainer.save(out / "final.ckpt");
  log.flush();
  std::cout << "final checkpoint: " << (out / "final.ckpt").string() << "\n";
  return kOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, selector = "f", protocol = "fixed", config, out;
  int repeats = 10;
  std::uint64_t seed = 1;
  std::vector<std::string> sets;
};

RunConfig config_for_checkpoint(const std::string& checkpoint, const std::string& config, const std::string& data,
                                const std::vector<std::string>& sets) {
  std::string path = config;
  if (path.empty()) {
    const fs::path beside = fs::path(checkpoint).parent_path() / "config.txt";
    if (!fs::exists(beside)) throw UsageError("no --config given and " + beside.string() + " does not exist");
    path = beside.string();
  }
  return resolve(path, data, sets);
}

Model<float> load_model(const RunConfig& cfg, const DataSplit& split, const std::string& checkpoint) {
  ModelConfig mc = cfg.model;
  mc.variant = cfg.train.variant;
  mc.backbone.image_size = cfg.data.synthetic.image_size;
  mc.id_count = static_cast<int>(split.train.identities().size());
  mc.attribute_classes = {cfg.data.synthetic.color_classes, cfg.data.synthetic.type_classes};
  Model<float> model(mc);
  load_checkpoint(checkpoint, model);
  return model;
}

int eval(const EvalArgs& a) {
  const RunConfig cfg = config_for_checkpoint(a.checkpoint, a.config, a.data, a.sets);
  const Selector sel = parse_selector(a.selector);
  if (!selector_supported(cfg.train.variant, sel)) {
    throw UsageError(std::string("selector ") + a.selector + " is not available for variant " +
                     variant_name(cfg.train.variant));
  }
  if (a.protocol != "fixed" && a.protocol != "vehicleid") throw UsageError("--protocol must be fixed or vehicleid");

  const DataSplit split = load_split(cfg.data);
  Model<float> model = load_model(cfg, split, a.checkpoint);
  EvalReport report;
  if (a.protocol == "fixed") {
    report = evaluate_fixed(split.query, split.gallery, model, sel);
  } else {
    Dataset test = split.query;
    test.samples.insert(test.samples.end(), split.gallery.samples.begin(), split.gallery.samples.end());
    report = vehicleid_protocol(test, model, sel, a.repeats, a.seed);
  }
  for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  const std::string json = report.to_json();
  if (a.out.empty()) std::cout << json << "\n";
  else write_text(a.out, json + "\n");
  std::fprintf(stderr, "mAP %.4f  R1 %.4f  R5 %.4f\n", report.map, report.r1, report.r5);
  return kOk;
}

// ---- ablate -----------------------------------------------------------------

struct AblateArgs {
  std::string data, out, config, variants = "baseline,van,anet_no_ac,anet,anet_att";
  int seeds = 3;
  std::vector<std::string> sets;
};

int ablate_cmd(const AblateArgs& a) {
  if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
  std::vector<std::string> sets = a.sets;
  sets.push_back("out=" + a.out);
  const RunConfig cfg = resolve(a.config, a.data, sets);
  std::vector<Variant> variants;
  std::stringstream ss(a.variants);
  for (std::string v; std::getline(ss, v, ',');) {
    try {
      variants.push_back(parse_variant(v));
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  std::vector<std::uint64_t> seeds;
  for (int s = 1; s <= a.seeds; ++s) seeds.push_back(static_cast<std::uint64_t>(s));

  const fs::path out(a.out);
  fs::create_directories(out);
  write_config(cfg, out / "config.txt");
  const DataSplit split = load_split(cfg.data);
  const auto t0 = std::chrono::steady_clock::now();
  const AblationTable table = ablate(cfg, split, variants, seeds, [&](Variant v, std::uint64_t seed, const std::string& s) {
    std::fprintf(stderr, "[%7.1fs] %s seed %llu: %s\n", seconds_since(t0), variant_name(v),
                 static_cast<unsigned long long>(seed), s.c_str());
  });
  write_text(out / "ablation.json", table.to_json() + "\n");
  write_text(out / "ablation.txt", table.to_text());
  std::cout << table.to_text();
  return kOk;
}

// ---- gradcheck --------------------------------------------------------------

int gradcheck(const std::string& scope) {
  std::vector<GradCheckReport> reports;
  if (scope == "primitive" || scope == "all") reports = primitive_suite();
  if (scope == "composed" || scope == "all") {
    auto composed = composed_suite();
    reports.insert(reports.end(), composed.begin(), composed.end());
  }
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << r.summary() << "\n";
    ok = ok && r.passed;
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (" << reports.size() << " checks)\n";
  return ok ? kOk : kVerification;
}

// ---- export-maps ------------------------------------------------------------

struct ExportArgs {
  std::string checkpoint, data, out, config;
  int count = 4;
};

int export_maps(const ExportArgs& a) {
  const RunConfig cfg = config_for_checkpoint(a.checkpoint, a.config, a.data, {});
  if (!has_distillation(cfg.train.variant)) {
    throw UsageError(std::string("activation maps need variant anet or anet_no_ac, checkpoint is ") +
                     variant_name(cfg.train.variant));
  }
  const DataSplit split = load_split(cfg.data);
  Model<float> model = load_model(cfg, split, a.checkpoint);
  std::vector<const Image*> images;
  for (const auto& s : split.query.samples) {
    if (static_cast<int>(images.size()) >= a.count) break;
    images.push_back(&s.image);
  }
  for (const auto& p : export_activation_maps(model, images, a.out)) std::cout << p.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-guided vehicle re-identification: data, training, evaluation"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset with train/query/gallery manifests");
  gen_cmd->add_option("--out", gen.out, "Output folder")->required();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--spec,--config", gen.config, "Config file with data.* keys");
  gen_cmd->add_option("--ids", gen.ids, "Number of identities");
  gen_cmd->add_option("--per-id", gen.per_id, "Images per identity");
  gen_cmd->add_option("--image-size", gen.image_size, "Image side in pixels");
  gen_cmd->add_option("--train-ids", gen.train_ids, "Identities used for training");
  gen_cmd->add_option("--query-per-id", gen.query_per_id, "Query images per held-out identity");
  gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output folder");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one variant");
  train_cmd->add_option("--config", tr.config, "Config file");
  train_cmd->add_option("--variant", tr.variant, "baseline|van|anet|anet_att|anet_no_ac");
  train_cmd->add_option("--out", tr.out, "Run folder");
  train_cmd->add_option("--data", tr.data, "Data folder from gen-data (default: generate in memory)");
  train_cmd->add_option("--seed", tr.seed, "Training seed");
  train_cmd->add_option("--set", tr.sets, "key=value override (repeatable)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Data folder");
  eval_cmd->add_option("--selector", ev.selector, "f|j|fa");
  eval_cmd->add_option("--protocol", ev.protocol, "fixed|vehicleid");
  eval_cmd->add_option("--repeats", ev.repeats, "vehicleid repeats");
  eval_cmd->add_option("--seed", ev.seed, "vehicleid gallery sampling seed");
  eval_cmd->add_option("--config", ev.config, "Config (default: config.txt beside the checkpoint)");
  eval_cmd->add_option("--out", ev.out, "Write the report here instead of stdout");
  eval_cmd->add_option("--set", ev.sets, "key=value override (repeatable)");

  AblateArgs ab;
  auto* ablate_sub = app.add_subcommand("ablate", "Train and evaluate every variant over several seeds");
  ablate_sub->add_option("--data", ab.data, "Data folder (default: generate in memory)");
  ablate_sub->add_option("--seeds", ab.seeds, "Seeds per variant (1..k)");
  ablate_sub->add_option("--out", ab.out, "Output folder")->required();
  ablate_sub->add_option("--config", ab.config, "Config file");
  ablate_sub->add_option("--variants", ab.variants, "Comma-separated variants");
  ablate_sub->add_option("--set", ab.sets, "key=value override (repeatable)");

  std::string scope = "all";
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc_cmd->add_option("--scope", scope, "primitive|composed|all")
      ->check(CLI::IsMember({"primitive", "composed", "all"}));

  ExportArgs ex;
  auto* ex_cmd = app.add_subcommand("export-maps", "Write G and G_reid activation maps as PGM");
  ex_cmd->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
  ex_cmd->add_option("--data", ex.data, "Data folder");
  ex_cmd->add_option("--out", ex.out, "Output folder")->required();
  ex_cmd->add_option("--count", ex.count, "Number of query images");
  ex_cmd->add_option("--config", ex.config, "Config (default: config.txt beside the checkpoint)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_cmd) return train(tr);
    if (*eval_cmd) return eval(ev);
    if (*ablate_sub) return ablate_cmd(ab);
    if (*gc_cmd) return gradcheck(scope);
    if (*ex_cmd) return export_maps(ex);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
