#include "anet/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace anet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + value + "' as a number");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int>(key, item));
  }
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Entry {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Entry int_entry(T RunConfig::*outer, int T::*field) {
  return {[=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*field = parse_number<int>(k, v); },
          [=](const RunConfig& c) { return std::to_string((c.*outer).*field); }};
}

template <typename T>
Entry double_entry(T RunConfig::*outer, double T::*field) {
  return {
      [=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*field = parse_number<double>(k, v); },
      [=](const RunConfig& c) { return format_double((c.*outer).*field); }};
}

// Ordered by key so the serialized form is stable.
const std::map<std::string, Entry>& registry() {
  static const std::map<std::string, Entry> entries = [] {
    std::map<std::string, Entry> e;
    e["out"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.out = v; },
                [](const RunConfig& c) { return c.out; }};
    e["seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                   c.train.seed = parse_number<std::uint64_t>(k, v);
                   c.model.init_seed = c.train.seed;
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }};
    e["variant"] = {[](RunConfig& c, const std::string&, const std::string& v) {
                      try {
                        c.train.variant = c.model.variant = parse_variant(v);
                      } catch (const std::exception& ex) {
                        throw ConfigError(ex.what());
                      }
                    },
                    [](const RunConfig& c) { return std::string(variant_name(c.train.variant)); }};
    e["checkpoint_every"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.checkpoint_every = parse_number<int>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.checkpoint_every); }};

    e["data.dir"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.data.dir = v; },
                     [](const RunConfig& c) { return c.data.dir; }};
    e["data.train_ids"] = int_entry(&RunConfig::data, &DataSpec::train_ids);
    e["data.query_per_id"] = int_entry(&RunConfig::data, &DataSpec::query_per_id);
    auto synth_int = [](int SyntheticSpec::*field) -> Entry {
      return {[=](RunConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.*field = parse_number<int>(k, v); },
              [=](const RunConfig& c) { return std::to_string(c.data.synthetic.*field); }};
    };
    e["data.ids"] = synth_int(&SyntheticSpec::id_count);
    e["data.per_id"] = synth_int(&SyntheticSpec::images_per_id);
    e["data.image_size"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                              c.data.synthetic.image_size = parse_number<int>(k, v);
                              c.model.backbone.image_size = c.data.synthetic.image_size;
                            },
                            [](const RunConfig& c) { return std::to_string(c.data.synthetic.image_size); }};
    e["data.color_classes"] = synth_int(&SyntheticSpec::color_classes);
    e["data.type_classes"] = synth_int(&SyntheticSpec::type_classes);
    e["data.cameras"] = synth_int(&SyntheticSpec::cameras);
    e["data.seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                        c.data.synthetic.seed = parse_number<std::uint64_t>(k, v);
                      },
                      [](const RunConfig& c) { return std::to_string(c.data.synthetic.seed); }};

    e["backbone.channels"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                c.model.backbone.stage_channels = parse_int_list(k, v);
                              },
                              [](const RunConfig& c) { return format_int_list(c.model.backbone.stage_channels); }};
    e["backbone.blocks_per_stage"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                        c.model.backbone.blocks_per_stage = parse_number<int>(k, v);
                                      },
                                      [](const RunConfig& c) { return std::to_string(c.model.backbone.blocks_per_stage); }};
    e["backbone.ibn"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.backbone.ibn = parse_bool(k, v); },
                         [](const RunConfig& c) { return std::string(c.model.backbone.ibn ? "true" : "false"); }};

    e["model.s_f"] = int_entry(&RunConfig::model, &ModelConfig::s_f);
    e["model.s_a"] = int_entry(&RunConfig::model, &ModelConfig::s_a);
    e["model.s_j"] = int_entry(&RunConfig::model, &ModelConfig::s_j);
    e["model.se_reduction"] = int_entry(&RunConfig::model, &ModelConfig::se_reduction);
    e["model.cbam_reduction"] = int_entry(&RunConfig::model, &ModelConfig::cbam_reduction);
    e["model.cbam_kernel"] = int_entry(&RunConfig::model, &ModelConfig::cbam_kernel);
    e["model.branch"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                           if (v == "attention") c.model.branch = BranchKind::kAttention;
                           else if (v == "fc") c.model.branch = BranchKind::kFc;
                           else throw ConfigError(k + ": expected attention or fc, got '" + v + "'");
                         },
                         [](const RunConfig& c) {
                           return std::string(c.model.branch == BranchKind::kFc ? "fc" : "attention");
                         }};

    e["train.epochs_total"] = int_entry(&RunConfig::train, &TrainConfig::epochs_total);
    e["train.stage1_epochs"] = int_entry(&RunConfig::train, &TrainConfig::stage1_epochs);
    e["train.lr"] = double_entry(&RunConfig::train, &TrainConfig::lr);
    e["train.decay_factor"] = double_entry(&RunConfig::train, &TrainConfig::decay_factor);
    e["train.decay_epochs"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                 c.train.decay_epochs = parse_int_list(k, v);
                               },
                               [](const RunConfig& c) { return format_int_list(c.train.decay_epochs); }};
    e["train.p"] = int_entry(&RunConfig::train, &TrainConfig::p);
    e["train.k"] = int_entry(&RunConfig::train, &TrainConfig::k);
    e["train.steps_per_epoch"] = int_entry(&RunConfig::train, &TrainConfig::steps_per_epoch);
    e["train.augment"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                            c.train.augment.enabled = parse_bool(k, v);
                          },
                          [](const RunConfig& c) { return std::string(c.train.augment.enabled ? "true" : "false"); }};
    e["train.pair_space"] = {[](RunConfig& c, const std::string&, const std::string& v) {
                               try {
                                 c.train.pair_space = parse_pair_space(v);
                               } catch (const std::exception& ex) {
                                 throw ConfigError(ex.what());
                               }
                             },
                             [](const RunConfig& c) { return std::string(pair_space_name(c.train.pair_space)); }};
    e["train.no_ac_two_stage"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                    c.train.no_ac_two_stage = parse_bool(k, v);
                                  },
                                  [](const RunConfig& c) { return std::string(c.train.no_ac_two_stage ? "true" : "false"); }};

    auto loss = [](double LossWeights::*field) -> Entry {
      return {[=](RunConfig& c, const std::string& k, const std::string& v) { c.train.weights.*field = parse_number<double>(k, v); },
              [=](const RunConfig& c) { return format_double(c.train.weights.*field); }};
    };
    e["loss.lambda_a"] = loss(&LossWeights::lambda_a);
    e["loss.lambda_g"] = loss(&LossWeights::lambda_g);
    e["loss.lambda"] = loss(&LossWeights::lambda);
    e["loss.margin"] = loss(&LossWeights::margin);
    e["loss.epsilon"] = loss(&LossWeights::epsilon);

    auto ams = [](double AmsgradOptions::*field) -> Entry {
      return {[=](RunConfig& c, const std::string& k, const std::string& v) { c.train.amsgrad.*field = parse_number<double>(k, v); },
              [=](const RunConfig& c) { return format_double(c.train.amsgrad.*field); }};
    };
    e["amsgrad.beta1"] = ams(&AmsgradOptions::beta1);
    e["amsgrad.beta2"] = ams(&AmsgradOptions::beta2);
    e["amsgrad.eps"] = ams(&AmsgradOptions::eps);
    return e;
  }();
  return entries;
}

const Entry& entry(const std::string& key) {
  const auto& r = registry();
  auto it = r.find(key);
  if (it == r.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { entry(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return entry(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [key, e] : registry()) out.push_back(key);
    return out;
  }();
  return k;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& key : keys()) out += key + " = " + get(key) + "\n";
  return out;
}

void RunConfig::validate() const {
  try {
    train.validate();
    ModelConfig m = model;
    m.variant = train.variant;
    m.backbone.image_size = data.synthetic.image_size;
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.train_ids < 2) throw ConfigError("data.train_ids must be >= 2");
  if (data.query_per_id < 1) throw ConfigError("data.query_per_id must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (out.empty()) throw ConfigError("out must not be empty");
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig config;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    line = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      config.set(section.empty() ? key : section + "." + key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

void write_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << config.to_text();
  if (!out) throw ConfigError("failed writing " + path.string());
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    config.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
}

}  // namespace anet
