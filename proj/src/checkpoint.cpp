#include "anet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace anet {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[5] = {'A', 'N', 'E', 'T', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_record(std::string& out, const CheckpointRecord& r) {
  put_u32(out, static_cast<std::uint32_t>(r.name.size()));
  out += r.name;
  put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
  for (Index d : r.shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (float f : r.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(source_ + ": truncated at byte " + std::to_string(bytes_.size()) + " while reading " + what);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    const std::uint64_t lo = u32(what);
    return lo | (static_cast<std::uint64_t>(u32(what)) << 32);
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  CheckpointRecord record() {
    CheckpointRecord r;
    const std::uint32_t len = u32("record name length");
    r.name = str(len, "record name");
    const std::uint32_t rank = u32("record rank");
    if (rank > 8) throw CheckpointError(source_ + ": record '" + r.name + "' has implausible rank " + std::to_string(rank));
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      r.shape.push_back(static_cast<Index>(u32("record dims")));
      count *= static_cast<std::size_t>(r.shape.back());
    }
    need(count * 4, "record payload");
    r.data.resize(count);
    for (auto& f : r.data) f = std::bit_cast<float>(u32("record payload"));
    return r;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

CheckpointRecord to_record(const std::string& name, const Tensor<float>& t) {
  return {name, t.shape(), std::vector<float>(t.data(), t.data() + t.size())};
}

Tensor<float> to_tensor(const CheckpointRecord& r) {
  Tensor<float> t(r.shape);
  std::memcpy(t.data(), r.data.data(), r.data.size() * sizeof(float));
  return t;
}

}  // namespace

std::uint64_t config_digest(const ModelConfig& c) {
  std::ostringstream s;
  s << "backbone.stage_channels=";
  for (int ch : c.backbone.stage_channels) s << ch << ',';
  s << ";blocks=" << c.backbone.blocks_per_stage << ";ibn=" << c.backbone.ibn << ";image=" << c.backbone.image_size
    << ";variant=" << variant_name(c.variant) << ";branch=" << (c.branch == BranchKind::kFc ? "fc" : "attention")
    << ";s_f=" << c.s_f << ";s_a=" << c.s_a << ";s_j=" << c.s_j << ";se=" << c.se_reduction << ";cbam=" << c.cbam_reduction
    << ',' << c.cbam_kernel << ";attributes=";
  for (int m : c.attribute_classes) s << m << ',';
  s << ";ids=" << c.id_count;
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s.str()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string digest_hex(std::uint64_t digest) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

void write_checkpoint(const fs::path& path, const Checkpoint& c) {
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, c.digest);
  put_u32(out, static_cast<std::uint32_t>(c.parameters.size()));
  put_u32(out, c.epoch);
  put_u32(out, static_cast<std::uint32_t>(c.rng_state.size()));
  out += c.rng_state;
  for (const auto& r : c.parameters) put_record(out, r);
  put_u32(out, static_cast<std::uint32_t>(c.buffers.size()));
  for (const auto& r : c.buffers) put_record(out, r);
  put_u32(out, static_cast<std::uint32_t>(c.moments.size()));
  for (const auto& r : c.moments) put_record(out, r);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path.string());
  if (r.str(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic))) {
    throw CheckpointError(path.string() + ": not an ANET1 checkpoint");
  }
  Checkpoint c;
  c.digest = r.u64("config digest");
  const std::uint32_t n_params = r.u32("parameter count");
  c.epoch = r.u32("epoch");
  c.rng_state = r.str(r.u32("rng state length"), "rng state");
  for (std::uint32_t i = 0; i < n_params; ++i) c.parameters.push_back(r.record());
  const std::uint32_t n_buffers = r.u32("buffer count");
  for (std::uint32_t i = 0; i < n_buffers; ++i) c.buffers.push_back(r.record());
  const std::uint32_t n_moments = r.u32("moment count");
  for (std::uint32_t i = 0; i < n_moments; ++i) c.moments.push_back(r.record());
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes after moment records");
  return c;
}

Checkpoint capture_checkpoint(const Model<float>& model, const Amsgrad<float>* optimizer, std::uint32_t epoch,
                              const std::string& rng_state) {
  Checkpoint c;
  c.digest = config_digest(model.config());
  c.epoch = epoch;
  c.rng_state = rng_state;
  for (const Parameter<float>* p : model.store().parameters()) c.parameters.push_back(to_record(p->name, p->value));
  for (const auto& b : model.store().buffers()) {
    c.buffers.push_back(to_record(b.name + ".mean", b.stats.mean));
    c.buffers.push_back(to_record(b.name + ".var", b.stats.var));
  }
  if (optimizer) {
    for (const auto& [name, s] : optimizer->state()) {
      c.moments.push_back(to_record(name + ".m", s.m));
      c.moments.push_back(to_record(name + ".v", s.v));
      c.moments.push_back(to_record(name + ".vmax", s.vmax));
      c.moments.push_back({name + ".step", {1}, {static_cast<float>(s.step)}});
    }
  }
  return c;
}

namespace {

// First disagreement between checkpoint and model parameter lists, if any.
std::string first_parameter_mismatch(const Checkpoint& c, const std::vector<Parameter<float>*>& params) {
  const std::size_t n = std::min(c.parameters.size(), params.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rec = c.parameters[i];
    if (rec.name != params[i]->name) {
      return "parameter " + std::to_string(i) + ": checkpoint has '" + rec.name + "', model expects '" +
             params[i]->name + "'";
    }
    if (rec.shape != params[i]->value.shape()) {
      return "parameter " + rec.name + ": checkpoint shape " + shape_str(rec.shape) + " vs model shape " +
             shape_str(params[i]->value.shape());
    }
  }
  if (c.parameters.size() != params.size()) {
    return "checkpoint has " + std::to_string(c.parameters.size()) + " parameters, model has " +
           std::to_string(params.size());
  }
  return {};
}

}  // namespace

void apply_checkpoint(const Checkpoint& c, Model<float>& model, Amsgrad<float>* optimizer, const LoadOptions& options) {
  auto params = model.store().parameters();
  // Validate everything first so a failure leaves the model untouched.
  const std::string mismatch = first_parameter_mismatch(c, params);
  const std::uint64_t expected = config_digest(model.config());
  if (options.check_digest && c.digest != expected) {
    throw CheckpointError("config digest mismatch: checkpoint " + digest_hex(c.digest) + " vs model " +
                          digest_hex(expected) + (mismatch.empty() ? "" : "; first difference: " + mismatch));
  }
  if (!mismatch.empty()) throw CheckpointError(mismatch);
  std::map<std::string, const CheckpointRecord*> buffers;
  for (const auto& b : c.buffers) buffers[b.name] = &b;
  for (const auto& b : model.store().buffers()) {
    for (const auto* suffix : {".mean", ".var"}) {
      auto it = buffers.find(b.name + suffix);
      if (it == buffers.end()) throw CheckpointError("checkpoint lacks buffer " + b.name + suffix);
      if (it->second->shape != b.stats.mean.shape()) {
        throw CheckpointError("buffer " + it->first + ": checkpoint shape " + shape_str(it->second->shape) +
                              " vs model shape " + shape_str(b.stats.mean.shape()));
      }
    }
  }
  std::map<std::string, MomentState<float>> moments;
  if (optimizer) {
    for (const auto& rec : c.moments) {
      const auto dot = rec.name.rfind('.');
      const std::string owner = rec.name.substr(0, dot), field = rec.name.substr(dot + 1);
      const Parameter<float>* p = model.store().find(owner);
      if (!p) throw CheckpointError("moment record " + rec.name + " names no model parameter");
      MomentState<float>& s = moments[owner];
      if (field == "step") {
        s.step = static_cast<std::int64_t>(rec.data.at(0));
        continue;
      }
      if (rec.shape != p->value.shape()) {
        throw CheckpointError("moment " + rec.name + ": checkpoint shape " + shape_str(rec.shape) + " vs parameter shape " +
                              shape_str(p->value.shape()));
      }
      if (field == "m") s.m = to_tensor(rec);
      else if (field == "v") s.v = to_tensor(rec);
      else if (field == "vmax") s.vmax = to_tensor(rec);
      else throw CheckpointError("unknown moment field in " + rec.name);
    }
    if (options.require_moments && moments.empty()) throw CheckpointError("checkpoint carries no optimizer moments");
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = to_tensor(c.parameters[i]);
  for (auto& b : model.store().buffers()) {
    b.stats.mean = to_tensor(*buffers.at(b.name + ".mean"));
    b.stats.var = to_tensor(*buffers.at(b.name + ".var"));
  }
  if (optimizer) optimizer->state() = std::move(moments);
}

void save_checkpoint(const fs::path& path, const Model<float>& model, const Amsgrad<float>* optimizer, std::uint32_t epoch,
                     const std::string& rng_state) {
  write_checkpoint(path, capture_checkpoint(model, optimizer, epoch, rng_state));
}

Checkpoint load_checkpoint(const fs::path& path, Model<float>& model, Amsgrad<float>* optimizer, const LoadOptions& options) {
  Checkpoint c = read_checkpoint(path);
  apply_checkpoint(c, model, optimizer, options);
  return c;
}

}  // namespace anet
