#include "anet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace anet {

namespace fs = std::filesystem;
using nlohmann::json;

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kQuery:
      return "query";
    case Split::kGallery:
      return "gallery";
    case Split::kTest:
      return "test";
  }
  return "unknown";
}

std::vector<int> Dataset::identities() const {
  std::set<int> ids;
  for (const auto& s : samples) ids.insert(s.identity);
  return {ids.begin(), ids.end()};
}

std::map<int, std::vector<std::size_t>> Dataset::by_identity() const {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].identity].push_back(i);
  return out;
}

std::array<float, 3> Dataset::channel_mean() const {
  std::array<double, 3> acc{0, 0, 0};
  double count = 0;
  for (const auto& s : samples) {
    const Index hw = s.image.size() / 3;
    for (int c = 0; c < 3; ++c) acc[c] += s.image.vec().segment(c * hw, hw).cast<double>().sum();
    count += static_cast<double>(hw);
  }
  std::array<float, 3> out{0.5f, 0.5f, 0.5f};
  if (count > 0) {
    for (int c = 0; c < 3; ++c) out[c] = static_cast<float>(acc[c] / count);
  }
  return out;
}

// ---- manifests -------------------------------------------------------------

namespace {

const char* const kAttributeKeys[] = {"color", "type"};

std::optional<int> optional_index(const json& record, const char* key, std::size_t line) {
  if (!record.contains(key) || record[key].is_null()) return std::nullopt;
  if (!record[key].is_number_integer()) {
    throw DataError("manifest line " + std::to_string(line) + ": field '" + key + "' must be an integer or null");
  }
  const int v = record[key].get<int>();
  if (v < 0) throw DataError("manifest line " + std::to_string(line) + ": negative " + key + " index");
  return v;
}

}  // namespace

Dataset load_manifest(const fs::path& path, const ManifestOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Dataset ds;
  ds.meta.split = options.split;
  std::vector<int> max_index(2, -1);
  std::string line;
  std::size_t line_no = 0;
  const fs::path base = path.parent_path();
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("manifest line " + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
    if (!record.is_object() || !record.contains("path") || !record["path"].is_string() ||
        !record.contains("id") || !record["id"].is_number_integer()) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected object with string 'path' and integer 'id'");
    }
    Sample s;
    s.path = record["path"].get<std::string>();
    s.identity = record["id"].get<int>();
    if (s.identity < 0) throw DataError("manifest line " + std::to_string(line_no) + ": negative id");
    s.camera = record.contains("camera") && record["camera"].is_number_integer() ? record["camera"].get<int>() : 0;
    for (int slot = 0; slot < 2; ++slot) {
      auto v = optional_index(record, kAttributeKeys[slot], line_no);
      if (v && options.attribute_classes) {
        const int m = options.attribute_classes->at(static_cast<std::size_t>(slot));
        if (*v >= m) {
          throw DataError("manifest line " + std::to_string(line_no) + ": " + kAttributeKeys[slot] + " index " +
                          std::to_string(*v) + " out of range for " + std::to_string(m) + " classes");
        }
      }
      if (v) max_index[static_cast<std::size_t>(slot)] = std::max(max_index[static_cast<std::size_t>(slot)], *v);
      s.attributes.push_back(v);
    }
    if (options.load_images) s.image = read_ppm(base / s.path);
    ds.samples.push_back(std::move(s));
  }
  if (options.attribute_classes) {
    ds.meta.attribute_classes = *options.attribute_classes;
  } else {
    ds.meta.attribute_classes = {std::max(max_index[0] + 1, 2), std::max(max_index[1] + 1, 2)};
  }
  ds.meta.id_count = static_cast<int>(ds.identities().size());
  return ds;
}

void write_manifest(const Dataset& dataset, const fs::path& path, const fs::path& image_dir) {
  std::error_code ec;
  fs::create_directories(image_dir, ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  const fs::path base = path.parent_path();
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    fs::path rel = s.path.empty() ? fs::path("img_" + std::to_string(i) + ".ppm") : fs::path(s.path);
    const fs::path file = image_dir / rel.filename();
    write_ppm(file, s.image);
    json record;
    record["path"] = fs::relative(file, base.empty() ? fs::path(".") : base).generic_string();
    record["id"] = s.identity;
    record["camera"] = s.camera;
    for (int slot = 0; slot < 2; ++slot) {
      const auto& v = slot < static_cast<int>(s.attributes.size()) ? s.attributes[static_cast<std::size_t>(slot)]
                                                                   : std::optional<int>();
      record[kAttributeKeys[slot]] = v ? json(*v) : json(nullptr);
    }
    out << record.dump() << '\n';
  }
}

// ---- synthetic vehicles ----------------------------------------------------

namespace {

struct Part {
  float u0, u1, v0, v1;
  bool window;
};

struct TypeShape {
  std::vector<Part> parts;
  std::vector<float> wheel_u;
  float wheel_v = 0.35f;
  float wheel_r = 0.16f;
};

TypeShape type_shape(int type) {
  TypeShape s;
  switch (type) {
    case 0:  // sedan
      s.parts = {{-0.95f, 0.95f, -0.05f, 0.35f, false}, {-0.45f, 0.4f, -0.42f, -0.05f, false},
                 {-0.38f, 0.33f, -0.36f, -0.1f, true}};
      s.wheel_u = {-0.58f, 0.58f};
      break;
    case 1:  // truck: cargo box + cab
      s.parts = {{-0.95f, 0.95f, -0.1f, 0.35f, false}, {-0.95f, 0.25f, -0.75f, -0.1f, false},
                 {0.35f, 0.95f, -0.45f, -0.1f, false}, {0.5f, 0.88f, -0.4f, -0.18f, true}};
      s.wheel_u = {-0.65f, -0.3f, 0.65f};
      break;
    case 2:  // bus
      s.parts = {{-0.98f, 0.98f, -0.6f, 0.35f, false}, {-0.85f, 0.85f, -0.5f, -0.25f, true}};
      s.wheel_u = {-0.65f, 0.65f};
      s.wheel_r = 0.14f;
      break;
    case 3:  // SUV
      s.parts = {{-0.85f, 0.85f, -0.15f, 0.35f, false}, {-0.8f, 0.5f, -0.6f, -0.15f, false},
                 {-0.72f, 0.42f, -0.52f, -0.22f, true}};
      s.wheel_u = {-0.55f, 0.55f};
      s.wheel_r = 0.19f;
      break;
    default: {
      // Parametric family keyed by the type index alone, so the silhouette of
      // a type never depends on the dataset seed.
      Rng r(0x5eedull * 1315423911ull + static_cast<std::uint64_t>(type));
      std::uniform_real_distribution<float> U(0.0f, 1.0f);
      const float len = 0.7f + 0.28f * U(r);
      const float top = -0.05f - 0.55f * U(r);
      const float c0 = -len + 0.1f + 0.5f * U(r);
      const float c1 = std::min(len - 0.05f, c0 + 0.4f + 0.6f * U(r));
      const float ctop = top - 0.15f - 0.3f * U(r);
      s.parts = {{-len, len, top, 0.35f, false}, {c0, c1, ctop, top, false},
                 {c0 + 0.06f, c1 - 0.06f, ctop + 0.06f, top - 0.03f, true}};
      s.wheel_u = {-len * 0.65f, len * 0.65f};
      s.wheel_r = 0.12f + 0.08f * U(r);
    }
  }
  return s;
}

std::array<float, 3> hsv_to_rgb(float h, float s, float v) {
  h = h - std::floor(h);
  const float i = std::floor(h * 6.0f);
  const float f = h * 6.0f - i;
  const float p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0:
      return {v, t, p};
    case 1:
      return {q, v, p};
    case 2:
      return {p, v, t};
    case 3:
      return {p, q, v};
    case 4:
      return {t, p, v};
    default:
      return {v, p, q};
  }
}

Rng seeded(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(tag)};
  return Rng(seq);
}

// Returns the sprite colour at (u, v), or nothing outside the silhouette.
std::optional<std::array<float, 3>> sprite_color(const VehicleIdentity& vehicle, const TypeShape& shape,
                                                 const std::array<float, 3>& base, float u, float v) {
  for (float wu : shape.wheel_u) {
    const float du = u - wu, dv = v - shape.wheel_v;
    if (du * du + dv * dv <= shape.wheel_r * shape.wheel_r) return std::array<float, 3>{0.07f, 0.07f, 0.08f};
  }
  bool body = false, window = false;
  for (const Part& p : shape.parts) {
    if (u >= p.u0 && u <= p.u1 && v >= p.v0 && v <= p.v1) {
      if (p.window) window = true;
      else body = true;
    }
  }
  if (window) return std::array<float, 3>{0.14f, 0.18f, 0.26f};
  if (!body) return std::nullopt;
  for (const auto& d : vehicle.decals) {
    if (u >= d.u0 && u <= d.u1 && v >= d.v0 && v <= d.v1) return d.rgb;
  }
  if (std::abs(v - vehicle.stripe_v) < 0.045f) return vehicle.stripe_rgb;
  return base;
}

}  // namespace

VehicleIdentity synthetic_identity(const SyntheticSpec& spec, int identity) {
  VehicleIdentity vehicle;
  // Balanced pattern assignment: each block of C*T consecutive ids covers
  // every (color, type) pair once, in a seeded order.
  const int patterns = spec.color_classes * spec.type_classes;
  const int cycle = identity / patterns;
  std::vector<int> order(static_cast<std::size_t>(patterns));
  std::iota(order.begin(), order.end(), 0);
  Rng cycle_rng = seeded(spec.seed, static_cast<std::uint64_t>(cycle), 0, 0xC1C1E);
  std::shuffle(order.begin(), order.end(), cycle_rng);
  const int pattern = order[static_cast<std::size_t>(identity % patterns)];
  vehicle.color = pattern / spec.type_classes;
  vehicle.type = pattern % spec.type_classes;

  Rng r = seeded(spec.seed, static_cast<std::uint64_t>(identity), 0, 0x1DE);
  std::uniform_real_distribution<float> U(0.0f, 1.0f);
  const int decals = 2;
  for (int i = 0; i < decals; ++i) {
    VehicleIdentity::Decal d{};
    const float w = 0.2f + 0.25f * U(r);
    const float h = 0.12f + 0.13f * U(r);
    d.u0 = -0.8f + (1.6f - w) * U(r);
    d.u1 = d.u0 + w;
    d.v0 = -0.05f + (0.35f - h) * U(r);
    d.v1 = d.v0 + h;
    d.rgb = hsv_to_rgb(U(r), 0.3f + 0.7f * U(r), 0.25f + 0.75f * U(r));
    vehicle.decals.push_back(d);
  }
  vehicle.stripe_v = 0.02f + 0.25f * U(r);
  vehicle.stripe_rgb = hsv_to_rgb(U(r), 0.6f * U(r), 0.2f + 0.8f * U(r));
  return vehicle;
}

Image render_vehicle(const VehicleIdentity& vehicle, const SyntheticSpec& spec, int camera, Rng& rng) {
  const int size = spec.image_size;
  std::uniform_real_distribution<float> U(0.0f, 1.0f);
  const float pi = 3.14159265358979f;

  // Background: tinted grey with clutter rectangles and pixel noise.
  const float bg = 0.25f + 0.4f * U(rng);
  std::array<float, 3> bg_rgb{bg + 0.05f * (U(rng) - 0.5f), bg + 0.05f * (U(rng) - 0.5f),
                              bg + 0.05f * (U(rng) - 0.5f)};
  struct Clutter {
    float x0, y0, x1, y1;
    std::array<float, 3> rgb;
  };
  std::vector<Clutter> clutter;
  for (int i = 0; i < 5; ++i) {
    Clutter c{};
    c.x0 = U(rng) * size;
    c.y0 = U(rng) * size;
    c.x1 = c.x0 + (0.1f + 0.3f * U(rng)) * size;
    c.y1 = c.y0 + (0.1f + 0.3f * U(rng)) * size;
    const float g = 0.2f + 0.6f * U(rng);
    const auto tint = hsv_to_rgb(U(rng), 0.25f, g);
    c.rgb = tint;
    clutter.push_back(c);
  }

  // Viewpoint: per-camera rotation bias plus jitter, anisotropic shear,
  // scale and translation.
  const float cam_bias = (static_cast<float>(camera) - 0.5f * static_cast<float>(spec.cameras - 1)) * 6.0f;
  const float theta = (cam_bias + (U(rng) - 0.5f) * 24.0f) * pi / 180.0f;
  const float scale = 0.8f + 0.25f * U(rng);
  const float shear = (U(rng) - 0.5f) * 0.3f;
  const float tx = (U(rng) - 0.5f) * 0.16f * size;
  const float ty = (U(rng) - 0.5f) * 0.16f * size;
  const float light = 0.65f + 0.55f * U(rng);
  const float sprite_scale = 0.42f * static_cast<float>(size);

  Eigen::Matrix2f a;
  a << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  Eigen::Matrix2f shape_m;
  shape_m << scale, shear * scale, 0.0f, scale;
  const Eigen::Matrix2f inv = (a * shape_m * sprite_scale).inverse();

  const TypeShape shape = type_shape(vehicle.type);
  const auto base = hsv_to_rgb(static_cast<float>(vehicle.color) / static_cast<float>(spec.color_classes), 0.85f, 0.9f);
  const float centre = 0.5f * static_cast<float>(size);

  Image img({3, size, size});
  const Index plane = static_cast<Index>(size) * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      std::array<float, 3> acc{0, 0, 0};
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const float px = static_cast<float>(x) + 0.25f + 0.5f * static_cast<float>(sx);
          const float py = static_cast<float>(y) + 0.25f + 0.5f * static_cast<float>(sy);
          const Eigen::Vector2f q = inv * Eigen::Vector2f(px - centre - tx, py - centre - ty);
          std::array<float, 3> rgb = bg_rgb;
          for (const auto& c : clutter) {
            if (px >= c.x0 && px < c.x1 && py >= c.y0 && py < c.y1) rgb = c.rgb;
          }
          if (auto col = sprite_color(vehicle, shape, base, q.x(), q.y())) {
            for (int ch = 0; ch < 3; ++ch) rgb[static_cast<std::size_t>(ch)] = (*col)[static_cast<std::size_t>(ch)] * light;
          }
          for (int ch = 0; ch < 3; ++ch) acc[static_cast<std::size_t>(ch)] += 0.25f * rgb[static_cast<std::size_t>(ch)];
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        const float noise = (U(rng) - 0.5f) * 0.06f;
        img[ch * plane + y * size + x] = std::clamp(acc[static_cast<std::size_t>(ch)] + noise, 0.0f, 1.0f);
      }
    }
  }
  return img;
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.color_classes < 2 || spec.type_classes < 2) {
    throw DataError("synthetic data needs at least 2 color and 2 type classes");
  }
  if (spec.id_count < 0 || spec.images_per_id < 1 || spec.image_size < 4 || spec.cameras < 1) {
    throw DataError("invalid synthetic dataset spec");
  }
  Dataset ds;
  ds.meta.attribute_classes = {spec.color_classes, spec.type_classes};
  ds.meta.id_count = spec.id_count;
  for (int id = 0; id < spec.id_count; ++id) {
    const VehicleIdentity vehicle = synthetic_identity(spec, id);
    for (int i = 0; i < spec.images_per_id; ++i) {
      Rng r = seeded(spec.seed, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(i), 0x1A6E);
      Sample s;
      s.identity = id;
      s.camera = i % spec.cameras;
      s.image = render_vehicle(vehicle, spec, s.camera, r);
      s.attributes = {vehicle.color, vehicle.type};
      char name[64];
      std::snprintf(name, sizeof(name), "%05d_%03d.ppm", id, i);
      s.path = name;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

HoldoutSplit split_holdout(const Dataset& dataset, int train_ids, int query_per_id) {
  HoldoutSplit out;
  for (Dataset* d : {&out.train, &out.query, &out.gallery}) d->meta = dataset.meta;
  out.train.meta.split = Split::kTrain;
  out.query.meta.split = Split::kQuery;
  out.gallery.meta.split = Split::kGallery;
  const auto ids = dataset.identities();
  const auto groups = dataset.by_identity();
  for (std::size_t rank = 0; rank < ids.size(); ++rank) {
    const auto& idx = groups.at(ids[rank]);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Sample& s = dataset.samples[idx[j]];
      if (static_cast<int>(rank) < train_ids) out.train.samples.push_back(s);
      else if (static_cast<int>(j) < query_per_id) out.query.samples.push_back(s);
      else out.gallery.samples.push_back(s);
    }
  }
  for (Dataset* d : {&out.train, &out.query, &out.gallery}) d->meta.id_count = static_cast<int>(d->identities().size());
  return out;
}

// ---- PK sampling -----------------------------------------------------------

PKBatch pk_sample(const Dataset& dataset, int p, int k, Rng& rng) {
  if (p < 1 || k < 1) throw DataError("pk_sample: P and K must be positive");
  const auto groups = dataset.by_identity();
  if (static_cast<std::size_t>(p) > groups.size()) {
    throw DataError("pk_sample: P=" + std::to_string(p) + " exceeds identity count " + std::to_string(groups.size()));
  }
  std::vector<int> ids;
  for (const auto& [id, _] : groups) ids.push_back(id);
  // Partial Fisher-Yates: first p slots become a uniform sample without replacement.
  for (int i = 0; i < p; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), ids.size() - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[pick(rng)]);
  }
  PKBatch batch;
  batch.p = p;
  batch.k = k;
  for (int i = 0; i < p; ++i) {
    std::vector<std::size_t> pool = groups.at(ids[static_cast<std::size_t>(i)]);
    if (pool.size() >= static_cast<std::size_t>(k)) {
      for (int j = 0; j < k; ++j) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(j), pool.size() - 1);
        std::swap(pool[static_cast<std::size_t>(j)], pool[pick(rng)]);
        batch.indices.push_back(pool[static_cast<std::size_t>(j)]);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (int j = 0; j < k; ++j) batch.indices.push_back(pool[pick(rng)]);
    }
  }
  return batch;
}

// ---- augmentation ----------------------------------------------------------

Image flip_horizontal(const Image& image) {
  Image out(image.shape());
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

Image zoom(const Image& image, double factor, const std::array<float, 3>& fill) {
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Image out(image.shape());
  const double cy = 0.5 * static_cast<double>(h), cx = 0.5 * static_cast<double>(w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double sy = cy + (static_cast<double>(y) + 0.5 - cy) / factor - 0.5;
      const double sx = cx + (static_cast<double>(x) + 0.5 - cx) / factor - 0.5;
      const bool inside = sy >= -0.5 && sy <= static_cast<double>(h) - 0.5 && sx >= -0.5 &&
                          sx <= static_cast<double>(w) - 0.5;
      for (Index ch = 0; ch < c; ++ch) {
        float v = fill[static_cast<std::size_t>(ch)];
        if (inside) {
          const double fy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
          const double fx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
          const Index y0 = static_cast<Index>(std::floor(fy)), x0 = static_cast<Index>(std::floor(fx));
          const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double ay = fy - static_cast<double>(y0), ax = fx - static_cast<double>(x0);
          const auto px = [&](Index yy, Index xx) { return static_cast<double>(image[(ch * h + yy) * w + xx]); };
          v = static_cast<float>((1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x1)) +
                                 ay * ((1 - ax) * px(y1, x0) + ax * px(y1, x1)));
        }
        out[(ch * h + y) * w + x] = v;
      }
    }
  }
  return out;
}

Sample augment(const Sample& sample, Rng& rng, const AugmentPolicy& policy) {
  Sample out = sample;
  if (!policy.enabled) return out;
  std::uniform_real_distribution<double> U(0.0, 1.0);
  if (U(rng) < policy.flip_p) out.image = flip_horizontal(out.image);
  if (U(rng) < policy.zoom_p) {
    const double factor = policy.zoom_min + (policy.zoom_max - policy.zoom_min) * U(rng);
    out.image = zoom(out.image, factor, policy.fill);
  }
  if (U(rng) < policy.erase_p) {
    const Index h = out.image.dim(1), w = out.image.dim(2);
    const double area = static_cast<double>(h * w);
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = area * (policy.erase_area_min + (policy.erase_area_max - policy.erase_area_min) * U(rng));
      const double log_lo = std::log(policy.erase_aspect_min), log_hi = std::log(policy.erase_aspect_max);
      const double aspect = std::exp(log_lo + (log_hi - log_lo) * U(rng));
      const Index eh = static_cast<Index>(std::lround(std::sqrt(target * aspect)));
      const Index ew = static_cast<Index>(std::lround(std::sqrt(target / aspect)));
      if (eh < 1 || ew < 1 || eh > h || ew > w) continue;
      const double got = static_cast<double>(eh * ew) / area;
      if (got < policy.erase_area_min || got > policy.erase_area_max) continue;
      std::uniform_int_distribution<Index> py(0, h - eh), px(0, w - ew);
      const Index y0 = py(rng), x0 = px(rng);
      for (Index ch = 0; ch < out.image.dim(0); ++ch)
        for (Index y = y0; y < y0 + eh; ++y)
          for (Index x = x0; x < x0 + ew; ++x) out.image[(ch * h + y) * w + x] = policy.fill[static_cast<std::size_t>(ch)];
      break;
    }
  }
  return out;
}

Tensor<float> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw DataError("stack_images: no images");
  const Shape& first = images.front()->shape();
  Tensor<float> out({static_cast<Index>(images.size()), first.at(0), first.at(1), first.at(2)});
  const Index stride = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_shape(images[i]->shape(), first, "stack_images");
    out.vec().segment(static_cast<Index>(i) * stride, stride) = (images[i]->vec().array() - 0.5f) * 4.0f;
  }
  return out;
}

// ---- image files -----------------------------------------------------------

namespace {

int read_header_int(std::istream& in) {
  int c = in.peek();
  while (c == ' ' || c == '\n' || c == '\r' || c == '\t' || c == '#') {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      in.get();
    }
    c = in.peek();
  }
  int v = -1;
  in >> v;
  return v;
}

}  // namespace

void write_ppm(const fs::path& path, const Image& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DataError("write_ppm: expected 3 x H x W image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const Index h = image.dim(1), w = image.dim(2);
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(h * w * 3));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) {
        const float v = std::clamp(image[(c * h + y) * w + x], 0.0f, 1.0f);
        buf[static_cast<std::size_t>((y * w + x) * 3 + c)] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError(path.string() + ": not a binary PPM (P6)");
  const int w = read_header_int(in), h = read_header_int(in), maxval = read_header_int(in);
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError(path.string() + ": unsupported PPM header");
  in.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw DataError(path.string() + ": truncated PPM");
  Image img({3, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c)
        img[(c * h + y) * w + x] = static_cast<float>(buf[static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0f;
  return img;
}

void write_pgm(const fs::path& path, const Eigen::MatrixXd& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << pixels.cols() << ' ' << pixels.rows() << "\n255\n";
  for (Index y = 0; y < pixels.rows(); ++y)
    for (Index x = 0; x < pixels.cols(); ++x) {
      const double v = std::clamp(pixels(y, x), 0.0, 255.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
    }
  if (!out) throw DataError("failed writing " + path.string());
}

Eigen::MatrixXd read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  const int w = read_header_int(in), h = read_header_int(in), maxval = read_header_int(in);
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError(path.string() + ": unsupported PGM header");
  in.get();
  Eigen::MatrixXd out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int c = in.get();
      if (c == EOF) throw DataError(path.string() + ": truncated PGM");
      out(y, x) = static_cast<double>(c);
    }
  return out;
}

}  // namespace anet
