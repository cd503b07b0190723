#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "anet/tensor.hpp"

namespace anet {

using Rng = std::mt19937_64;
using Image = Tensor<float>;  // 3 x H x W, values in [0, 1]

/// Attribute slot order in manifests and label vectors.
inline constexpr int kColorSlot = 0;
inline constexpr int kTypeSlot = 1;

struct Sample {
  Image image;
  int identity = 0;
  int camera = 0;
  std::vector<std::optional<int>> attributes;
  std::string path;
};

enum class Split { kTrain, kQuery, kGallery, kTest };

const char* split_name(Split split);

struct DatasetMeta {
  std::vector<int> attribute_classes;  // m_i; n = size()
  int id_count = 0;
  Split split = Split::kTrain;

  int attribute_count() const { return static_cast<int>(attribute_classes.size()); }
};

struct Dataset {
  DatasetMeta meta;
  std::vector<Sample> samples;

  /// Sorted distinct identities.
  std::vector<int> identities() const;
  /// Sample indices per identity, in dataset order.
  std::map<int, std::vector<std::size_t>> by_identity() const;
  /// Per-channel mean pixel value.
  std::array<float, 3> channel_mean() const;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- manifests -------------------------------------------------------------

struct ManifestOptions {
  /// Class counts per attribute (color, type). When absent they are inferred
  /// as max index + 1.
  std::optional<std::vector<int>> attribute_classes;
  Split split = Split::kTrain;
  bool load_images = true;
};

/// One JSON object per line: {"path", "id", "camera", "color", "type"}; color
/// and type may be null. Image paths are relative to the manifest's folder.
Dataset load_manifest(const std::filesystem::path& path, const ManifestOptions& options = {});

/// Writes images as binary PPM under `image_dir` and the manifest at `path`.
void write_manifest(const Dataset& dataset, const std::filesystem::path& path,
                    const std::filesystem::path& image_dir);

// ---- synthetic vehicles ----------------------------------------------------

struct SyntheticSpec {
  int id_count = 80;
  int images_per_id = 8;
  int image_size = 64;
  int color_classes = 4;
  int type_classes = 4;
  int cameras = 4;
  std::uint64_t seed = 1;
};

struct VehicleIdentity {
  int color = 0;
  int type = 0;
  struct Decal {
    float u0, v0, u1, v1;
    std::array<float, 3> rgb;
  };
  std::vector<Decal> decals;
  float stripe_v = 0.0f;
  std::array<float, 3> stripe_rgb{};
};

/// Identity i is rendered images_per_id times under random viewpoint,
/// illumination and clutter; camera = image index % cameras.
Dataset gen_synthetic(const SyntheticSpec& spec);
VehicleIdentity synthetic_identity(const SyntheticSpec& spec, int identity);
/// Renders one view; the same (identity, rng state) always gives the same image.
Image render_vehicle(const VehicleIdentity& vehicle, const SyntheticSpec& spec, int camera, Rng& rng);

struct HoldoutSplit {
  Dataset train;
  Dataset query;
  Dataset gallery;
};

/// The first `train_ids` identities (sorted) form the training split; for the
/// others, the first `query_per_id` images per identity are queries and the
/// rest gallery.
HoldoutSplit split_holdout(const Dataset& dataset, int train_ids, int query_per_id);

// ---- PK sampling -----------------------------------------------------------

struct PKBatch {
  int p = 0;
  int k = 0;
  std::vector<std::size_t> indices;  // identity-major: p groups of k
};

/// P identities without replacement; K images each, drawn with replacement
/// only when an identity has fewer than K images.
PKBatch pk_sample(const Dataset& dataset, int p, int k, Rng& rng);

// ---- augmentation ----------------------------------------------------------

struct AugmentPolicy {
  bool enabled = true;
  double flip_p = 0.5;
  double zoom_p = 0.5;
  double zoom_min = 0.9;
  double zoom_max = 1.1;
  double erase_p = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.2;
  double erase_aspect_min = 0.3;
  double erase_aspect_max = 3.3;
  std::array<float, 3> fill{0.5f, 0.5f, 0.5f};
};

Sample augment(const Sample& sample, Rng& rng, const AugmentPolicy& policy);
Image flip_horizontal(const Image& image);
/// Scales about the image centre (bilinear); factor > 1 crops, < 1 pads with fill.
Image zoom(const Image& image, double factor, const std::array<float, 3>& fill);

/// Stacks 3 x H x W images into N x 3 x H x W, mapping pixels to (x - 0.5) / 0.25.
Tensor<float> stack_images(const std::vector<const Image*>& images);

// ---- image files -----------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
/// 8-bit graymap from an H x W array already scaled to [0, 255].
void write_pgm(const std::filesystem::path& path, const Eigen::MatrixXd& pixels);
Eigen::MatrixXd read_pgm(const std::filesystem::path& path);

}  // namespace anet
