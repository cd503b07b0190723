#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "anet/model.hpp"
#include "anet/optim.hpp"

namespace anet {

// Binary layout, all integers little-endian:
//   "ANET1"
//   u64 config digest, u32 parameter count, u32 epoch, u32 rng-state length, rng-state bytes
//   parameter records
//   u32 buffer record count, buffer records (running mean/var)
//   u32 moment record count, moment records (<param>.m/.v/.vmax/.step)
// record: u32 name length, name bytes, u32 rank, rank x u32 dims, f32 payload.
// A parameter's partition is the first component of its name.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint64_t digest = 0;
  std::uint32_t epoch = 0;
  std::string rng_state;
  std::vector<CheckpointRecord> parameters;
  std::vector<CheckpointRecord> buffers;
  std::vector<CheckpointRecord> moments;
};

/// FNV-1a over the architecture-defining fields of the config.
std::uint64_t config_digest(const ModelConfig& config);
std::string digest_hex(std::uint64_t digest);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Parses the whole file; throws CheckpointError on truncation or bad magic.
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint capture_checkpoint(const Model<float>& model, const Amsgrad<float>* optimizer, std::uint32_t epoch,
                              const std::string& rng_state);

struct LoadOptions {
  bool check_digest = true;
  bool require_moments = false;
};

/// Validates digest, names and shapes against the model before touching it;
/// on any mismatch the model and optimizer are left unchanged.
void apply_checkpoint(const Checkpoint& checkpoint, Model<float>& model, Amsgrad<float>* optimizer,
                      const LoadOptions& options = {});

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const Amsgrad<float>* optimizer = nullptr,
                     std::uint32_t epoch = 0, const std::string& rng_state = {});
Checkpoint load_checkpoint(const std::filesystem::path& path, Model<float>& model, Amsgrad<float>* optimizer = nullptr,
                           const LoadOptions& options = {});

}  // namespace anet
