#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mixssm/network.hpp"

// File layout:
//   8 bytes   magic "MIXSSM01"
//   8 bytes   header length in bytes, unsigned little-endian
//   header    UTF-8 JSON {"format_version", "config", "tensors": [{name, shape, offset, length}]}
//   payload   float32 little-endian values; offset and length count floats
// Errors are CheckpointError with a Kind describing the failure.

namespace mixssm {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t length = 0;
};

struct CheckpointContents {
  ModelConfig config;
  std::vector<CheckpointEntry> entries;
  std::vector<float> payload;
};

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path);

/// Reads and validates the whole file without building a model.
CheckpointContents read_checkpoint(const std::string& path);

template <typename T>
Model<T> load_checkpoint(const std::string& path);

/// Overwrites the parameters of an existing model. The stored config must
/// equal model.config (else Kind::config_mismatch).
template <typename T>
void load_into(Model<T>& model, const std::string& path);

}  // namespace mixssm
