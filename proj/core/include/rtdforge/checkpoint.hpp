#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rtdforge/tensor.hpp"

namespace rtdforge {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Named auxiliary block: optimizer moments, RNG states, trainer counters.
struct CheckpointSection {
  std::string name;
  std::string text;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(std::string_view tensor_name) const;
};

/// In-memory form of the `rtdforge-ckpt v1` container.
///
/// Layout (little-endian): the magic line, u32-prefixed config text, u32
/// tensor count and each tensor as (u32 name length, name, u32 rank, u64
/// dims, f32 data), u32 alias count with (alias, canonical) string pairs, then
/// u32 section count with (name, text, tensor list) per section.
struct Checkpoint {
  std::string config_text;
  std::vector<CheckpointTensor> tensors;
  std::vector<std::pair<std::string, std::string>> aliases;  // alias -> canonical
  std::vector<CheckpointSection> sections;

  /// Looks up a tensor by canonical name or alias.
  const CheckpointTensor* find(std::string_view name) const;
  const CheckpointSection* section(std::string_view name) const;
  CheckpointSection& add_section(std::string name);
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::string_view bytes);

/// Writes via a temporary file then renames, so readers never see a torn file.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
CheckpointTensor to_checkpoint_tensor(std::string name, const Tensor<T>& tensor);

/// Copies checkpoint data into `tensor`, which must have the same shape.
template <typename T>
void assign_from(Tensor<T>& tensor, const CheckpointTensor& source);

/// FNV-1a 64-bit digest rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace rtdforge
