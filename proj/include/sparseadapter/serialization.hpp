#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sparseadapter/model.hpp"
#include "sparseadapter/pruning.hpp"

namespace sparseadapter {

// Mask file, all integers little-endian:
//   "SADM" | version u8 | method u8 | s f64 | seed u64 | group count u32
//   per group: name length u32 | UTF-8 name | element count u64 | ceil(n/8) bytes, bit i at byte i/8, bit i%8
inline constexpr std::uint8_t kMaskFormatVersion = 1;

std::vector<std::uint8_t> encode_mask(const PruneMask& mask);
PruneMask decode_mask(const std::vector<std::uint8_t>& bytes);
void save_mask(const std::filesystem::path& path, const PruneMask& mask);
PruneMask load_mask(const std::filesystem::path& path);

// Checkpoint file, all integers little-endian:
//   "SACP" | version u8 | group count u32
//   per group: name length u32 | name | trainable u8 | rank u32 | dims u64 x rank | data f64 x numel
inline constexpr std::uint8_t kCheckpointFormatVersion = 1;

struct CheckpointEntry {
  std::string name;
  bool trainable = false;
  Tensor tensor;
  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const Model& model);
// Overwrites the model's tensors and trainable flags. Group names and shapes must match exactly.
void load_checkpoint(const std::filesystem::path& path, Model& model);
void restore_checkpoint(const std::vector<CheckpointEntry>& entries, Model& model);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace sparseadapter
