#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ksanc/nets.hpp"

namespace ksanc {

/// Binary checkpoint, little-endian throughout:
///   8 bytes  magic "KSANCKPT"
///   u32      format version (1)
///   u64      header length, then that many bytes of UTF-8 JSON
///   u64      entry count, then per entry:
///              u32 name length, name bytes
///              u8  dtype (0 = f32, 1 = f64)
///              u32 rank, rank x u64 dims
///              raw values
struct CheckpointData {
  std::string header;
  std::vector<Parameter> entries;

  const Parameter* find(std::string_view name) const;
};

/// Writes to a temporary sibling and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const std::string& header,
                      std::span<const Parameter> entries);
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Copies values into `targets` by name. Every target must be present with
/// the same shape; dtype is converted if needed.
void restore_entries(const CheckpointData& data, std::span<const Parameter> targets);

/// Prefixes every name with `prefix` + ".".
std::vector<Parameter> prefixed(const std::string& prefix, std::vector<Parameter> params);

/// 64-bit FNV-1a, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view text);

}  // namespace ksanc
