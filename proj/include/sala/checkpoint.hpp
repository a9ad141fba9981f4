#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sala/tensor.hpp"

namespace sala {

// SALAW1 weight files, all integers little-endian:
//   "SALAW1" | u64 tensor count | per tensor: u32 name length, UTF-8 name,
//   u32 rank, u64 extents[rank], f32 data[product(extents)]
inline constexpr char kCheckpointMagic[] = "SALAW1";
inline constexpr std::size_t kCheckpointHeaderBytes = 6 + 8;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void write_checkpoint(std::ostream& out, std::span<const NamedTensor> tensors);
void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);

/// Throws FormatError on a bad magic, truncation, or trailing bytes.
std::vector<NamedTensor> read_checkpoint(std::istream& in);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

/// Bytes a checkpoint of these tensors occupies on disk.
std::uint64_t checkpoint_bytes(std::span<const NamedTensor> tensors);

}  // namespace sala
