// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoint container.
//
// Layout (little-endian):
//   "SSMBCKPT" 0x01
//   u32 tensor count
//   per tensor: u16 name length, UTF-8 name, u8 rank, rank × u32 extents,
//               extent-product × f32 values
//   u32 CRC-32 of every preceding byte

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ssmb/tensor.hpp"

namespace ssmb {

enum class CheckpointErrorKind {
  kIo,
  kCorruptMagic,
  kUnsupportedVersion,
  kTruncated,
  kCrcMismatch,
  kTrailingBytes,
  kShapeMismatch,
  kMissingTensor,
};

std::string_view checkpoint_error_name(CheckpointErrorKind kind);

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& detail);
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'M', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 0x01;

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint_file(const std::filesystem::path& path);

std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

}  // namespace ssmb
