// SPDX-License-Identifier: Apache-2.0

#include "ssmb/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace ssmb {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

std::string_view checkpoint_error_name(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::kIo: return "io-error";
    case CheckpointErrorKind::kCorruptMagic: return "corrupt-magic";
    case CheckpointErrorKind::kUnsupportedVersion: return "unsupported-version";
    case CheckpointErrorKind::kTruncated: return "truncated";
    case CheckpointErrorKind::kCrcMismatch: return "crc-mismatch";
    case CheckpointErrorKind::kTrailingBytes: return "trailing-bytes";
    case CheckpointErrorKind::kShapeMismatch: return "shape-mismatch";
    case CheckpointErrorKind::kMissingTensor: return "missing-tensor";
  }
  return "unknown";
}

CheckpointError::CheckpointError(CheckpointErrorKind kind, const std::string& detail)
    : Error("checkpoint " + std::string(checkpoint_error_name(kind)) + ": " + detail), kind_(kind) {}

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, std::numeric_limits<uInt>::max()));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

template <typename U>
void put(std::vector<std::uint8_t>& out, U value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  void read(void* dst, std::size_t n, const char* what) {
    need(n, what);
    if (n) std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (end_ - pos_ < n) {
      throw CheckpointError(CheckpointErrorKind::kTruncated,
                            std::string("file ends inside ") + what + " at byte " + std::to_string(pos_));
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  out.push_back(kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw Error("tensor name too long: " + t.name);
    if (t.shape.size() > std::numeric_limits<std::uint8_t>::max()) throw Error("tensor rank too large: " + t.name);
    if (shape_numel(t.shape) != t.values.size()) throw ShapeError("tensor " + t.name + " values do not match shape");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (auto extent : t.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.values.data());
    out.insert(out.end(), p, p + t.values.size() * sizeof(float));
  }
  put<std::uint32_t>(out, crc32(out.data(), out.size()));
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError(CheckpointErrorKind::kCorruptMagic, "missing SSMBCKPT header");
  }
  Reader reader(bytes, bytes.size());
  char magic[sizeof(kCheckpointMagic)];
  reader.read(magic, sizeof(magic), "magic");
  const auto version = reader.get<std::uint8_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::kUnsupportedVersion, "version " + std::to_string(version));
  }
  const auto count = reader.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    const auto name_len = reader.get<std::uint16_t>("tensor name length");
    t.name.resize(name_len);
    reader.read(t.name.data(), name_len, "tensor name");
    const auto rank = reader.get<std::uint8_t>("tensor rank");
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(reader.get<std::uint32_t>("tensor extents"));
    const std::size_t numel = shape_numel(t.shape);
    if (numel > (bytes.size() - reader.pos()) / sizeof(float)) {
      throw CheckpointError(CheckpointErrorKind::kTruncated, "file ends inside values of " + t.name);
    }
    t.values.resize(numel);
    reader.read(t.values.data(), numel * sizeof(float), "tensor values");
    tensors.push_back(std::move(t));
  }
  const std::size_t body = reader.pos();
  const auto stored = reader.get<std::uint32_t>("crc");
  if (reader.pos() != bytes.size()) {
    throw CheckpointError(CheckpointErrorKind::kTrailingBytes,
                          std::to_string(bytes.size() - reader.pos()) + " bytes after checksum");
  }
  if (crc32(bytes.data(), body) != stored) throw CheckpointError(CheckpointErrorKind::kCrcMismatch, "checksum differs");
  return tensors;
}

void write_checkpoint_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrorKind::kIo, "write failed for " + path.string());
}

std::vector<NamedTensor> read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ssmb
