#pragma once

// Little-endian binary tensor container shared by checkpoints, dataset bundles
// and embedding dumps:
//
//   u64 count
//   count x { u32 name_len, name bytes (UTF-8), u32 rank, rank x u64 dim, f64 payload }

#include "a3/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace a3 {

using NamedTensors = std::map<std::string, Tensor>;

class ByteWriter {
 public:
  void put_u32(std::uint32_t v);
  void put_u64(std::uint64_t v);
  void put_i64(std::int64_t v) { put_u64(static_cast<std::uint64_t>(v)); }
  void put_f64(double v);
  void put_bytes(std::string_view bytes) { buffer_.append(bytes); }

  const std::string& bytes() const noexcept { return buffer_; }

 private:
  std::string buffer_;
};

/// Bounds-checked cursor. Every failure raises FormatError with the current offset.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t get_u32();
  std::uint64_t get_u64();
  std::int64_t get_i64() { return static_cast<std::int64_t>(get_u64()); }
  double get_f64();
  std::string_view get_bytes(std::uint64_t n);
  void expect_magic(std::string_view magic);

  std::uint64_t offset() const noexcept { return offset_; }
  bool at_end() const noexcept { return offset_ == bytes_.size(); }

 private:
  void require(std::uint64_t n, const char* what);

  std::string_view bytes_;
  std::uint64_t offset_ = 0;
};

void write_tensors(ByteWriter& out, const NamedTensors& tensors);
NamedTensors read_tensors(ByteReader& in);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view text);

/// Standalone container with a 7-byte magic prefix (used for embedding dumps).
void save_tensor_file(const std::string& path, std::string_view magic, const NamedTensors& tensors);
NamedTensors load_tensor_file(const std::string& path, std::string_view magic);

inline constexpr std::string_view kEmbeddingMagic = "A3EMBD1";

}  // namespace a3
