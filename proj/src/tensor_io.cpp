#include "a3/tensor_io.hpp"

#include "a3/errors.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <sstream>

namespace a3 {

void ByteWriter::put_u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buffer_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void ByteWriter::put_u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buffer_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void ByteWriter::put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }

void ByteReader::require(std::uint64_t n, const char* what) {
  if (n > bytes_.size() - offset_) {
    throw FormatError(std::string("truncated input while reading ") + what, offset_);
  }
}

std::uint32_t ByteReader::get_u32() {
  require(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[offset_ + i])) << (8 * i);
  offset_ += 4;
  return v;
}

std::uint64_t ByteReader::get_u64() {
  require(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[offset_ + i])) << (8 * i);
  offset_ += 8;
  return v;
}

double ByteReader::get_f64() { return std::bit_cast<double>(get_u64()); }

std::string_view ByteReader::get_bytes(std::uint64_t n) {
  require(n, "bytes");
  std::string_view out = bytes_.substr(offset_, n);
  offset_ += n;
  return out;
}

void ByteReader::expect_magic(std::string_view magic) {
  const std::uint64_t at = offset_;
  if (bytes_.size() - offset_ < magic.size() || bytes_.substr(offset_, magic.size()) != magic) {
    throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", at);
  }
  offset_ += magic.size();
}

void write_tensors(ByteWriter& out, const NamedTensors& tensors) {
  out.put_u64(tensors.size());
  for (const auto& [name, t] : tensors) {
    out.put_u32(static_cast<std::uint32_t>(name.size()));
    out.put_bytes(name);
    out.put_u32(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) out.put_u64(static_cast<std::uint64_t>(d));
    for (Index i = 0; i < t.size(); ++i) out.put_f64(t[i]);
  }
}

NamedTensors read_tensors(ByteReader& in) {
  NamedTensors out;
  const std::uint64_t count = in.get_u64();
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::uint64_t entry_at = in.offset();
    const std::uint32_t name_len = in.get_u32();
    std::string name(in.get_bytes(name_len));
    const std::uint32_t rank = in.get_u32();
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), entry_at);
    Shape shape;
    std::uint64_t count_elems = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint64_t at = in.offset();
      const std::uint64_t d = in.get_u64();
      if (d == 0 || d > (std::uint64_t{1} << 40)) throw FormatError("invalid dimension", at);
      count_elems *= d;
      shape.push_back(static_cast<Index>(d));
    }
    if (count_elems > (std::uint64_t{1} << 40)) throw FormatError("tensor too large", entry_at);
    Tensor t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = in.get_f64();
    if (!out.emplace(std::move(name), std::move(t)).second) throw FormatError("duplicate tensor name", entry_at);
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("file not found: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void save_tensor_file(const std::string& path, std::string_view magic, const NamedTensors& tensors) {
  ByteWriter w;
  w.put_bytes(magic);
  write_tensors(w, tensors);
  write_file(path, w.bytes());
}

NamedTensors load_tensor_file(const std::string& path, std::string_view magic) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes);
  r.expect_magic(magic);
  NamedTensors t = read_tensors(r);
  if (!r.at_end()) throw FormatError("trailing bytes after tensor container", r.offset());
  return t;
}

}  // namespace a3
