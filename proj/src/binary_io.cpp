#include "mtst/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mtst/error.hpp"

namespace mtst::io {

Reader::Reader(const std::filesystem::path& path) : source_(path.string()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + source_);
  bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + source_);
}

void Reader::fail(std::uint64_t at, const std::string& message) const { throw FormatError(source_, at, message); }

void Reader::need(std::size_t n) const {
  if (remaining() < n) {
    fail(pos_, "truncated: needed " + std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left");
  }
}

void Reader::expect_magic(std::string_view magic) {
  need(magic.size());
  if (std::string_view(bytes_).substr(pos_, magic.size()) != magic) {
    fail(pos_, "bad magic, expected \"" + std::string(magic) + "\"");
  }
  pos_ += magic.size();
}

namespace {

template <class T>
T read_le(const std::string& bytes, std::size_t pos) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  return v;
}

template <class T>
void write_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace

std::uint16_t Reader::u16() {
  need(2);
  const auto v = read_le<std::uint16_t>(bytes_, pos_);
  pos_ += 2;
  return v;
}

std::uint32_t Reader::u32() {
  need(4);
  const auto v = read_le<std::uint32_t>(bytes_, pos_);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  const auto v = read_le<std::uint64_t>(bytes_, pos_);
  pos_ += 8;
  return v;
}

std::string Reader::bytes(std::size_t n) {
  need(n);
  std::string out = bytes_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::vector<double> Reader::f32_array(std::size_t n) {
  if (n > remaining() / 4) need(n * 4);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<double>(std::bit_cast<float>(read_le<std::uint32_t>(bytes_, pos_)));
    pos_ += 4;
  }
  return out;
}

void Reader::expect_end() const {
  if (remaining() != 0) fail(pos_, std::to_string(remaining()) + " trailing bytes");
}

void Writer::u16(std::uint16_t v) { write_le(buf_, v); }
void Writer::u32(std::uint32_t v) { write_le(buf_, v); }
void Writer::u64(std::uint64_t v) { write_le(buf_, v); }

void Writer::f32_array(std::span<const double> values) {
  buf_.reserve(buf_.size() + 4 * values.size());
  for (double v : values) write_le(buf_, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

void Writer::write_to(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mtst::io
