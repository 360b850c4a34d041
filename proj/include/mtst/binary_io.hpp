#pragma once

// Little-endian byte buffers for the checkpoint and embedding formats. The
// reader tracks its offset so every malformed field is reported with the
// byte position where it starts.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mtst::io {

class Reader {
 public:
  // Reads the whole file; IoError when it cannot be opened.
  explicit Reader(const std::filesystem::path& path);
  Reader(std::string source, std::string bytes) : source_(std::move(source)), bytes_(std::move(bytes)) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return bytes_.size() - pos_; }
  const std::string& source() const { return source_; }
  // Everything read so far.
  std::string_view consumed() const { return std::string_view(bytes_).substr(0, pos_); }

  void expect_magic(std::string_view magic);
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::string bytes(std::size_t n);
  std::vector<double> f32_array(std::size_t n);
  // FormatError if anything is left.
  void expect_end() const;

  [[noreturn]] void fail(std::uint64_t at, const std::string& message) const;

 private:
  void need(std::size_t n) const;

  std::string source_;
  std::string bytes_;
  std::size_t pos_ = 0;
};

class Writer {
 public:
  void raw(std::string_view bytes) { buf_.append(bytes); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  // Each value is narrowed to float32.
  void f32_array(std::span<const double> values);

  const std::string& buffer() const { return buf_; }
  void write_to(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

// FNV-1a over a byte range.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace mtst::io
