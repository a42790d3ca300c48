#pragma once

// Little-endian byte streams with a trailing CRC32, shared by the checkpoint,
// task-vector and anchor-set file formats.

#include <bit>
#include <boost/crc.hpp>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "fda/error.hpp"
#include "fda/numkit/matrix.hpp"

namespace fda::binio {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

class Writer {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void f64s(std::span<const double> v) {
    for (double x : v) f64(x);
  }

  /// Append the CRC32 of everything written so far and write the file.
  void finish(const std::string& path) {
    u32(crc32(bytes_.data(), bytes_.size()));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
    if (!out) fail(ErrorCode::Io, "write failed for '" + path + "'");
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  /// Reads the whole file, checks the magic and the trailing CRC.
  Reader(const std::string& path, std::string_view magic) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open '" + path + "'");
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (bytes_.size() < magic.size() + 4) bad("file too short");
    if (std::memcmp(bytes_.data(), magic.data(), magic.size()) != 0) bad("bad magic");
    end_ = bytes_.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes_[end_ + i]) << (8 * i);
    if (stored != crc32(bytes_.data(), end_)) bad("CRC mismatch (corrupt or truncated)");
    pos_ = magic.size();
  }

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  double f64() { return std::bit_cast<double>(le(8)); }

  Matrix matrix(std::size_t rows, std::size_t cols) {
    if (rows * cols > remaining() / 8) bad("payload shorter than declared shape");
    Matrix m(rows, cols);
    for (double& v : m.values()) v = f64();
    return m;
  }

  std::size_t remaining() const { return end_ - pos_; }

  void expect_end() const {
    if (pos_ != end_) bad("trailing bytes after payload");
  }

  [[noreturn]] void bad(const std::string& what) const {
    fail(ErrorCode::FormatViolation, "'" + path_ + "': " + what);
  }

 private:
  std::uint64_t le(int n) {
    if (remaining() < static_cast<std::size_t>(n)) bad("truncated payload");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string path_;
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

}  // namespace fda::binio
