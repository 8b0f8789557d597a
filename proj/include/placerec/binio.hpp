#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "placerec/error.hpp"

namespace placerec::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Append-only little-endian byte buffer.
class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u16(std::uint16_t v) { bytes(&v, sizeof v); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void f32(float v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  /// u32 length prefix + raw bytes.
  void str32(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void str16(std::string_view s) {
    if (s.size() > 0xFFFF) fail(ErrorKind::ContractViolation, "string too long for u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked cursor; every failure reports the byte offset.
class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> data, std::string origin = {})
      : data_(std::move(data)), origin_(std::move(origin)) {}

  static Reader from_file(const std::filesystem::path& path);

  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    bytes(got.data(), got.size());
    if (got != m) error("bad magic, expected '" + std::string(m) + "'", pos_ - m.size());
  }
  std::uint16_t u16() { return pod<std::uint16_t>(); }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  float f32() { return pod<float>(); }
  double f64() { return pod<double>(); }
  std::string str32() {
    const auto n = u32();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::string str16() {
    const auto n = u16();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  [[noreturn]] void error(const std::string& what, std::size_t at) const {
    fail(ErrorKind::ParseError, origin_ + ": " + what + " at byte " + std::to_string(at));
  }
  void need(std::size_t n) const {
    if (remaining() < n) error("truncated input, need " + std::to_string(n) + " bytes", pos_);
  }

 private:
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }

  std::vector<std::uint8_t> data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace placerec::binio
