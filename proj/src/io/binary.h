#pragma once

// Little-endian byte encoding shared by the feature and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mmt/errors.h"

namespace mmt::io {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void text16(std::string_view s);

  const std::vector<unsigned char>& data() const { return buf_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> data) : buf_(std::move(data)) {}
  static ByteReader open(const std::filesystem::path& path);

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return buf_.size() - pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

  void need(std::uint64_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(buf_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  std::string text16(const char* what);
  void expect_magic(const char (&magic)[4], const char* format);
  void f32_array(float* out, std::uint64_t n, const char* what);

 private:
  std::vector<unsigned char> buf_;
  std::uint64_t pos_ = 0;
};

}  // namespace mmt::io
