#include "binary.h"

#include <fstream>
#include <iterator>

namespace mmt::io {

void ByteWriter::text16(std::string_view s) {
  if (s.size() > 0xFFFF) throw ContractError("string too long for a 16-bit length field");
  uint(static_cast<std::uint16_t>(s.size()));
  bytes(s.data(), s.size());
}

void ByteWriter::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

ByteReader ByteReader::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return ByteReader(std::move(data));
}

std::string ByteReader::text16(const char* what) {
  const auto n = uint<std::uint16_t>(what);
  need(n, what);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

void ByteReader::expect_magic(const char (&magic)[4], const char* format) {
  need(4, "magic");
  if (std::memcmp(buf_.data() + pos_, magic, 4) != 0) {
    throw FormatError(std::string("not a ") + format + " file (bad magic)", pos_);
  }
  pos_ += 4;
}

void ByteReader::f32_array(float* out, std::uint64_t n, const char* what) {
  if (n > remaining() / 4) throw FormatError(std::string("truncated file while reading ") + what, pos_);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out, buf_.data() + pos_, n * 4);
    pos_ += n * 4;
  } else {
    for (std::uint64_t i = 0; i < n; ++i) out[i] = f32(what);
  }
}

}  // namespace mmt::io
