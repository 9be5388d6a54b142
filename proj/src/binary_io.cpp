#include "tseg/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tseg/common.hpp"

namespace tseg {

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = kDigits[v & 0xF];
    v >>= 4;
  }
  return out;
}

namespace io {
namespace {

static_assert(std::endian::native == std::endian::little,
              "grid files are written in host order; big-endian hosts need byte swapping");

void put_u16(std::vector<std::uint8_t>& out, std::size_t offset, std::uint16_t v) {
  out[offset] = static_cast<std::uint8_t>(v & 0xFF);
  out[offset + 1] = static_cast<std::uint8_t>(v >> 8);
}

std::uint16_t get_u16(std::span<const std::uint8_t> in, std::size_t offset) {
  return static_cast<std::uint16_t>(in[offset] | (in[offset + 1] << 8));
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const GridHeader& header,
               const void* payload, std::size_t bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  const auto head = encode_header(header);
  f.write(reinterpret_cast<const char*>(head.data()),
          static_cast<std::streamsize>(head.size()));
  f.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!f) throw IoError("short write to " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_header(const GridHeader& header) {
  std::vector<std::uint8_t> out(kHeaderBytes, 0);
  std::memcpy(out.data(), "TLAB", 4);
  put_u16(out, 4, kFormatVersion);
  put_u16(out, 6, header.height);
  put_u16(out, 8, header.width);
  put_u16(out, 10, header.channels);
  return out;
}

GridHeader decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), "TLAB", 4) != 0) {
    throw IoError("bad grid header magic");
  }
  if (get_u16(bytes, 4) != kFormatVersion) {
    throw IoError("unsupported grid format version " +
                  std::to_string(get_u16(bytes, 4)));
  }
  return GridHeader{get_u16(bytes, 6), get_u16(bytes, 8), get_u16(bytes, 10)};
}

void write_f32_grid(const std::filesystem::path& path, const GridHeader& header,
                    std::span<const float> values) {
  if (values.size() != header.value_count()) {
    throw IoError("payload size does not match header for " + path.string());
  }
  write_all(path, header, values.data(), values.size_bytes());
}

void write_u8_grid(const std::filesystem::path& path, const GridHeader& header,
                   std::span<const std::uint8_t> values) {
  if (values.size() != header.value_count()) {
    throw IoError("payload size does not match header for " + path.string());
  }
  write_all(path, header, values.data(), values.size_bytes());
}

std::vector<float> read_f32_grid(const std::filesystem::path& path,
                                 GridHeader& header) {
  const auto bytes = read_all(path);
  header = decode_header(bytes);
  const std::size_t n = header.value_count();
  if (bytes.size() != kHeaderBytes + n * sizeof(float)) {
    throw IoError("truncated or oversized f32 grid " + path.string());
  }
  std::vector<float> values(n);
  std::memcpy(values.data(), bytes.data() + kHeaderBytes, n * sizeof(float));
  return values;
}

std::vector<std::uint8_t> read_u8_grid(const std::filesystem::path& path,
                                       GridHeader& header) {
  const auto bytes = read_all(path);
  header = decode_header(bytes);
  const std::size_t n = header.value_count();
  if (bytes.size() != kHeaderBytes + n) {
    throw IoError("truncated or oversized u8 grid " + path.string());
  }
  return {bytes.begin() + kHeaderBytes, bytes.end()};
}

}  // namespace io
}  // namespace tseg
