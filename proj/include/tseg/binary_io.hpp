#pragma once

// Flat grid files shared by datasets, checkpoints and pseudo-label sets.
//
// Layout (little-endian):
//   bytes 0..3   magic "TLAB"
//   bytes 4..5   version (u16, currently 1)
//   bytes 6..7   height  (u16)
//   bytes 8..9   width   (u16)
//   bytes 10..11 channels (u16)
//   bytes 12..15 reserved, zero
// followed by height*width*channels row-major values (f32 or u8).

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace tseg::io {

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 16;

struct GridHeader {
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint16_t channels = 0;

  std::size_t value_count() const {
    return std::size_t{height} * width * channels;
  }
};

void write_f32_grid(const std::filesystem::path& path, const GridHeader& header,
                    std::span<const float> values);
void write_u8_grid(const std::filesystem::path& path, const GridHeader& header,
                   std::span<const std::uint8_t> values);

std::vector<float> read_f32_grid(const std::filesystem::path& path,
                                 GridHeader& header);
std::vector<std::uint8_t> read_u8_grid(const std::filesystem::path& path,
                                       GridHeader& header);

std::vector<std::uint8_t> encode_header(const GridHeader& header);
GridHeader decode_header(std::span<const std::uint8_t> bytes);

}  // namespace tseg::io
