#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace maskpoint {

/// 8-bit interleaved image, row-major, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t& at(int r, int c, int ch) {
    return data[static_cast<std::size_t>((r * width + c) * channels + ch)];
  }
  std::uint8_t at(int r, int c, int ch) const {
    return data[static_cast<std::size_t>((r * width + c) * channels + ch)];
  }
};

void write_png(const std::string& path, const ImageU8& image);

/// Reads 8-bit gray/RGB/RGBA PNGs (alpha dropped); throws FormatError on
/// anything else.
ImageU8 read_png(const std::string& path);

}  // namespace maskpoint
