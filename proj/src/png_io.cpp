#include "maskpoint/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "maskpoint/common.hpp"

namespace maskpoint {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

constexpr std::uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

}  // namespace

void write_png(const std::string& path, const ImageU8& image) {
  if (image.channels != 1 && image.channels != 3)
    throw FormatError("write_png: only gray and RGB images supported");
  const int bpp = image.channels;
  const std::size_t row = static_cast<std::size_t>(image.width) * bpp;

  std::vector<std::uint8_t> raw;
  raw.reserve((row + 1) * static_cast<std::size_t>(image.height));
  for (int r = 0; r < image.height; ++r) {
    raw.push_back(0);  // filter: none
    const std::uint8_t* src = image.data.data() + static_cast<std::size_t>(r) * row;
    raw.insert(raw.end(), src, src + row);
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw FormatError("write_png: deflate failed");
  compressed.resize(bound);

  std::vector<std::uint8_t> file(kSignature, kSignature + 8);
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(image.width));
  put_u32(ihdr, static_cast<std::uint32_t>(image.height));
  ihdr.push_back(8);                                    // bit depth
  ihdr.push_back(image.channels == 3 ? 2 : 0);          // color type
  ihdr.push_back(0);                                    // compression
  ihdr.push_back(0);                                    // filter
  ihdr.push_back(0);                                    // interlace
  append_chunk(file, "IHDR", ihdr);
  append_chunk(file, "IDAT", compressed);
  append_chunk(file, "IEND", {});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("write_png: cannot open " + path);
  out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
  if (!out) throw FormatError("write_png: write failed for " + path);
}

ImageU8 read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_png: cannot open " + path);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (file.size() < 8 || std::memcmp(file.data(), kSignature, 8) != 0)
    throw FormatError("read_png: not a PNG file: " + path);

  int width = 0, height = 0, color_type = -1;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 8 <= file.size()) {
    const std::uint32_t len = get_u32(file.data() + pos);
    if (pos + 12 + len > file.size()) throw FormatError("read_png: truncated chunk in " + path);
    const char* type = reinterpret_cast<const char*>(file.data() + pos + 4);
    const std::uint8_t* payload = file.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      width = static_cast<int>(get_u32(payload));
      height = static_cast<int>(get_u32(payload + 4));
      const int depth = payload[8];
      color_type = payload[9];
      if (depth != 8 || payload[12] != 0)
        throw FormatError("read_png: unsupported bit depth or interlacing in " + path);
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  int src_channels = 0;
  switch (color_type) {
    case 0: src_channels = 1; break;
    case 2: src_channels = 3; break;
    case 6: src_channels = 4; break;
    default: throw FormatError("read_png: unsupported color type in " + path);
  }
  if (width <= 0 || height <= 0) throw FormatError("read_png: bad dimensions in " + path);

  const std::size_t row = static_cast<std::size_t>(width) * src_channels;
  std::vector<std::uint8_t> raw((row + 1) * static_cast<std::size_t>(height));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw FormatError("read_png: inflate failed for " + path);

  // Undo per-row filters in place.
  std::vector<std::uint8_t> pixels(row * static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(r) * (row + 1)];
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(r) * (row + 1) + 1;
    std::uint8_t* dst = pixels.data() + static_cast<std::size_t>(r) * row;
    const std::uint8_t* up = r > 0 ? dst - row : nullptr;
    for (std::size_t i = 0; i < row; ++i) {
      const int a = i >= static_cast<std::size_t>(src_channels) ? dst[i - src_channels] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= static_cast<std::size_t>(src_channels)) ? up[i - src_channels] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw FormatError("read_png: unknown filter in " + path);
      }
      dst[i] = static_cast<std::uint8_t>(v & 0xff);
    }
  }

  ImageU8 image;
  image.height = height;
  image.width = width;
  image.channels = src_channels == 4 ? 3 : src_channels;
  image.data.resize(static_cast<std::size_t>(height) * width * image.channels);
  if (src_channels == image.channels) {
    image.data = std::move(pixels);
  } else {
    for (std::size_t p = 0; p < static_cast<std::size_t>(height) * width; ++p)
      for (int ch = 0; ch < 3; ++ch) image.data[p * 3 + ch] = pixels[p * 4 + ch];
  }
  return image;
}

}  // namespace maskpoint
