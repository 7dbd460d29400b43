#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace dapnet {

/// Interleaved 8-bit raster, row-major, `channels` values per pixel.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  Image8() = default;
  Image8(int h, int w, int c)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, 0) {}

  std::uint8_t& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image8&) const = default;
};

/// Decodes PNG to 8-bit gray (1 channel) or RGB (3 channels). Palette and
/// 16-bit inputs are expanded/stripped; alpha is dropped. Throws DataError.
Image8 read_png(const std::filesystem::path& path);

/// Reads only the IHDR; used to validate manifests without decoding pixels.
struct PngHeader {
  int height = 0;
  int width = 0;
};
PngHeader read_png_header(const std::filesystem::path& path);

/// Writes 1- or 3-channel PNG with fixed compression settings, so equal
/// rasters always produce byte-identical files.
void write_png(const Image8& image, const std::filesystem::path& path);

}  // namespace dapnet
