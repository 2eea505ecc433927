#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace pil {

/// 8-bit grayscale raster, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
/// Reads a binary P5 file with maxval 255; comments in the header are skipped.
GrayImage read_pgm(const std::filesystem::path& path);

}  // namespace pil
