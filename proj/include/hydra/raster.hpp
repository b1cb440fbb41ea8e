#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hydra::data {

// 8-bit raster, interleaved channels, row-major. channels is 1 (PGM) or 3 (PPM).
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

// Binary P5/P6 with maxval 255. Throws FormatError naming the path on a bad
// header or short payload.
Raster decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");
std::vector<std::uint8_t> encode_pnm(const Raster& raster);

Raster read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Raster& raster);

// Writes to a sibling temp file and renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& contents);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace hydra::data
