#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace icmlm::io {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB
};

// Decodes any PNG libpng understands into 8-bit RGB. Throws IngestionError
// naming the file on failure.
RgbImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& img);

// Bilinear resample (pixel-center aligned) to width x height.
RgbImage resize_bilinear(const RgbImage& src, int width, int height);

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t seed = 0);
std::uint32_t file_crc32(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
// Writes through a temporary file and renames, so readers never see a partial file.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace icmlm::io
