#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cfkd::png {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 = gray, 3 = RGB
  std::vector<std::uint8_t> pixels;
};

/// Gray image from values in [0, 1] (clamped), row-major.
Image from_unit_gray(std::span<const double> values, std::size_t width, std::size_t height);
/// Signed difference mapped to a blue-white-red diverging colormap; 0 is white.
Image diverging(std::span<const double> signed_values, std::size_t width, std::size_t height,
                double magnitude = 1.0);
/// Nearest-neighbour upscaling by an integer factor.
Image upscale(const Image& img, std::size_t factor);

std::vector<std::uint8_t> encode(const Image& img);
Image decode(std::span<const std::uint8_t> bytes);
/// Writes via a temporary file and rename, so readers never see partial files.
void write_file(const std::filesystem::path& path, const Image& img);

}  // namespace cfkd::png
