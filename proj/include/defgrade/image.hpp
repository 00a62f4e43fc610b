#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace defgrade::image {

// 8-bit interleaved pixels, 1 (gray) or 3 (RGB) channels.
struct Image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint8_t channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::uint32_t w, std::uint32_t h, std::uint8_t c)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, 0) {}

  std::uint8_t* at(std::uint32_t x, std::uint32_t y) {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  const std::uint8_t* at(std::uint32_t x, std::uint32_t y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  bool operator==(const Image&) const = default;
};

enum class Format { ppm, pgm, png };

// Binary PPM (P6), PGM (P5) and PNG are supported; anything else throws
// InvalidArgument, unreadable or truncated files throw RuntimeFailure.
Format detect_format(const std::filesystem::path& path);
Image read(const std::filesystem::path& path);
// Dimensions only; avoids decoding the pixel payload.
std::array<std::uint32_t, 2> read_dims(const std::filesystem::path& path);
void write(const std::filesystem::path& path, const Image& img);

Image resize_bilinear(const Image& src, std::uint32_t width, std::uint32_t height);

}  // namespace defgrade::image
