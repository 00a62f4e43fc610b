#include "defgrade/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "defgrade/error.hpp"
#include "defgrade/util.hpp"

namespace fs = std::filesystem;

namespace defgrade::image {

namespace {

struct PnmHeader {
  char kind = 0;  // '5' or '6'
  std::uint32_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::string& bytes, const fs::path& path) {
  PnmHeader h;
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw InvalidArgument(path.string() + ": not a binary PGM/PPM file");
  h.kind = bytes[1];
  std::size_t pos = 2;
  auto next_number = [&]() -> std::uint32_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::uint64_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::uint64_t>(bytes[pos] - '0');
      ++pos;
      if (++digits > 9) throw RuntimeFailure(path.string() + ": corrupt PNM header");
    }
    if (digits == 0) throw RuntimeFailure(path.string() + ": corrupt PNM header");
    return static_cast<std::uint32_t>(v);
  };
  h.width = next_number();
  h.height = next_number();
  h.maxval = next_number();
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw RuntimeFailure(path.string() + ": corrupt PNM header");
  h.data_offset = pos + 1;
  if (h.width == 0 || h.height == 0) throw RuntimeFailure(path.string() + ": zero image dimension");
  if (h.maxval != 255) throw InvalidArgument(path.string() + ": only 8-bit PNM is supported");
  return h;
}

Image read_pnm(const fs::path& path) {
  auto bytes = util::read_file(path);
  auto h = parse_pnm_header(bytes, path);
  Image img(h.width, h.height, h.kind == '6' ? 3 : 1);
  if (bytes.size() - h.data_offset < img.pixels.size()) throw RuntimeFailure(path.string() + ": truncated pixel data");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset), img.pixels.size(), img.pixels.begin());
  return img;
}

void write_pnm(const fs::path& path, const Image& img) {
  std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  util::write_file_atomic(path, out);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

Image read_png(const fs::path& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw RuntimeFailure("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeFailure("libpng initialisation failed");
  }
  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeFailure(path.string() + ": corrupt PNG");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const auto channels = png_get_channels(png, info);
  img = Image(png_get_image_width(png, info), png_get_image_height(png, info), static_cast<std::uint8_t>(channels));
  rows.resize(img.height);
  for (std::uint32_t y = 0; y < img.height; ++y) rows[y] = img.at(0, y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const fs::path& path, const Image& img) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(tmp.c_str(), "wb"));
    if (!f) throw RuntimeFailure("cannot write " + tmp.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      throw RuntimeFailure("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw RuntimeFailure("PNG encoding failed for " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::uint32_t y = 0; y < img.height; ++y) png_write_row(png, const_cast<png_bytep>(img.at(0, y)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  fs::rename(tmp, path);
}

}  // namespace

Format detect_format(const fs::path& path) {
  auto ext = util::to_lower(path.extension().string());
  if (ext == ".ppm") return Format::ppm;
  if (ext == ".pgm") return Format::pgm;
  if (ext == ".png") return Format::png;
  throw InvalidArgument(path.string() + ": unsupported image format '" + ext + "'");
}

Image read(const fs::path& path) {
  switch (detect_format(path)) {
    case Format::ppm:
    case Format::pgm: return read_pnm(path);
    case Format::png: return read_png(path);
  }
  throw InvalidArgument("unreachable");
}

std::array<std::uint32_t, 2> read_dims(const fs::path& path) {
  if (detect_format(path) == Format::png) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open " + path.string());
    unsigned char head[24] = {};
    in.read(reinterpret_cast<char*>(head), sizeof head);
    static constexpr unsigned char kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (in.gcount() != sizeof head || !std::equal(kSig, kSig + 8, head))
      throw RuntimeFailure(path.string() + ": corrupt PNG");
    auto be32 = [&](int off) {
      return (std::uint32_t{head[off]} << 24) | (std::uint32_t{head[off + 1]} << 16) |
             (std::uint32_t{head[off + 2]} << 8) | std::uint32_t{head[off + 3]};
    };
    return {be32(16), be32(20)};
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot open " + path.string());
  std::string head(256, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  auto h = parse_pnm_header(head, path);
  return {h.width, h.height};
}

void write(const fs::path& path, const Image& img) {
  auto fmt = detect_format(path);
  if (fmt == Format::png) {
    write_png(path, img);
    return;
  }
  if ((fmt == Format::ppm) != (img.channels == 3))
    throw InvalidArgument(path.string() + ": channel count does not match the file extension");
  write_pnm(path, img);
}

Image resize_bilinear(const Image& src, std::uint32_t width, std::uint32_t height) {
  if (width == src.width && height == src.height) return src;
  Image dst(width, height, src.channels);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (std::uint32_t y = 0; y < height; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    auto y0 = static_cast<std::uint32_t>(fy);
    std::uint32_t y1 = std::min(y0 + 1, src.height - 1);
    double wy = fy - y0;
    for (std::uint32_t x = 0; x < width; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      auto x0 = static_cast<std::uint32_t>(fx);
      std::uint32_t x1 = std::min(x0 + 1, src.width - 1);
      double wx = fx - x0;
      auto* out = dst.at(x, y);
      for (std::uint8_t c = 0; c < src.channels; ++c) {
        double top = src.at(x0, y0)[c] * (1 - wx) + src.at(x1, y0)[c] * wx;
        double bottom = src.at(x0, y1)[c] * (1 - wx) + src.at(x1, y1)[c] * wx;
        double v = top * (1 - wy) + bottom * wy;
        out[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return dst;
}

}  // namespace defgrade::image
