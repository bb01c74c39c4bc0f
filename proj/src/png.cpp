#include "cfkd/png.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cfkd/errors.hpp"
#include "cfkd/io_util.hpp"

namespace cfkd::png {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct ReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void write_cb(png_structp p, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
  out->insert(out->end(), data, data + len);
}

void flush_cb(png_structp) {}

void read_cb(png_structp p, png_bytep data, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(p));
  if (cur->offset + len > cur->bytes.size()) png_error(p, "truncated png");
  std::memcpy(data, cur->bytes.data() + cur->offset, len);
  cur->offset += len;
}

}  // namespace

Image from_unit_gray(std::span<const double> values, std::size_t width, std::size_t height) {
  if (values.size() != width * height) throw ShapeError("png: value count does not match image size");
  Image img{width, height, 1, {}};
  img.pixels.reserve(values.size());
  for (double v : values) img.pixels.push_back(to_byte(v));
  return img;
}

Image diverging(std::span<const double> signed_values, std::size_t width, std::size_t height, double magnitude) {
  if (signed_values.size() != width * height) throw ShapeError("png: value count does not match image size");
  Image img{width, height, 3, {}};
  img.pixels.reserve(signed_values.size() * 3);
  for (double v : signed_values) {
    const double t = std::clamp(v / magnitude, -1.0, 1.0);
    // white at 0, red for positive, blue for negative
    const double fade = 1.0 - std::abs(t);
    const double r = t >= 0 ? 1.0 : fade;
    const double b = t <= 0 ? 1.0 : fade;
    img.pixels.push_back(to_byte(r));
    img.pixels.push_back(to_byte(fade));
    img.pixels.push_back(to_byte(b));
  }
  return img;
}

Image upscale(const Image& img, std::size_t factor) {
  if (factor <= 1) return img;
  Image out{img.width * factor, img.height * factor, img.channels, {}};
  out.pixels.resize(out.width * out.height * out.channels);
  for (std::size_t r = 0; r < out.height; ++r) {
    for (std::size_t c = 0; c < out.width; ++c) {
      const std::size_t src = ((r / factor) * img.width + c / factor) * img.channels;
      const std::size_t dst = (r * out.width + c) * out.channels;
      std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(src), img.channels,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(dst));
    }
  }
  return out;
}

std::vector<std::uint8_t> encode(const Image& img) {
  if (img.width == 0 || img.height == 0) throw Error("png: refusing to encode an empty image");
  if (img.pixels.size() != img.width * img.height * img.channels) throw ShapeError("png: pixel buffer size mismatch");
  png_structp p = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (p == nullptr) throw Error("png: cannot create write struct");
  png_infop info = png_create_info_struct(p);
  std::vector<std::uint8_t> out;
  if (info == nullptr || setjmp(png_jmpbuf(p))) {
    png_destroy_write_struct(&p, &info);
    throw Error("png: encoding failed");
  }
  png_set_write_fn(p, &out, write_cb, flush_cb);
  png_set_IHDR(p, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(p, info);
  const std::size_t stride = img.width * img.channels;
  for (std::size_t r = 0; r < img.height; ++r) {
    png_write_row(p, const_cast<png_bytep>(img.pixels.data() + r * stride));
  }
  png_write_end(p, nullptr);
  png_destroy_write_struct(&p, &info);
  return out;
}

Image decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw Error("png: not a png stream");
  png_structp p = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (p == nullptr) throw Error("png: cannot create read struct");
  png_infop info = png_create_info_struct(p);
  ReadCursor cur{bytes, 0};
  Image img;
  if (info == nullptr || setjmp(png_jmpbuf(p))) {
    png_destroy_read_struct(&p, &info, nullptr);
    throw Error("png: decoding failed");
  }
  png_set_read_fn(p, &cur, read_cb);
  png_read_info(p, info);
  const auto color = png_get_color_type(p, info);
  if (png_get_bit_depth(p, info) != 8 || (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_RGB)) {
    png_destroy_read_struct(&p, &info, nullptr);
    throw Error("png: only 8-bit gray or RGB supported");
  }
  img.width = png_get_image_width(p, info);
  img.height = png_get_image_height(p, info);
  img.channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  img.pixels.resize(img.width * img.height * img.channels);
  for (std::size_t r = 0; r < img.height; ++r) {
    png_read_row(p, img.pixels.data() + r * img.width * img.channels, nullptr);
  }
  png_destroy_read_struct(&p, &info, nullptr);
  return img;
}

void write_file(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode(img);
  io::write_atomic(path, std::span<const std::uint8_t>(bytes));
}

}  // namespace cfkd::png
