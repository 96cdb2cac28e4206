#pragma once

#include <png.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "msae/binary_io.hpp"
#include "msae/error.hpp"

namespace msae {

// 8-bit RGB raster, row-major, no padding.
struct Image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::uint32_t w, std::uint32_t h) : width(w), height(h), rgb(std::size_t{w} * h * 3, 0) {}

  std::array<std::uint8_t, 3> pixel(std::uint32_t x, std::uint32_t y) const {
    const std::size_t o = (std::size_t{y} * width + x) * 3;
    return {rgb[o], rgb[o + 1], rgb[o + 2]};
  }
  void set(std::uint32_t x, std::uint32_t y, std::array<std::uint8_t, 3> c) {
    const std::size_t o = (std::size_t{y} * width + x) * 3;
    rgb[o] = c[0];
    rgb[o + 1] = c[1];
    rgb[o + 2] = c[2];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline std::vector<std::uint8_t> encode_png(const Image& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  pi.width = img.width;
  pi.height = img.height;
  pi.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, img.rgb.data(), 0, nullptr))
    throw InvalidArgument(std::string("png encode failed: ") + pi.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, img.rgb.data(), 0, nullptr))
    throw InvalidArgument(std::string("png encode failed: ") + pi.message);
  out.resize(size);
  return out;
}

inline Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
    throw ParseError(std::string("png decode failed: ") + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Image img(pi.width, pi.height);
  if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw ParseError(std::string("png decode failed: ") + pi.message);
  }
  return img;
}

inline void save_png(const Image& img, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(encode_png(img)));
  w.write_file(path);
}

inline Image load_png(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_png(bytes);
}

}  // namespace msae
