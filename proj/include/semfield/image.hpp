#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "semfield/common.hpp"

namespace semfield {

// H x W x 3 RGB image with channel values in [0, 1], stored row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0.0f) {}

  float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  bool operator==(const Image&) const = default;
};

// H x W single-channel class-index map; kIgnoreLabel marks unlabeled pixels.
struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int w, int h, std::uint8_t fill = kIgnoreLabel)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  bool operator==(const LabelMap&) const = default;
};

inline std::uint8_t quantize_channel(float v) {
  const float clamped = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

inline float dequantize_channel(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  explicit PngFile(const std::string& path, const char* mode) : fp(std::fopen(path.c_str(), mode)) {}
  ~PngFile() {
    if (fp != nullptr) std::fclose(fp);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

inline void write_png_raw(const std::string& path, int width, int height, int channels,
                          const std::vector<std::uint8_t>& bytes) {
  PngFile file(path, "wb");
  if (file.fp == nullptr) throw Error("cannot write PNG: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng write error: " + path);
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any 8-bit PNG, converting to the requested channel count (1 or 3).
inline std::vector<std::uint8_t> read_png_raw(const std::string& path, int channels, int& width, int& height) {
  PngFile file(path, "rb");
  if (file.fp == nullptr) throw Error("cannot open PNG: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialisation failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("invalid PNG file: " + path);
  }
  png_init_io(png, file.fp);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool source_gray = (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA);
  if (channels == 3 && source_gray) png_set_gray_to_rgb(png);
  if (channels == 1 && !source_gray) throw Error("expected single-channel PNG: " + path);
  png_read_update_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  if (row_bytes != static_cast<std::size_t>(width) * channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("unsupported PNG layout: " + path);
  }
  std::vector<std::uint8_t> bytes(row_bytes * height);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[y] = bytes.data() + static_cast<std::size_t>(y) * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace detail

inline void write_png(const std::string& path, const Image& image) {
  std::vector<std::uint8_t> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_channel(image.data[i]);
  detail::write_png_raw(path, image.width, image.height, 3, bytes);
}

inline void write_png(const std::string& path, const LabelMap& labels) {
  detail::write_png_raw(path, labels.width, labels.height, 1, labels.data);
}

inline Image read_image_png(const std::string& path) {
  Image image;
  const auto bytes = detail::read_png_raw(path, 3, image.width, image.height);
  image.data.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) image.data[i] = dequantize_channel(bytes[i]);
  return image;
}

inline LabelMap read_label_png(const std::string& path) {
  LabelMap labels;
  labels.data = detail::read_png_raw(path, 1, labels.width, labels.height);
  return labels;
}

// Colour palette used when label maps are dumped for viewing.
inline Image colorize_labels(const LabelMap& labels) {
  static constexpr std::array<std::array<float, 3>, 8> kPalette = {{{0.50f, 0.50f, 0.50f},
                                                                    {0.90f, 0.20f, 0.20f},
                                                                    {0.20f, 0.70f, 0.20f},
                                                                    {0.20f, 0.30f, 0.90f},
                                                                    {0.90f, 0.80f, 0.20f},
                                                                    {0.70f, 0.30f, 0.80f},
                                                                    {0.20f, 0.80f, 0.80f},
                                                                    {0.95f, 0.55f, 0.10f}}};
  Image out(labels.width, labels.height);
  for (int y = 0; y < labels.height; ++y) {
    for (int x = 0; x < labels.width; ++x) {
      const std::uint8_t l = labels.at(x, y);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = l == kIgnoreLabel ? 0.0f : kPalette[l % kPalette.size()][c];
    }
  }
  return out;
}

}  // namespace semfield
