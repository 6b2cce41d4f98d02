#include "latentseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace latentseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_gray8(const std::string& path, int height, int width, const std::vector<std::uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed: " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(r) * width));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_gray8(const std::string& path, int& height, int& width) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open for reading: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed: " + path);
  }
  std::vector<std::uint8_t> bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png read failed: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(width)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported png layout: " + path);
  }
  bytes.resize(static_cast<std::size_t>(height) * width);
  for (int r = 0; r < height; ++r) png_read_row(png, bytes.data() + static_cast<std::size_t>(r) * width, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace

void write_png(const std::string& path, const SliceImage& image) {
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image.pixels[i]);
  write_gray8(path, image.height, image.width, bytes);
}

SliceImage read_png_image(const std::string& path) {
  int h = 0, w = 0;
  auto bytes = read_gray8(path, h, w);
  SliceImage image(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) image.pixels[i] = bytes[i] / 255.0;
  return image;
}

void write_png(const std::string& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> bytes(mask.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.pixels[i] ? 255 : 0;
  write_gray8(path, mask.height, mask.width, bytes);
}

BinaryMask read_png_mask(const std::string& path) {
  int h = 0, w = 0;
  auto bytes = read_gray8(path, h, w);
  BinaryMask mask(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) mask.pixels[i] = bytes[i] ? 1 : 0;
  return mask;
}

SliceImage quantize8(const SliceImage& image) {
  SliceImage out = image;
  for (auto& v : out.pixels) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace latentseg
