#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "latentseg/errors.hpp"

namespace latentseg {

// Grayscale slice with intensities in [0,1], row-major.
struct SliceImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  SliceImage() = default;
  SliceImage(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return pixels.size(); }
  bool operator==(const SliceImage&) const = default;
};

// Binary mask, values exactly 0 or 1.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return pixels.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : pixels) n += v;
    return n;
  }
  bool empty_foreground() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

// Dense double-precision array. Latents are (1, c, h, w); pseudo-RGB images
// are (3, H, W); prototypes are (c).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    data.assign(n, fill);
  }

  int dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

using LatentTensor = Tensor;
using Prototype = std::vector<double>;

inline void require_same_shape(const SliceImage& image, const BinaryMask& mask, const char* op) {
  if (image.height != mask.height || image.width != mask.width) {
    throw ShapeError(std::string(op) + ": image " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " vs mask " + std::to_string(mask.height) +
                     "x" + std::to_string(mask.width));
  }
}

inline void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(op) + ": mask shapes differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width) + ")");
  }
}

// Nearest-neighbor resampling of a mask to an (h, w) grid: cell (i, j) takes
// the source pixel at floor((i + 0.5) * H / h), floor((j + 0.5) * W / w).
BinaryMask downsample_nearest(const BinaryMask& mask, int h, int w);

}  // namespace latentseg
