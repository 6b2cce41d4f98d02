#pragma once

#include <string>

#include "latentseg/types.hpp"

namespace latentseg {

// 8-bit grayscale PNG. Intensities are stored as round(255 * v).
void write_png(const std::string& path, const SliceImage& image);
SliceImage read_png_image(const std::string& path);

// Masks are stored as 0/255; any nonzero byte reads back as 1.
void write_png(const std::string& path, const BinaryMask& mask);
BinaryMask read_png_mask(const std::string& path);

// Quantizes intensities to the 8-bit grid used on disk.
SliceImage quantize8(const SliceImage& image);

}  // namespace latentseg
