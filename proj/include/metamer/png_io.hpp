#pragma once

#include <filesystem>

#include "metamer/image.hpp"

namespace metamer {

// Reads 8- or 16-bit gray/gray+alpha/RGB/RGBA PNGs; intensities map linearly
// to [0,1]. Alpha is dropped; palette images are expanded to RGB.
ImageBuffer read_png(const std::filesystem::path& path);

// Writes a clamped copy of `img` with the given bit depth (8 or 16).
void write_png(const std::filesystem::path& path, const ImageBuffer& img, int bit_depth = 8);

}  // namespace metamer
