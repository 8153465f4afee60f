#include "metamer/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <cstdio>
#include <memory>
#include <vector>

#include "metamer/error.hpp"

namespace metamer {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw IoError(msg); }
void png_warn(png_structp, png_const_charp) {}

}  // namespace

ImageBuffer read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw IoError(path.string() + " is not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_swap(png);  // little-endian host order
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  depth = png_get_bit_depth(png, info);
  const int file_channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);

  std::vector<unsigned char> raw(rowbytes * height);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);

  const int color_channels = file_channels >= 3 ? 3 : 1;
  const double scale = depth == 16 ? 1.0 / 65535.0 : 1.0 / 255.0;
  ImageBuffer img(width, height, color_channels);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < color_channels; ++c) {
        const std::size_t k = static_cast<std::size_t>(x) * file_channels + c;
        double v;
        if (depth == 16) {
          std::uint16_t s;
          std::memcpy(&s, rows[y] + 2 * k, 2);
          v = s * scale;
        } else {
          v = rows[y][k] * scale;
        }
        img.at(x, y, c) = v;
      }
    }
  }
  return img;
}

void write_png(const std::filesystem::path& path, const ImageBuffer& img, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw IoError("bit depth must be 8 or 16");
  if (img.empty()) throw IoError("refusing to write an empty image");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};

  png_init_io(png, fp.get());
  const int color = img.channels() == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, img.width(), img.height(), bit_depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);

  const int bytes = bit_depth / 8;
  const double maxval = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<unsigned char> row(static_cast<std::size_t>(img.width()) * img.channels() * bytes);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        const double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
        const auto q = static_cast<std::uint16_t>(std::lround(v * maxval));
        const std::size_t k = (static_cast<std::size_t>(x) * img.channels() + c) * bytes;
        if (bit_depth == 16)
          std::memcpy(row.data() + k, &q, 2);
        else
          row[k] = static_cast<unsigned char>(q);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

}  // namespace metamer
