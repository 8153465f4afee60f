#include "metamer/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "metamer/error.hpp"

namespace metamer {

ImageBuffer::ImageBuffer(int width, int height, int channels, double fill)
    : width_(width), height_(height), channels_(channels) {
  if (width < 0 || height < 0) throw DimensionError("negative image dimension");
  if (channels != 1 && channels != 3) throw DimensionError("channels must be 1 or 3");
  data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

ImageBuffer::ImageBuffer(int width, int height, int channels, std::vector<double> data)
    : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
  if (width < 0 || height < 0) throw DimensionError("negative image dimension");
  if (channels != 1 && channels != 3) throw DimensionError("channels must be 1 or 3");
  if (data_.size() != static_cast<std::size_t>(width) * height * channels)
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(width) + "x" +
                         std::to_string(height) + "x" + std::to_string(channels));
}

ImageBuffer ImageBuffer::channel(int c) const {
  if (c < 0 || c >= channels_) throw DimensionError("channel index out of range");
  if (channels_ == 1) return *this;
  ImageBuffer out(width_, height_, 1);
  for (std::size_t i = 0; i < pixel_count(); ++i) out.data_[i] = data_[i * channels_ + c];
  return out;
}

void ImageBuffer::set_channel(int c, const ImageBuffer& plane) {
  if (plane.width_ != width_ || plane.height_ != height_ || plane.channels_ != 1)
    throw DimensionError("plane shape mismatch");
  for (std::size_t i = 0; i < pixel_count(); ++i) data_[i * channels_ + c] = plane.data_[i];
}

bool ImageBuffer::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double ImageBuffer::mean() const {
  if (data_.empty()) return 0.0;
  double s = 0.0;
  for (double v : data_) s += v;
  return s / static_cast<double>(data_.size());
}

double ImageBuffer::variance() const {
  if (data_.empty()) return 0.0;
  const double m = mean();
  double s = 0.0;
  for (double v : data_) s += (v - m) * (v - m);
  return s / static_cast<double>(data_.size());
}

ImageBuffer to_grayscale(const ImageBuffer& img) {
  if (img.channels() == 1) return img;
  ImageBuffer out(img.width(), img.height(), 1);
  auto src = img.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < img.pixel_count(); ++i)
    dst[i] = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
  return out;
}

ImageBuffer clamped(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

ImageBuffer center_crop_pow2(const ImageBuffer& img) {
  int side = 1;
  while (side * 2 <= std::min(img.width(), img.height())) side *= 2;
  if (img.empty()) throw DimensionError("cannot crop an empty image");
  const int x0 = (img.width() - side) / 2;
  const int y0 = (img.height() - side) / 2;
  ImageBuffer out(side, side, img.channels());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

ImageBuffer require_pow2_square(const ImageBuffer& img, bool allow_crop) {
  if (img.width() == img.height() && is_power_of_two(img.width())) return img;
  if (!allow_crop)
    throw DimensionError("image " + std::to_string(img.width()) + "x" +
                         std::to_string(img.height()) +
                         " is not a power-of-two square (cropping disabled)");
  return center_crop_pow2(img);
}

}  // namespace metamer
