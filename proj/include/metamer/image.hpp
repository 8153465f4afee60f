#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace metamer {

// Row-major intensity grid. Values are nominally in [0,1] but are not
// clamped; synthesis iterates legitimately leave that range and clamping
// happens only on export.
class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, int channels = 1, double fill = 0.0);
  ImageBuffer(int width, int height, int channels, std::vector<double> data);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }
  bool empty() const { return data_.empty(); }
  bool same_shape(const ImageBuffer& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }

  double& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  // Single channel `c` as a new 1-channel image.
  ImageBuffer channel(int c) const;
  void set_channel(int c, const ImageBuffer& plane);

  bool all_finite() const;
  double mean() const;
  double variance() const;

  bool operator==(const ImageBuffer& o) const = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<double> data_;
};

// Luma conversion with weights 0.299/0.587/0.114. 1-channel input is
// returned unchanged.
ImageBuffer to_grayscale(const ImageBuffer& img);

// Clamp every value into [0,1].
ImageBuffer clamped(const ImageBuffer& img);

bool is_power_of_two(int n);

// Center crop to the largest power-of-two square that fits.
ImageBuffer center_crop_pow2(const ImageBuffer& img);

// Make `img` a square power-of-two image: returned unchanged when it already
// is one, center-cropped when `allow_crop`, otherwise a DimensionError.
ImageBuffer require_pow2_square(const ImageBuffer& img, bool allow_crop);

}  // namespace metamer
