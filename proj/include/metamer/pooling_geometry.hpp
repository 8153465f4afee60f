#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace metamer {

struct PixelCoord {
  double x = 0.0;  // column
  double y = 0.0;  // row
};

struct PoolingConfig {
  double s = 0.5;           // region diameter / eccentricity
  double z_x = 0.0;         // fixation column, may lie outside the image
  std::optional<double> z_y = std::nullopt;  // fixation row, defaults to mid-height
  int min_region_px = 16;
  int width = 0;
  int height = 0;

  void validate() const;
  PixelCoord fixation() const { return {z_x, z_y.value_or(height / 2.0)}; }
};

struct PoolingRegion {
  int ring = 0;
  int sector = 0;
  PixelCoord center;    // window-weighted centroid
  double eccentricity;  // window-weighted mean distance to fixation
  double diameter;      // max(s * eccentricity, min_region_px)
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // bounding box, exclusive upper
  std::vector<double> window;          // (x1-x0)*(y1-y0), row-major, in [0,1]

  double weight_at(int x, int y) const {
    if (x < x0 || x >= x1 || y < y0 || y >= y1) return 0.0;
    return window[static_cast<std::size_t>(y - y0) * (x1 - x0) + (x - x0)];
  }
};

struct PoolingLayout {
  PoolingConfig config;
  std::vector<PoolingRegion> regions;
  std::vector<std::string> warnings;
  bool global = false;  // one region covering the whole image

  // Full-resolution weight plane per region (width*height each).
  std::vector<std::vector<double>> planes() const;
};

double eccentricity_of(PixelCoord px, const PoolingConfig& cfg);

// Log-polar lattice around the fixation. Radially, windows are cos^2 bumps
// in a warped coordinate u(e) = log e (linear below the eccentricity where
// s*e reaches min_region_px) spaced so adjacent rings overlap by half and
// the half-height width matches s*e. Each ring is split into cos^2 angular
// sectors about one region diameter wide. Ring and sector windows each sum
// to one, so the product lattice is a partition of unity.
PoolingLayout build_regions(const PoolingConfig& cfg);

// Ring spacing in the warped radial coordinate.
double ring_spacing(double s);
double warped_radius(double e, const PoolingConfig& cfg);

nlohmann::json to_json(const PoolingConfig& cfg);
PoolingConfig pooling_config_from_json(const nlohmann::json& j);
// Centers, eccentricities, diameters and bounding boxes (no weights).
nlohmann::json layout_to_json(const PoolingLayout& layout);

}  // namespace metamer
