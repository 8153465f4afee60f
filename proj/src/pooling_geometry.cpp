#include "metamer/pooling_geometry.hpp"

#include <cmath>
#include <map>
#include <numbers>

#include "metamer/error.hpp"

namespace metamer {
namespace {

constexpr double kPi = std::numbers::pi;

double cos2(double t) {
  const double c = std::cos(t);
  return c * c;
}

// Eccentricity at which s*e equals the minimum region size.
double linear_limit(const PoolingConfig& cfg) { return cfg.min_region_px / cfg.s; }

double unwarp(double u, const PoolingConfig& cfg) {
  const double e0 = linear_limit(cfg);
  const double l0 = std::log(e0);
  return u >= l0 ? std::exp(u) : e0 + (u - l0) * e0;
}

int sector_count(int ring, const PoolingConfig& cfg) {
  const double u = std::log(linear_limit(cfg)) + ring * ring_spacing(cfg.s);
  const double e = unwarp(u, cfg);
  if (e <= 0.0) return 1;
  const double d = std::max(cfg.s * e, static_cast<double>(cfg.min_region_px));
  return std::max(1, static_cast<int>(std::lround(2 * kPi * e / d)));
}

struct Accum {
  int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
  std::vector<std::pair<std::size_t, double>> px;
};

}  // namespace

void PoolingConfig::validate() const {
  if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("pooling scaling factor s must be > 0");
  if (min_region_px < 8) throw ConfigError("min_region_px must be >= 8");
  if (width < 1 || height < 1) throw ConfigError("pooling config needs positive image dimensions");
  if (!std::isfinite(z_x) || (z_y && !std::isfinite(*z_y))) throw ConfigError("fixation must be finite");
}

double eccentricity_of(PixelCoord px, const PoolingConfig& cfg) {
  const PixelCoord z = cfg.fixation();
  return std::hypot(px.x - z.x, px.y - z.y);
}

double ring_spacing(double s) { return 2.0 * std::asinh(s / 2.0); }

double warped_radius(double e, const PoolingConfig& cfg) {
  const double e0 = linear_limit(cfg);
  return e >= e0 ? std::log(e) : std::log(e0) + (e - e0) / e0;
}

std::vector<std::vector<double>> PoolingLayout::planes() const {
  const std::size_t w = config.width, h = config.height;
  std::vector<std::vector<double>> out;
  for (const auto& r : regions) {
    std::vector<double> p(w * h, 0.0);
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x) p[y * w + x] = r.weight_at(x, y);
    out.push_back(std::move(p));
  }
  return out;
}

PoolingLayout build_regions(const PoolingConfig& cfg) {
  cfg.validate();
  PoolingLayout layout;
  layout.config = cfg;
  const int w = cfg.width, h = cfg.height;
  const PixelCoord z = cfg.fixation();

  const double center_ecc = eccentricity_of({(w - 1) / 2.0, (h - 1) / 2.0}, cfg);
  if (cfg.s * center_ecc >= std::hypot(w, h)) {
    PoolingRegion r;
    r.x1 = w;
    r.y1 = h;
    r.window.assign(static_cast<std::size_t>(w) * h, 1.0);
    double cx = 0, cy = 0, ce = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        cx += x;
        cy += y;
        ce += eccentricity_of({double(x), double(y)}, cfg);
      }
    const double n = static_cast<double>(w) * h;
    r.center = {cx / n, cy / n};
    r.eccentricity = ce / n;
    r.diameter = std::max(cfg.s * r.eccentricity, double(cfg.min_region_px));
    layout.regions.push_back(std::move(r));
    layout.global = true;
    layout.warnings.push_back("scaling factor " + std::to_string(cfg.s) +
                              " makes one region cover the image; using a single global region");
    return layout;
  }

  const double du = ring_spacing(cfg.s);
  const double u0 = std::log(linear_limit(cfg));
  std::map<int, int> sectors;
  auto sectors_of = [&](int j) {
    auto it = sectors.find(j);
    if (it == sectors.end()) it = sectors.emplace(j, sector_count(j, cfg)).first;
    return it->second;
  };

  std::map<std::pair<int, int>, Accum> acc;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double e = std::hypot(x - z.x, y - z.y);
      const double t = (warped_radius(e, cfg) - u0) / du;
      const double theta = std::atan2(y - z.y, x - z.x);
      const int jlo = static_cast<int>(std::floor(t));
      for (int j = jlo; j <= jlo + 1; ++j) {
        const double d = t - j;
        if (std::abs(d) >= 1.0) continue;
        const double rw = cos2(kPi / 2 * d);
        if (rw <= 0.0) continue;
        const int n = sectors_of(j);
        const double a = 2 * kPi / n;
        for (int k = 0; k < n; ++k) {
          double aw = 1.0;
          if (n > 1) {
            double dt = std::remainder(theta - k * a, 2 * kPi);
            if (std::abs(dt) >= a) continue;
            aw = cos2(kPi / 2 * dt / a);
          }
          const double wgt = rw * aw;
          if (wgt <= 0.0) continue;
          Accum& r = acc[{j, k}];
          r.x0 = std::min(r.x0, x);
          r.y0 = std::min(r.y0, y);
          r.x1 = std::max(r.x1, x + 1);
          r.y1 = std::max(r.y1, y + 1);
          r.px.emplace_back(static_cast<std::size_t>(y) * w + x, wgt);
        }
      }
    }

  for (auto& [key, a] : acc) {
    PoolingRegion r;
    r.ring = key.first;
    r.sector = key.second;
    r.x0 = a.x0;
    r.y0 = a.y0;
    r.x1 = a.x1;
    r.y1 = a.y1;
    const int bw = r.x1 - r.x0;
    r.window.assign(static_cast<std::size_t>(bw) * (r.y1 - r.y0), 0.0);
    double m = 0, cx = 0, cy = 0, ce = 0;
    for (const auto& [i, wgt] : a.px) {
      const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
      r.window[static_cast<std::size_t>(y - r.y0) * bw + (x - r.x0)] = wgt;
      m += wgt;
      cx += wgt * x;
      cy += wgt * y;
      ce += wgt * std::hypot(x - z.x, y - z.y);
    }
    r.center = {cx / m, cy / m};
    r.eccentricity = ce / m;
    r.diameter = std::max(cfg.s * r.eccentricity, double(cfg.min_region_px));
    layout.regions.push_back(std::move(r));
  }
  return layout;
}

nlohmann::json to_json(const PoolingConfig& cfg) {
  const PixelCoord z = cfg.fixation();
  return {{"s", cfg.s},
          {"z", {z.x, z.y}},
          {"min_region_px", cfg.min_region_px},
          {"width", cfg.width},
          {"height", cfg.height}};
}

PoolingConfig pooling_config_from_json(const nlohmann::json& j) {
  try {
    PoolingConfig cfg;
    cfg.s = j.at("s").get<double>();
    cfg.width = j.at("width").get<int>();
    cfg.height = j.at("height").get<int>();
    cfg.min_region_px = j.value("min_region_px", cfg.min_region_px);
    const auto& z = j.at("z");
    if (z.is_array()) {
      cfg.z_x = z.at(0).get<double>();
      if (z.size() > 1 && !z[1].is_null()) cfg.z_y = z[1].get<double>();
    } else {
      cfg.z_x = z.get<double>();
    }
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad pooling config: ") + e.what());
  }
}

nlohmann::json layout_to_json(const PoolingLayout& layout) {
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : layout.regions)
    regions.push_back({{"ring", r.ring},
                       {"sector", r.sector},
                       {"center", {r.center.x, r.center.y}},
                       {"eccentricity", r.eccentricity},
                       {"diameter", r.diameter},
                       {"bbox", {r.x0, r.y0, r.x1, r.y1}}});
  return {{"config", to_json(layout.config)},
          {"global", layout.global},
          {"warnings", layout.warnings},
          {"regions", std::move(regions)}};
}

}  // namespace metamer
