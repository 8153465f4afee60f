#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "metamer/image.hpp"
#include "metamer/steerable_pyramid.hpp"

namespace metamer {

// Statistic families, in vector order.
enum class StatGroupId {
  kPixelMarginals = 0,   // mean, variance, skew, excess kurtosis, min, max
  kLowpassAutocorr,      // per scale 0..S, the (m*m+1)/2 unique lags
  kMagnitudeMeans,       // per (scale, orientation)
  kMagnitudeCrossOrientation,  // per scale, orientation pairs k < l
  kMagnitudeCrossScale,        // per scale pair (s, s+1), all orientation pairs
};
inline constexpr int kStatGroupCount = 5;

const char* stat_group_name(StatGroupId g);

struct StatConfig {
  int scales = 4;
  int orientations = 4;
  int autocorr_size = 7;  // m: odd side of the autocorrelation window
  // Per-group loss weights. Unset means inverse group cardinality.
  std::optional<std::array<double, kStatGroupCount>> group_weights = std::nullopt;

  void validate() const;
  // Largest config no finer than this one that fits an n x n image: scales
  // shrink until n / 2^scales >= autocorr_size (autocorr_size shrinks to the
  // next odd value if even one scale does not fit).
  StatConfig fitted_to(int n) const;
  bool same_layout(const StatConfig& o) const {
    return scales == o.scales && orientations == o.orientations && autocorr_size == o.autocorr_size;
  }
  bool operator==(const StatConfig&) const = default;
};

// Per-group entry counts. With S scales, K orientations, A = (m*m+1)/2:
//   6, (S+1)*A, S*K, S*K*(K-1)/2, (S-1)*K*K
std::array<std::size_t, kStatGroupCount> stat_group_sizes(const StatConfig& cfg);
// Total length: 6 + (S+1)A + SK + SK(K-1)/2 + (S-1)K^2.
std::size_t stat_count(const StatConfig& cfg);
// Effective per-group weights (explicit, or 1/cardinality).
std::array<double, kStatGroupCount> effective_group_weights(const StatConfig& cfg);
// Field names in vector order, e.g. "magnitude_means.s1.o2".
std::vector<std::string> stat_field_names(const StatConfig& cfg);

struct StatGroup {
  StatGroupId id;
  std::string name;
  std::vector<double> values;
  double weight = 1.0;
};

struct StatVector {
  StatConfig config;
  std::vector<StatGroup> groups;
  // Conventions applied during extraction, e.g. "zero_variance" when
  // skew/kurtosis were defined as 0, "degenerate_correlation" when a
  // magnitude correlation had zero variance and was defined as 0.
  std::vector<std::string> flags;

  std::vector<double> flat() const;
  std::size_t size() const;
  bool has_flag(const std::string& f) const;
  bool operator==(const StatVector& o) const { return flat() == o.flat() && config == o.config; }
};

StatVector make_stat_vector(const StatConfig& cfg, const std::vector<double>& flat,
                            std::vector<std::string> flags = {});

// Global statistics of a grayscale square power-of-two image.
StatVector compute_stats(const ImageBuffer& img, const StatConfig& cfg);

// Weighted L2 over groups: sqrt(sum_g w_g * ||a_g - b_g||^2). Throws
// ConfigError when the vectors come from different configurations.
double stat_distance(const StatVector& a, const StatVector& b);

// Gradient of 0.5 * stat_distance(stats(img), target)^2 w.r.t. pixels.
ImageBuffer stat_gradient(const ImageBuffer& img, const StatVector& target, const StatConfig& cfg);

// Statistics engine over a fixed image size and a set of pooling windows.
// Each window is a full-resolution weight plane; statistics are weighted by
// the window (block-averaged to each pyramid scale). An empty window list
// means one global window of ones. The loss is
//   0.5 * sum_r mass_r / sum(mass) * sum_g w_g ||s_r,g - t_r,g||^2
// which for a single window reduces to 0.5 * stat_distance^2.
class TextureStatistics {
 public:
  TextureStatistics(int size, StatConfig cfg, std::vector<RealPlane> windows = {});

  int size() const { return size_; }
  const StatConfig& config() const { return cfg_; }
  std::size_t window_count() const { return windows_.size(); }
  std::size_t stats_per_window() const { return count_; }
  double window_share(std::size_t r) const { return windows_[r].share; }

  // Raw statistics, one vector per window.
  std::vector<StatVector> compute(const RealPlane& img) const;

  struct LossGradient {
    double loss = 0.0;
    RealPlane gradient;
  };
  double loss(const RealPlane& img, const std::vector<std::vector<double>>& targets) const;
  LossGradient loss_and_gradient(const RealPlane& img,
                                 const std::vector<std::vector<double>>& targets) const;

  // Flattened features f with 0.5 * ||f(x) - f(t)||^2 equal to the loss.
  std::vector<double> features(const RealPlane& img) const;
  // Per-entry scale sqrt(share_r * w_g) used by features().
  std::vector<double> feature_scale() const;

 private:
  struct Box {
    int x0, y0, x1, y1;  // inclusive-exclusive
  };
  struct Window {
    double share = 1.0;
    std::vector<RealPlane> p;  // normalized weights per scale 0..S
    std::vector<Box> box;
  };
  struct Forward;

  Forward forward(const RealPlane& img) const;
  std::vector<double> window_stats(const Forward& f, const Window& w,
                                   std::vector<std::string>* flags) const;
  void window_backward(const Forward& f, const Window& w, const std::vector<double>& grad_stats,
                       RealPlane& g_pixels, std::vector<RealPlane>& g_lowpass,
                       std::vector<std::vector<RealPlane>>& g_mag,
                       std::vector<std::vector<RealPlane>>& g_parent) const;

  int size_;
  StatConfig cfg_;
  std::size_t count_;
  std::vector<double> weights_;  // per stat entry
  SteerableBank bank_;
  std::vector<Window> windows_;
};

}  // namespace metamer
