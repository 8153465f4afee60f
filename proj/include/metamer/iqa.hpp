#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metamer/image.hpp"
#include "metamer/synthesis.hpp"
#include "metamer/texture_stats.hpp"

namespace metamer {

// Mean over all entries of the squared difference.
double mse(const ImageBuffer& a, const ImageBuffer& b);

// Texture-tolerant distance standing in for DISTS:
//   alpha * n(stat_distance) + (1 - alpha) * n(RMSE of Gaussian level 3)
// with n(d) = d / (d + median). Inputs are converted to grayscale and
// center-cropped to a power-of-two square for the statistics.
struct PerceptualConfig {
  StatConfig stats;
  // When stats.group_weights is unset, the inverse-cardinality weights are
  // multiplied by these gains. Magnitude means are small numbers and carry
  // the spectral signature; skew and kurtosis are noisy on small crops.
  std::array<double, kStatGroupCount> group_gain{0.1, 1.0, 100.0, 1.0, 1.0};
  double alpha = 0.5;
  double stat_median = 1.0;
  double structure_median = 1.0;
  int structure_level = 3;  // lowered automatically for small images

  void validate() const;
};

// The statistic config used for an n x n crop: fitted to n, with weights.
StatConfig perceptual_stat_config(const PerceptualConfig& cfg, int n);

double perceptual_distance(const ImageBuffer& a, const ImageBuffer& b, const PerceptualConfig& cfg);
double perceptual_distance(const ImageBuffer& a, const ImageBuffer& b, const StatConfig& cfg);

// Raw (unnormalized) components, for calibration.
struct PerceptualParts {
  double stat = 0.0;
  double structure = 0.0;
};
PerceptualParts perceptual_parts(const ImageBuffer& a, const ImageBuffer& b, const PerceptualConfig& cfg);

// Medians of both components over all pairs of distinct target images.
PerceptualConfig calibrate_perceptual(const std::vector<ImageBuffer>& targets, PerceptualConfig cfg);

struct PerceptualMetric {
  std::string id;
  std::function<double(const ImageBuffer&, const ImageBuffer&)> distance;
  nlohmann::json params = nlohmann::json::object();  // enters optimizer cache keys
};
PerceptualMetric mse_metric();
PerceptualMetric perceptual_metric(PerceptualConfig cfg);

// ---------------------------------------------------------------------------

struct ImagePair {
  std::string cls;
  std::string image_id;
  std::string family;     // standard | robust | texform
  std::string condition;  // orig_vs_synth | synth_vs_synth
  std::string label;      // e.g. "original~seed1"
  ImageBuffer a, b;
};

struct IQAScore {
  std::size_t pair = 0;
  int level = 0;
  std::string metric;
  double score = 0.0;
};

struct IQAAggregate {
  std::string family, condition, metric;
  int level = 0;
  std::size_t n = 0;
  double mean = 0.0;
  double se = 0.0;  // sample sd / sqrt(n)
  double low() const { return mean - 2 * se; }
  double high() const { return mean + 2 * se; }
};

struct IQAReport {
  std::vector<ImagePair> pairs;  // images dropped after scoring
  std::vector<IQAScore> scores;
  std::vector<IQAAggregate> aggregates;
  std::vector<std::string> skipped;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

IQAReport pyramid_iqa(std::vector<ImagePair> pairs, const std::vector<PerceptualMetric>& metrics,
                      const std::vector<int>& levels = {0, 3});

// Pairs from a stimulus set: original vs each seed (orig_vs_synth) and
// seed vs seed (synth_vs_synth) for each requested family.
std::vector<ImagePair> stimulus_pairs(const StimulusSet& set, const std::vector<std::string>& families,
                                      const std::vector<std::string>& conditions, std::vector<std::string>* skipped);
IQAReport pyramid_iqa(const StimulusSet& set, const std::vector<PerceptualMetric>& metrics,
                      const std::vector<int>& levels = {0, 3},
                      const std::vector<std::string>& families = stimulus_conditions(),
                      const std::vector<std::string>& conditions = {"orig_vs_synth", "synth_vs_synth"});

// ---------------------------------------------------------------------------
// Texform parameter search

struct OptimizationPair {
  std::string id;
  ImageBuffer target;     // x
  ImageBuffer reference;  // x^ (e.g. robust stimulus)
  std::uint64_t seed = 0;
};

struct OptimizeOptions {
  StatConfig stat_cfg;            // fitted to each target
  SynthesisConfig synthesis;      // seed is taken from each pair
  int min_region_px = 16;
  std::optional<double> z_y;      // fixation row (default mid-height)
  std::optional<std::filesystem::path> cache_dir;
  int workers = 1;
};

inline const std::vector<double>& default_s_grid() {
  static const std::vector<double> g{0.25, 0.4, 0.5, 0.6, 0.8};
  return g;
}
inline const std::vector<double>& default_z_grid() {
  static const std::vector<double> g{448, 640, 832};
  return g;
}

struct GridPoint {
  double s = 0.0, z = 0.0;
  bool valid = false;
  std::string error;
  double Z = 0.0;
  double mean_texform = 0.0;    // E[Q(x, x~)]
  double mean_reference = 0.0;  // E[Q(x, x^)]
  std::vector<double> q_texform, q_reference;
  int non_converged = 0;
  bool from_cache = false;
  std::string key;
};

struct OptimizationResult {
  std::vector<GridPoint> grid;
  std::optional<std::size_t> best;  // index into grid
  std::vector<std::size_t> ties;    // other valid points with Z equal to the best
  std::string metric;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Z(s, z) = |mean_i Q(x_i, texform_i(s, z)) - mean_i Q(x_i, x^_i)|, argmin
// over valid grid points, ties toward smaller s then smaller z. Points
// whose synthesis throws or yields a non-finite Z are invalid.
OptimizationResult optimize_texform_params(const std::vector<OptimizationPair>& pairs,
                                           const std::vector<double>& s_grid, const std::vector<double>& z_grid,
                                           const PerceptualMetric& Q, const OptimizeOptions& opts);

// Pairs originals of `targets` with `family`_seedK files of `refs` by
// class, image id and seed; unmatched entries land in `skipped`.
std::vector<OptimizationPair> optimization_pairs(const StimulusSet& targets, const StimulusSet& refs,
                                                 const std::string& family, std::vector<std::string>* skipped);

}  // namespace metamer
