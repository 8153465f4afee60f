#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "metamer/psychophysics.hpp"

namespace metamer {

struct BootstrapOptions {
  int samples = 10000;
  double level = 0.95;
  std::uint64_t seed = 1;
  void validate() const;
};

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
};

// Percentile bootstrap of a proportion: each resample draws n trials with
// replacement from k successes and n - k failures, which is a
// Binomial(n, k / n) count. Deterministic given the seed.
ConfidenceInterval bootstrap_ci(int k, int n, const BootstrapOptions& opts = {});

enum class PoolMode { kPooledTrials, kMeanOfSubjects };
const char* pool_mode_name(PoolMode m);
PoolMode pool_mode_from_name(const std::string& s);

struct CurvePoint {
  double eccentricity_deg = 0.0;
  int k = 0;
  int n = 0;
  double proportion = 0.0;
  double low = 0.0;
  double high = 0.0;
};

struct PsychometricCurve {
  Condition condition;
  Task task = Task::kOddity;
  double chance = 1.0 / 3.0;
  PoolMode mode = PoolMode::kPooledTrials;
  int subjects = 1;
  std::vector<CurvePoint> points;  // ascending eccentricity

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

PsychometricCurve curve_from_json(const nlohmann::json& j);

// One point per eccentricity of `condition` across the subjects' tables.
// Pooled trials sums k and n before bootstrapping; mean of subjects averages
// subject proportions and bootstraps each subject's trials. Throws
// StructureError when the condition has no data or the tasks disagree.
PsychometricCurve build_curve(const std::vector<CellTable>& subjects, const Condition& condition,
                              PoolMode mode = PoolMode::kPooledTrials, const BootstrapOptions& opts = {});

// p(r) = floor + (ceiling - floor) / (1 + exp(beta (r - r0))), floor fixed at
// chance, beta > 0. Without measurable decay the curve is flat at `ceiling`
// and r0 is +infinity.
struct SigmoidFit {
  double floor = 0.0;
  double ceiling = 1.0;
  double r0 = 0.0;
  double beta = 0.0;
  double log_likelihood = 0.0;
  double flat_log_likelihood = 0.0;
  bool decay = false;
  std::vector<std::string> flags;  // "no measurable decay", "degenerate"
  double ecc_min = 0.0;            // tested range
  double ecc_max = 0.0;

  double at(double r) const;
  bool has_flag(const std::string& f) const;
  nlohmann::json to_json() const;
};

// Binomial maximum likelihood via Nelder-Mead from a grid of starts. Decay
// is accepted when the likelihood ratio against a flat model exceeds the
// 95% chi-square quantile with 2 degrees of freedom. Needs >= 3 points.
SigmoidFit fit_sigmoid(const PsychometricCurve& curve);

struct SigmoidSE {
  double ceiling = 0.0;
  double r0 = 0.0;
  double beta = 0.0;
};

// Parametric bootstrap: resample counts from the fitted curve and refit
// from the fitted parameters. Only meaningful for decaying fits.
SigmoidSE sigmoid_bootstrap_se(const PsychometricCurve& curve, const SigmoidFit& fit, int resamples,
                               std::uint64_t seed);

struct DiffPoint {
  double eccentricity_deg = 0.0;
  double difference = 0.0;  // a - b
  double low = 0.0;
  double high = 0.0;
  bool covers_zero = true;
};

struct CurveComparison {
  std::string a;
  std::string b;
  std::vector<DiffPoint> points;
  double max_abs_difference = 0.0;
  double point_level = 0.0;  // Bonferroni-adjusted per-point coverage
  bool equal = true;         // every per-point interval covers zero

  nlohmann::json to_json() const;
};

// Per-eccentricity difference of proportions with bootstrap intervals at
// level 1 - (1 - opts.level) / m over m points. Grids must match exactly.
// Swapping the arguments negates every difference and interval.
CurveComparison compare_curves(const PsychometricCurve& a, const PsychometricCurve& b,
                               const BootstrapOptions& opts = {});

// Eccentricity where p(r) = floor + threshold (ceiling - floor), if it lies
// within the tested range of a decaying fit.
std::optional<double> critical_eccentricity(const SigmoidFit& fit, double threshold = 0.5);

// Minimal SVG: points with interval bars, fitted curves and the chance line.
std::string curves_svg(const std::vector<PsychometricCurve>& curves,
                       const std::vector<std::optional<SigmoidFit>>& fits, const std::string& title);

}  // namespace metamer
