#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metamer/image.hpp"
#include "metamer/pooling_geometry.hpp"
#include "metamer/texture_stats.hpp"

namespace metamer {

// A differentiable feature map g. Implementations are immutable after
// construction and safe to share read-only across threads.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual std::string id() const = 0;
  virtual std::vector<double> evaluate(const ImageBuffer& img) const = 0;

  struct LossGradient {
    double loss = 0.0;  // 0.5 * ||g(x) - t||^2
    ImageBuffer gradient;
  };
  virtual LossGradient loss_and_gradient(const ImageBuffer& img,
                                         const std::vector<double>& target) const = 0;
  virtual double loss(const ImageBuffer& img, const std::vector<double>& target) const;

  // Gradient of 0.5 * ||g(x) - t||^2 w.r.t. pixels.
  ImageBuffer gradient(const ImageBuffer& img, const std::vector<double>& target) const {
    return loss_and_gradient(img, target).gradient;
  }
  // True when g(x) = g(y) implies x = y (no metamers exist).
  virtual bool injective() const { return false; }
  virtual nlohmann::json describe() const { return {{"id", id()}}; }
};

// Features are the pixels themselves.
class IdentityExtractor : public FeatureExtractor {
 public:
  std::string id() const override { return "identity"; }
  std::vector<double> evaluate(const ImageBuffer& img) const override { return img.vec(); }
  LossGradient loss_and_gradient(const ImageBuffer& img, const std::vector<double>& t) const override;
  bool injective() const override { return true; }
};

// Texture statistics over pooling windows (one global window when the list
// is empty), features scaled so that 0.5*||f - t||^2 is the pooled loss.
class StatsExtractor : public FeatureExtractor {
 public:
  StatsExtractor(int size, StatConfig cfg, std::vector<std::vector<double>> windows = {});
  static std::unique_ptr<StatsExtractor> pooled(const PoolingLayout& layout, StatConfig cfg);

  std::string id() const override { return engine_.window_count() == 1 ? "global_stats" : "pooled_stats"; }
  std::vector<double> evaluate(const ImageBuffer& img) const override;
  LossGradient loss_and_gradient(const ImageBuffer& img, const std::vector<double>& t) const override;
  double loss(const ImageBuffer& img, const std::vector<double>& t) const override;
  nlohmann::json describe() const override;

  const TextureStatistics& engine() const { return engine_; }
  // Unscaled per-window statistics recovered from a feature vector.
  std::vector<std::vector<double>> window_stats(const std::vector<double>& features) const;

 private:
  void check(const ImageBuffer& img) const;
  TextureStatistics engine_;
  std::vector<double> scale_;
};

// Gaussian-pyramid level `level`, times `gain`.
class GaussianLevelExtractor : public FeatureExtractor {
 public:
  GaussianLevelExtractor(int level, double gain = 1.0) : level_(level), gain_(gain) {}
  std::string id() const override { return "gaussian_level" + std::to_string(level_); }
  std::vector<double> evaluate(const ImageBuffer& img) const override;
  LossGradient loss_and_gradient(const ImageBuffer& img, const std::vector<double>& t) const override;

 private:
  int level_;
  double gain_;
};

// Concatenation of several extractors (the loss is the sum of theirs).
class CompositeExtractor : public FeatureExtractor {
 public:
  explicit CompositeExtractor(std::vector<std::shared_ptr<const FeatureExtractor>> parts);
  std::string id() const override;
  std::vector<double> evaluate(const ImageBuffer& img) const override;
  LossGradient loss_and_gradient(const ImageBuffer& img, const std::vector<double>& t) const override;
  double loss(const ImageBuffer& img, const std::vector<double>& t) const override;
  nlohmann::json describe() const override;

 private:
  std::vector<std::vector<double>> split(const std::vector<double>& t) const;
  std::vector<std::shared_ptr<const FeatureExtractor>> parts_;
  mutable std::vector<std::size_t> sizes_;  // filled on first evaluate
};

// Fixed random convolutional network, a desk-scale stand-in for network
// feature inversion: three 3x3 stride-2 convolutions (1 -> 6 -> 12 -> 12
// channels, zero padding) with tanh after each; features are the final
// activations. Weights are N(0, 1/fan_in) from `seed`.
class RandomConvExtractor : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(std::uint64_t seed = 7);
  std::string id() const override { return "random_conv"; }
  std::vector<double> evaluate(const ImageBuffer& img) const override;
  LossGradient loss_and_gradient(const ImageBuffer& img, const std::vector<double>& t) const override;
  nlohmann::json describe() const override;

  struct Layer {
    int in = 0, out = 0;
    std::vector<double> weight;  // [out][in][3][3]
    std::vector<double> bias;
  };

 private:
  std::uint64_t seed_;
  std::vector<Layer> layers_;
};

enum class Optimizer { kLineSearch, kAdam };

struct SynthesisConfig {
  std::uint64_t seed = 0;
  int max_steps = 4000;
  double initial_step = 0.0;  // 0: pick from the first gradient
  double tolerance = 1e-3;    // relative loss at convergence
  double lambda = 1.0;        // structural prior weight (texforms)
  Optimizer optimizer = Optimizer::kLineSearch;
  double adam_rate = 0.01;

  void validate() const;
};

nlohmann::json to_json(const SynthesisConfig& cfg);
SynthesisConfig synthesis_config_from_json(const nlohmann::json& j);

struct SynthesisResult {
  ImageBuffer image;
  std::vector<double> loss_trace;  // loss at the start and after each accepted step
  bool converged = false;
  std::string status;  // converged | max_steps | stalled | exact
  int steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double feature_distance = 0.0;  // ||g(x') - g(target)||
  double pixel_mse = 0.0;         // to the target
  std::uint64_t seed = 0;
  std::string target_id;  // free-form label used by duplicate detection
};

// Uniform noise in [0.4, 0.6] with the given shape.
ImageBuffer initial_image(int width, int height, int channels, std::uint64_t seed);

// Minimize 0.5 * ||g(x) - g(target)||^2 from the seeded noise image.
SynthesisResult invert_features(const FeatureExtractor& g, const ImageBuffer& target,
                                const SynthesisConfig& cfg);
// Same, from an explicit starting image.
SynthesisResult invert_features_from(const FeatureExtractor& g, const std::vector<double>& target_features,
                                     ImageBuffer x0, const SynthesisConfig& cfg,
                                     const ImageBuffer* target = nullptr);

// Texform extractor: pooled statistics plus sqrt(2*lambda) * Gaussian level 3,
// so the loss is pooled loss + lambda * ||G3(x) - G3(t)||^2.
std::shared_ptr<const FeatureExtractor> texform_extractor(const PoolingLayout& layout,
                                                          const StatConfig& stat_cfg, double lambda);

// Pooled-statistics synthesis with a coarse structural prior. Color targets
// are synthesized channel by channel (channel c uses seed + c). `pooling`
// image dimensions are filled in from the target when zero.
SynthesisResult synthesize_texform(const ImageBuffer& target, PoolingConfig pooling, StatConfig stat_cfg,
                                   const SynthesisConfig& cfg);

struct DuplicateReport {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::size_t candidate_pairs = 0;  // pairs sharing a target with different seeds
  double rate = 0.0;                // pairs.size() / candidate_pairs
  int rate_percent = 0;             // rounded
};

// Pairs of outputs from different seeds (and the same target_id when set)
// whose pixel MSE is exactly zero.
DuplicateReport detect_duplicates(const std::vector<SynthesisResult>& results);
DuplicateReport detect_duplicates(const std::vector<ImageBuffer>& images, const std::vector<std::uint64_t>& seeds,
                                  const std::vector<std::string>& targets);

// PNG plus a JSON sidecar (<stem>.json) with the loss trace and config.
void write_synthesis_output(const std::filesystem::path& png, const SynthesisResult& r,
                            const nlohmann::json& config);
nlohmann::json result_summary(const SynthesisResult& r);

// On-disk stimulus set: root/class/imageid/{original,standard_seedK,
// robust_seedK,texform_seedK}.png
struct StimulusItem {
  std::string cls;
  std::string image_id;
  std::optional<std::filesystem::path> original;
  // condition -> seed -> file
  std::map<std::string, std::map<int, std::filesystem::path>> synth;
};

struct StimulusSet {
  std::filesystem::path root;
  std::vector<StimulusItem> items;
  std::map<std::string, int> class_counts;  // images per class
  std::vector<std::string> conditions;
  std::vector<int> seeds;
  std::vector<std::string> missing;    // relative paths
  std::vector<std::string> malformed;  // unrecognised entries
  std::vector<std::string> duplicates; // "cls/id/condition seedA seedB"

  const StimulusItem* find(const std::string& cls, const std::string& id) const;
  nlohmann::json manifest() const;
};

inline const std::vector<std::string>& stimulus_conditions() {
  static const std::vector<std::string> c{"standard", "robust", "texform"};
  return c;
}

// `manifest` may pin "classes", "conditions" and "seeds"; anything absent
// is inferred from what is on disk.
StimulusSet ingest_stimulus_set(const std::filesystem::path& root, const nlohmann::json& manifest = {});

}  // namespace metamer
