#include "metamer/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <unordered_map>

#include "metamer/error.hpp"
#include "metamer/gaussian_pyramid.hpp"
#include "metamer/png_io.hpp"

namespace metamer {
namespace fs = std::filesystem;

namespace {

double half_sq_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("feature length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return 0.5 * s;
}

double mse_of(const ImageBuffer& a, const ImageBuffer& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.vec()[i] - b.vec()[i]) * (a.vec()[i] - b.vec()[i]);
  return a.size() ? s / a.size() : 0.0;
}

}  // namespace

double FeatureExtractor::loss(const ImageBuffer& img, const std::vector<double>& target) const {
  return half_sq_distance(evaluate(img), target);
}

// ---------------------------------------------------------------------------

FeatureExtractor::LossGradient IdentityExtractor::loss_and_gradient(const ImageBuffer& img,
                                                                    const std::vector<double>& t) const {
  LossGradient out{half_sq_distance(img.vec(), t), img};
  for (std::size_t i = 0; i < t.size(); ++i) out.gradient.vec()[i] -= t[i];
  return out;
}

StatsExtractor::StatsExtractor(int size, StatConfig cfg, std::vector<std::vector<double>> windows)
    : engine_(size, std::move(cfg), std::move(windows)), scale_(engine_.feature_scale()) {}

std::unique_ptr<StatsExtractor> StatsExtractor::pooled(const PoolingLayout& layout, StatConfig cfg) {
  if (layout.config.width != layout.config.height)
    throw DimensionError("pooled statistics need a square image");
  return std::make_unique<StatsExtractor>(layout.config.width, std::move(cfg), layout.planes());
}

void StatsExtractor::check(const ImageBuffer& img) const {
  if (img.channels() != 1 || img.width() != engine_.size() || img.height() != engine_.size())
    throw DimensionError("statistics extractor expects a " + std::to_string(engine_.size()) + "x" +
                         std::to_string(engine_.size()) + " grayscale image");
}

std::vector<double> StatsExtractor::evaluate(const ImageBuffer& img) const {
  check(img);
  return engine_.features(img.vec());
}

std::vector<std::vector<double>> StatsExtractor::window_stats(const std::vector<double>& f) const {
  if (f.size() != scale_.size()) throw DimensionError("feature length mismatch");
  const std::size_t per = engine_.stats_per_window();
  std::vector<std::vector<double>> out(engine_.window_count(), std::vector<double>(per));
  for (std::size_t i = 0; i < f.size(); ++i) out[i / per][i % per] = scale_[i] > 0 ? f[i] / scale_[i] : 0.0;
  return out;
}

FeatureExtractor::LossGradient StatsExtractor::loss_and_gradient(const ImageBuffer& img,
                                                                 const std::vector<double>& t) const {
  check(img);
  auto lg = engine_.loss_and_gradient(img.vec(), window_stats(t));
  return {lg.loss, ImageBuffer(img.width(), img.height(), 1, std::move(lg.gradient))};
}

double StatsExtractor::loss(const ImageBuffer& img, const std::vector<double>& t) const {
  check(img);
  return engine_.loss(img.vec(), window_stats(t));
}

nlohmann::json StatsExtractor::describe() const {
  const auto& c = engine_.config();
  return {{"id", id()},
          {"windows", engine_.window_count()},
          {"scales", c.scales},
          {"orientations", c.orientations},
          {"autocorr_size", c.autocorr_size}};
}

std::vector<double> GaussianLevelExtractor::evaluate(const ImageBuffer& img) const {
  auto v = gaussian_level(img, level_).vec();
  for (double& x : v) x *= gain_;
  return v;
}

FeatureExtractor::LossGradient GaussianLevelExtractor::loss_and_gradient(const ImageBuffer& img,
                                                                         const std::vector<double>& t) const {
  ImageBuffer lv = gaussian_level(img, level_);
  if (lv.size() != t.size()) throw DimensionError("feature length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = gain_ * lv.vec()[i] - t[i];
    loss += r * r;
    lv.vec()[i] = gain_ * r;
  }
  return {0.5 * loss, gaussian_level_adjoint(lv, level_, img.width(), img.height())};
}

CompositeExtractor::CompositeExtractor(std::vector<std::shared_ptr<const FeatureExtractor>> parts)
    : parts_(std::move(parts)) {
  if (parts_.empty()) throw ConfigError("composite extractor needs at least one part");
}

std::string CompositeExtractor::id() const {
  std::string s;
  for (const auto& p : parts_) s += (s.empty() ? "" : "+") + p->id();
  return s;
}

std::vector<double> CompositeExtractor::evaluate(const ImageBuffer& img) const {
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts_) {
    auto f = p->evaluate(img);
    sizes.push_back(f.size());
    out.insert(out.end(), f.begin(), f.end());
  }
  sizes_ = sizes;
  return out;
}

std::vector<std::vector<double>> CompositeExtractor::split(const std::vector<double>& t) const {
  std::size_t total = 0;
  for (auto n : sizes_) total += n;
  if (sizes_.size() != parts_.size() || total != t.size())
    throw DimensionError("composite target does not match its parts (evaluate a target first)");
  std::vector<std::vector<double>> out;
  std::size_t off = 0;
  for (auto n : sizes_) {
    out.emplace_back(t.begin() + off, t.begin() + off + n);
    off += n;
  }
  return out;
}

FeatureExtractor::LossGradient CompositeExtractor::loss_and_gradient(const ImageBuffer& img,
                                                                     const std::vector<double>& t) const {
  const auto ts = split(t);
  LossGradient out;
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    auto lg = parts_[i]->loss_and_gradient(img, ts[i]);
    if (i == 0) {
      out = std::move(lg);
      continue;
    }
    out.loss += lg.loss;
    for (std::size_t k = 0; k < out.gradient.size(); ++k) out.gradient.vec()[k] += lg.gradient.vec()[k];
  }
  return out;
}

double CompositeExtractor::loss(const ImageBuffer& img, const std::vector<double>& t) const {
  const auto ts = split(t);
  double l = 0.0;
  for (std::size_t i = 0; i < parts_.size(); ++i) l += parts_[i]->loss(img, ts[i]);
  return l;
}

nlohmann::json CompositeExtractor::describe() const {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : parts_) parts.push_back(p->describe());
  return {{"id", id()}, {"parts", parts}};
}

// ---------------------------------------------------------------------------
// Random convolutional extractor

namespace {

struct Activation {
  int n = 0, c = 0;  // side, channels
  std::vector<double> v;  // [c][y][x]
};

// 3x3, stride 2, zero padding 1: out side ceil(n/2).
Activation conv_forward(const Activation& in, const RandomConvExtractor::Layer& l) {
  Activation out;
  out.n = (in.n + 1) / 2;
  out.c = l.out;
  out.v.assign(static_cast<std::size_t>(out.c) * out.n * out.n, 0.0);
  for (int o = 0; o < l.out; ++o)
    for (int y = 0; y < out.n; ++y)
      for (int x = 0; x < out.n; ++x) {
        double acc = l.bias[o];
        for (int i = 0; i < l.in; ++i)
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = 2 * y + ky - 1;
            if (iy < 0 || iy >= in.n) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = 2 * x + kx - 1;
              if (ix < 0 || ix >= in.n) continue;
              acc += l.weight[((o * l.in + i) * 3 + ky) * 3 + kx] * in.v[(static_cast<std::size_t>(i) * in.n + iy) * in.n + ix];
            }
          }
        out.v[(static_cast<std::size_t>(o) * out.n + y) * out.n + x] = std::tanh(acc);
      }
  return out;
}

// grad w.r.t. the layer input given grad w.r.t. its (post-tanh) output.
std::vector<double> conv_backward(const Activation& in, const Activation& out, std::vector<double> g,
                                  const RandomConvExtractor::Layer& l) {
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - out.v[i] * out.v[i];
  std::vector<double> gin(in.v.size(), 0.0);
  for (int o = 0; o < l.out; ++o)
    for (int y = 0; y < out.n; ++y)
      for (int x = 0; x < out.n; ++x) {
        const double go = g[(static_cast<std::size_t>(o) * out.n + y) * out.n + x];
        if (go == 0.0) continue;
        for (int i = 0; i < l.in; ++i)
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = 2 * y + ky - 1;
            if (iy < 0 || iy >= in.n) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = 2 * x + kx - 1;
              if (ix < 0 || ix >= in.n) continue;
              gin[(static_cast<std::size_t>(i) * in.n + iy) * in.n + ix] += go * l.weight[((o * l.in + i) * 3 + ky) * 3 + kx];
            }
          }
      }
  return gin;
}

Activation input_activation(const ImageBuffer& img) {
  if (img.channels() != 1 || img.width() != img.height() || img.width() < 8)
    throw DimensionError("random_conv expects a square grayscale image of side >= 8");
  Activation a{img.width(), 1, img.vec()};
  for (double& v : a.v) v -= 0.5;
  return a;
}

}  // namespace

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed) : seed_(seed) {
  std::mt19937_64 rng(seed);
  const int widths[] = {1, 6, 12, 12};
  for (int k = 0; k < 3; ++k) {
    Layer l;
    l.in = widths[k];
    l.out = widths[k + 1];
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(9.0 * l.in));
    l.weight.resize(static_cast<std::size_t>(l.out) * l.in * 9);
    for (double& w : l.weight) w = (k == 0 ? 4.0 : 1.0) * nd(rng);  // first layer sees [-.5,.5] pixels
    l.bias.resize(l.out);
    for (double& b : l.bias) b = 0.1 * nd(rng);
    layers_.push_back(std::move(l));
  }
}

std::vector<double> RandomConvExtractor::evaluate(const ImageBuffer& img) const {
  Activation a = input_activation(img);
  for (const auto& l : layers_) a = conv_forward(a, l);
  return a.v;
}

FeatureExtractor::LossGradient RandomConvExtractor::loss_and_gradient(const ImageBuffer& img,
                                                                      const std::vector<double>& t) const {
  std::vector<Activation> acts{input_activation(img)};
  for (const auto& l : layers_) acts.push_back(conv_forward(acts.back(), l));
  const auto& f = acts.back().v;
  const double loss = half_sq_distance(f, t);
  std::vector<double> g(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) g[i] = f[i] - t[i];
  for (int k = static_cast<int>(layers_.size()) - 1; k >= 0; --k) g = conv_backward(acts[k], acts[k + 1], std::move(g), layers_[k]);
  return {loss, ImageBuffer(img.width(), img.height(), 1, std::move(g))};
}

nlohmann::json RandomConvExtractor::describe() const {
  return {{"id", id()}, {"seed", seed_}, {"channels", {1, 6, 12, 12}}, {"kernel", 3}, {"stride", 2}};
}

// ---------------------------------------------------------------------------
// Optimization

void SynthesisConfig::validate() const {
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (!(tolerance > 0.0)) throw ConfigError("tolerance must be > 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
  if (initial_step < 0.0) throw ConfigError("initial_step must be >= 0");
  if (optimizer == Optimizer::kAdam && !(adam_rate > 0.0)) throw ConfigError("adam_rate must be > 0");
}

nlohmann::json to_json(const SynthesisConfig& c) {
  return {{"seed", c.seed},
          {"max_steps", c.max_steps},
          {"initial_step", c.initial_step},
          {"tolerance", c.tolerance},
          {"lambda", c.lambda},
          {"optimizer", c.optimizer == Optimizer::kAdam ? "adam" : "line_search"},
          {"adam_rate", c.adam_rate}};
}

SynthesisConfig synthesis_config_from_json(const nlohmann::json& j) {
  SynthesisConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.initial_step = j.value("initial_step", c.initial_step);
    c.tolerance = j.value("tolerance", c.tolerance);
    c.lambda = j.value("lambda", c.lambda);
    c.adam_rate = j.value("adam_rate", c.adam_rate);
    const std::string opt = j.value("optimizer", std::string("line_search"));
    if (opt == "adam") c.optimizer = Optimizer::kAdam;
    else if (opt != "line_search") throw ConfigError("unknown optimizer '" + opt + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad synthesis config: ") + e.what());
  }
  c.validate();
  return c;
}

ImageBuffer initial_image(int width, int height, int channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.4, 0.6);
  ImageBuffer img(width, height, channels);
  for (double& v : img.data()) v = u(rng);
  return img;
}

namespace {

void finish(SynthesisResult& r, double loss, const SynthesisConfig& cfg, const ImageBuffer* target) {
  r.final_loss = loss;
  r.feature_distance = std::sqrt(2.0 * loss);
  r.converged = r.initial_loss == 0.0 || loss / r.initial_loss < cfg.tolerance;
  if (r.converged) r.status = "converged";
  if (target) r.pixel_mse = mse_of(r.image, *target);
  r.seed = cfg.seed;
}

SynthesisResult line_search(const FeatureExtractor& g, const std::vector<double>& t, ImageBuffer x,
                            const SynthesisConfig& cfg) {
  SynthesisResult r;
  auto lg = g.loss_and_gradient(x, t);
  double loss = lg.loss;
  r.initial_loss = loss;
  r.loss_trace.push_back(loss);
  r.status = "max_steps";
  double alpha = cfg.initial_step;
  while (r.steps < cfg.max_steps) {
    if (loss == 0.0 || loss / r.initial_loss < cfg.tolerance) break;
    double gg = 0.0, gmax = 0.0;
    for (double v : lg.gradient.data()) {
      gg += v * v;
      gmax = std::max(gmax, std::abs(v));
    }
    if (gg == 0.0 || !std::isfinite(gg)) {
      r.status = "stalled";
      break;
    }
    if (alpha == 0.0) alpha = 0.01 / gmax;
    bool accepted = false;
    ImageBuffer trial = x;
    double trial_loss = 0.0;
    for (int halvings = 0; halvings < 60; ++halvings) {
      for (std::size_t i = 0; i < x.size(); ++i) trial.vec()[i] = x.vec()[i] - alpha * lg.gradient.vec()[i];
      trial_loss = g.loss(trial, t);
      if (std::isfinite(trial_loss) && trial_loss < loss && trial_loss <= loss - 1e-4 * alpha * gg) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      r.status = "stalled";
      break;
    }
    auto next = g.loss_and_gradient(trial, t);
    // Barzilai-Borwein length for the next trial step: s.s / s.y with
    // s = x_new - x and y = g_new - g; fall back to growing the step.
    double ss = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double si = trial.vec()[i] - x.vec()[i];
      ss += si * si;
      sy += si * (next.gradient.vec()[i] - lg.gradient.vec()[i]);
    }
    alpha = sy > 0.0 ? ss / sy : 2.0 * alpha;
    x = std::move(trial);
    lg = std::move(next);
    loss = lg.loss;
    r.loss_trace.push_back(loss);
    ++r.steps;
  }
  r.image = std::move(x);
  return r;
}

// Adam keeps the best iterate; the trace records the best loss so far.
SynthesisResult adam(const FeatureExtractor& g, const std::vector<double>& t, ImageBuffer x,
                     const SynthesisConfig& cfg) {
  SynthesisResult r;
  auto lg = g.loss_and_gradient(x, t);
  r.initial_loss = lg.loss;
  r.loss_trace.push_back(lg.loss);
  r.status = "max_steps";
  double best = lg.loss;
  ImageBuffer best_x = x;
  std::vector<double> m(x.size(), 0.0), v(x.size(), 0.0);
  const double b1 = 0.9, b2 = 0.999;
  for (int k = 1; k <= cfg.max_steps; ++k) {
    if (best == 0.0 || best / r.initial_loss < cfg.tolerance) break;
    if (!std::isfinite(lg.loss)) {
      r.status = "stalled";
      break;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = lg.gradient.vec()[i];
      m[i] = b1 * m[i] + (1 - b1) * gi;
      v[i] = b2 * v[i] + (1 - b2) * gi * gi;
      const double mh = m[i] / (1 - std::pow(b1, k)), vh = v[i] / (1 - std::pow(b2, k));
      x.vec()[i] -= cfg.adam_rate * mh / (std::sqrt(vh) + 1e-12);
    }
    lg = g.loss_and_gradient(x, t);
    if (lg.loss < best) {
      best = lg.loss;
      best_x = x;
    }
    r.loss_trace.push_back(best);
    r.steps = k;
  }
  r.image = std::move(best_x);
  return r;
}

}  // namespace

SynthesisResult invert_features_from(const FeatureExtractor& g, const std::vector<double>& target_features,
                                     ImageBuffer x0, const SynthesisConfig& cfg, const ImageBuffer* target) {
  cfg.validate();
  SynthesisResult r = cfg.optimizer == Optimizer::kAdam ? adam(g, target_features, std::move(x0), cfg)
                                                        : line_search(g, target_features, std::move(x0), cfg);
  finish(r, r.loss_trace.back(), cfg, target);
  return r;
}

SynthesisResult invert_features(const FeatureExtractor& g, const ImageBuffer& target, const SynthesisConfig& cfg) {
  cfg.validate();
  if (target.empty() || !target.all_finite()) throw DimensionError("invert_features: empty or non-finite target");
  const auto t = g.evaluate(target);
  return invert_features_from(g, t, initial_image(target.width(), target.height(), target.channels(), cfg.seed),
                              cfg, &target);
}

std::shared_ptr<const FeatureExtractor> texform_extractor(const PoolingLayout& layout, const StatConfig& stat_cfg,
                                                          double lambda) {
  std::vector<std::shared_ptr<const FeatureExtractor>> parts;
  parts.push_back(StatsExtractor::pooled(layout, stat_cfg));
  if (lambda > 0.0) {
    const int level = std::min(3, max_pyramid_levels(layout.config.width, layout.config.height) - 1);
    parts.push_back(std::make_shared<GaussianLevelExtractor>(level, std::sqrt(2.0 * lambda)));
  }
  return std::make_shared<CompositeExtractor>(std::move(parts));
}

SynthesisResult synthesize_texform(const ImageBuffer& target, PoolingConfig pooling, StatConfig stat_cfg,
                                   const SynthesisConfig& cfg) {
  cfg.validate();
  if (target.empty() || !target.all_finite()) throw DimensionError("synthesize_texform: empty or non-finite target");
  if (target.width() != target.height() || !is_power_of_two(target.width()))
    throw DimensionError("synthesize_texform needs a square power-of-two target");
  if (target.channels() == 3) {
    SynthesisResult out;
    out.image = ImageBuffer(target.width(), target.height(), 3);
    out.converged = true;
    std::vector<std::vector<double>> traces;
    for (int c = 0; c < 3; ++c) {
      SynthesisConfig cc = cfg;
      cc.seed = cfg.seed + c;
      auto r = synthesize_texform(target.channel(c), pooling, stat_cfg, cc);
      out.image.set_channel(c, r.image);
      out.converged = out.converged && r.converged;
      out.steps = std::max(out.steps, r.steps);
      out.initial_loss += r.initial_loss;
      traces.push_back(std::move(r.loss_trace));
    }
    std::size_t len = 0;
    for (const auto& t : traces) len = std::max(len, t.size());
    out.loss_trace.assign(len, 0.0);
    for (const auto& t : traces)
      for (std::size_t i = 0; i < len; ++i) out.loss_trace[i] += t[std::min(i, t.size() - 1)];
    out.final_loss = out.loss_trace.back();
    out.feature_distance = std::sqrt(2.0 * out.final_loss);
    out.status = out.converged ? "converged" : "max_steps";
    out.pixel_mse = mse_of(out.image, target);
    out.seed = cfg.seed;
    return out;
  }
  if (target.channels() != 1) throw DimensionError("synthesize_texform expects 1 or 3 channels");
  if (pooling.width == 0) pooling.width = target.width();
  if (pooling.height == 0) pooling.height = target.height();
  if (pooling.width != target.width() || pooling.height != target.height())
    throw DimensionError("pooling config dimensions do not match the target");

  // A constant target is matched exactly by itself; skip the optimizer.
  const auto [lo, hi] = std::minmax_element(target.vec().begin(), target.vec().end());
  if (*lo == *hi) {
    SynthesisResult r;
    r.image = target;
    r.loss_trace = {0.0};
    r.status = "exact";
    r.converged = true;
    r.seed = cfg.seed;
    return r;
  }
  const auto g = texform_extractor(build_regions(pooling), stat_cfg, cfg.lambda);
  return invert_features(*g, target, cfg);
}

// ---------------------------------------------------------------------------
// Duplicates

DuplicateReport detect_duplicates(const std::vector<ImageBuffer>& images, const std::vector<std::uint64_t>& seeds,
                                  const std::vector<std::string>& targets) {
  if (seeds.size() != images.size() || (!targets.empty() && targets.size() != images.size()))
    throw ConfigError("detect_duplicates: images, seeds and targets differ in length");
  DuplicateReport rep;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < images.size(); ++i) groups[targets.empty() ? "" : targets[i]].push_back(i);
  for (const auto& [_, idx] : groups) {
    std::map<std::uint64_t, std::size_t> per_seed;
    for (auto i : idx) ++per_seed[seeds[i]];
    std::size_t same = 0;
    for (const auto& [s, c] : per_seed) same += c * (c - 1) / 2;
    rep.candidate_pairs += idx.size() * (idx.size() - 1) / 2 - same;

    // Bucket by a hash of the pixels, then confirm with an exact comparison.
    std::unordered_map<std::size_t, std::vector<std::size_t>> buckets;
    for (auto i : idx) {
      std::size_t h = std::hash<int>()(images[i].width()) ^ (std::hash<int>()(images[i].height()) << 1);
      for (double v : images[i].data()) h = h * 1099511628211ULL ^ std::hash<double>()(v == 0.0 ? 0.0 : v);
      buckets[h].push_back(i);
    }
    for (const auto& [h, b] : buckets)
      for (std::size_t a = 0; a < b.size(); ++a)
        for (std::size_t c = a + 1; c < b.size(); ++c) {
          const auto i = b[a], j = b[c];
          if (seeds[i] != seeds[j] && images[i].same_shape(images[j]) && mse_of(images[i], images[j]) == 0.0)
            rep.pairs.emplace_back(std::min(i, j), std::max(i, j));
        }
  }
  std::sort(rep.pairs.begin(), rep.pairs.end());
  rep.rate = rep.candidate_pairs ? static_cast<double>(rep.pairs.size()) / rep.candidate_pairs : 0.0;
  rep.rate_percent = static_cast<int>(std::lround(100.0 * rep.rate));
  return rep;
}

DuplicateReport detect_duplicates(const std::vector<SynthesisResult>& results) {
  std::vector<ImageBuffer> images;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> targets;
  for (const auto& r : results) {
    images.push_back(r.image);
    seeds.push_back(r.seed);
    targets.push_back(r.target_id);
  }
  return detect_duplicates(images, seeds, targets);
}

nlohmann::json result_summary(const SynthesisResult& r) {
  return {{"converged", r.converged},
          {"status", r.status},
          {"steps", r.steps},
          {"seed", r.seed},
          {"initial_loss", r.initial_loss},
          {"final_loss", r.final_loss},
          {"feature_distance", r.feature_distance},
          {"pixel_mse", r.pixel_mse},
          {"loss_trace", r.loss_trace}};
}

void write_synthesis_output(const fs::path& png, const SynthesisResult& r, const nlohmann::json& config) {
  if (png.has_parent_path()) fs::create_directories(png.parent_path());
  write_png(png, clamped(r.image));
  fs::path side = png;
  side.replace_extension(".json");
  std::ofstream out(side);
  if (!out) throw IoError("cannot write " + side.string());
  out << nlohmann::json{{"image", png.filename().string()}, {"config", config}, {"result", result_summary(r)}}.dump(2)
      << "\n";
}

// ---------------------------------------------------------------------------
// Stimulus sets

const StimulusItem* StimulusSet::find(const std::string& cls, const std::string& id) const {
  for (const auto& it : items)
    if (it.cls == cls && it.image_id == id) return &it;
  return nullptr;
}

nlohmann::json StimulusSet::manifest() const {
  nlohmann::json per_class = nlohmann::json::object();
  std::size_t images = 0;
  for (const auto& [c, n] : class_counts) {
    per_class[c] = n;
    images += n;
  }
  nlohmann::json counts = {{"classes", class_counts.size()},
                           {"images", images},
                           {"seeds", seeds.size()},
                           {"conditions", conditions.size()}};
  // Images per class when every class has the same count.
  std::optional<int> uniform;
  for (const auto& [c, n] : class_counts) {
    if (uniform && *uniform != n) {
      uniform.reset();
      break;
    }
    uniform = n;
  }
  counts["images_per_class"] = uniform ? nlohmann::json(*uniform) : nlohmann::json(nullptr);
  nlohmann::json its = nlohmann::json::array();
  for (const auto& it : items) {
    nlohmann::json synth = nlohmann::json::object();
    for (const auto& [cond, files] : it.synth)
      for (const auto& [seed, p] : files) synth[cond][std::to_string(seed)] = fs::relative(p, root).generic_string();
    its.push_back({{"class", it.cls},
                   {"image_id", it.image_id},
                   {"original", it.original ? nlohmann::json(fs::relative(*it.original, root).generic_string())
                                            : nlohmann::json(nullptr)},
                   {"synth", synth}});
  }
  return {{"counts", counts},   {"class_counts", per_class}, {"conditions", conditions}, {"seeds", seeds},
          {"missing", missing}, {"malformed", malformed},    {"duplicates", duplicates}, {"items", its}};
}

StimulusSet ingest_stimulus_set(const fs::path& root, const nlohmann::json& manifest) {
  StimulusSet set;
  set.root = root;
  if (!fs::is_directory(root)) throw IoError("stimulus root is not a directory: " + root.string());
  auto sorted_entries = [](const fs::path& p) {
    std::vector<fs::directory_entry> v(fs::directory_iterator(p), fs::directory_iterator{});
    std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.path().filename() < b.path().filename(); });
    return v;
  };
  const std::regex synth_re("(standard|robust|texform)_seed([0-9]+)\\.png");
  std::set<std::string> conds;
  std::set<int> seeds;
  for (const auto& ce : sorted_entries(root)) {
    const std::string cls = ce.path().filename().string();
    if (!ce.is_directory()) {
      if (cls != "manifest.json") set.malformed.push_back(cls);
      continue;
    }
    set.class_counts[cls] = 0;
    for (const auto& ie : sorted_entries(ce.path())) {
      const std::string id = ie.path().filename().string();
      if (!ie.is_directory()) {
        set.malformed.push_back(cls + "/" + id);
        continue;
      }
      StimulusItem item{cls, id, std::nullopt, {}};
      for (const auto& fe : sorted_entries(ie.path())) {
        const std::string name = fe.path().filename().string();
        std::smatch m;
        if (fe.is_regular_file() && name == "original.png") {
          item.original = fe.path();
        } else if (fe.is_regular_file() && std::regex_match(name, m, synth_re)) {
          const int seed = std::stoi(m[2]);
          item.synth[m[1]][seed] = fe.path();
          conds.insert(m[1]);
          seeds.insert(seed);
        } else {
          set.malformed.push_back(cls + "/" + id + "/" + name);
        }
      }
      ++set.class_counts[cls];
      set.items.push_back(std::move(item));
    }
  }

  if (manifest.is_object() && manifest.contains("conditions")) {
    conds.clear();
    for (const auto& c : manifest["conditions"]) conds.insert(c.get<std::string>());
  }
  if (manifest.is_object() && manifest.contains("seeds")) {
    seeds.clear();
    for (const auto& s : manifest["seeds"]) seeds.insert(s.get<int>());
  }
  if (manifest.is_object() && manifest.contains("classes"))
    for (const auto& c : manifest["classes"])
      if (!set.class_counts.count(c.get<std::string>())) set.missing.push_back(c.get<std::string>() + "/");
  for (const auto& c : stimulus_conditions())
    if (conds.count(c)) set.conditions.push_back(c);
  for (const auto& c : conds)
    if (std::find(set.conditions.begin(), set.conditions.end(), c) == set.conditions.end())
      set.conditions.push_back(c);
  set.seeds.assign(seeds.begin(), seeds.end());

  for (const auto& it : set.items) {
    const std::string base = it.cls + "/" + it.image_id + "/";
    if (!it.original) set.missing.push_back(base + "original.png");
    for (const auto& c : set.conditions) {
      const auto found = it.synth.find(c);
      for (int s : set.seeds)
        if (found == it.synth.end() || !found->second.count(s))
          set.missing.push_back(base + c + "_seed" + std::to_string(s) + ".png");
      if (found == it.synth.end()) continue;
      std::vector<std::pair<int, ImageBuffer>> imgs;
      for (const auto& [s, p] : found->second) {
        try {
          imgs.emplace_back(s, read_png(p));
        } catch (const IoError&) {
          set.malformed.push_back(base + p.filename().string());
        }
      }
      for (std::size_t a = 0; a < imgs.size(); ++a)
        for (std::size_t b = a + 1; b < imgs.size(); ++b)
          if (imgs[a].second == imgs[b].second)
            set.duplicates.push_back(base + c + " " + std::to_string(imgs[a].first) + " " +
                                     std::to_string(imgs[b].first));
    }
  }
  return set;
}

}  // namespace metamer
