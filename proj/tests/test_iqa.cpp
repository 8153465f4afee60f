#include <filesystem>

#include "doctest.h"
#include "metamer/error.hpp"
#include "metamer/gaussian_pyramid.hpp"
#include "metamer/iqa.hpp"
#include "metamer/png_io.hpp"
#include "support.hpp"

using namespace metamer;
namespace fs = std::filesystem;

namespace {

ImageBuffer blurred(const ImageBuffer& img) {
  // Two passes of the separable [1 2 1]/4 kernel with wrap-around.
  ImageBuffer cur = img;
  const int n = img.width();
  for (int pass = 0; pass < 2; ++pass) {
    ImageBuffer h(n, n, 1), v(n, n, 1);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        h.at(x, y) = 0.25 * cur.at((x + n - 1) % n, y) + 0.5 * cur.at(x, y) + 0.25 * cur.at((x + 1) % n, y);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        v.at(x, y) = 0.25 * h.at(x, (y + n - 1) % n) + 0.5 * h.at(x, y) + 0.25 * h.at(x, (y + 1) % n);
    cur = v;
  }
  return cur;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<OptimizationPair> planted_pairs(double s0, double z0, const OptimizeOptions& opts) {
  std::vector<OptimizationPair> pairs;
  for (int t = 0; t < 2; ++t) {
    const ImageBuffer target = testing::filtered_noise(32, testing::random_texture_params(50 + t), 60 + t);
    for (std::uint64_t seed : {1, 2}) {
      PoolingConfig pc;
      pc.s = s0;
      pc.z_x = z0;
      pc.min_region_px = opts.min_region_px;
      SynthesisConfig sc = opts.synthesis;
      sc.seed = seed;
      const auto ref = synthesize_texform(target, pc, opts.stat_cfg.fitted_to(32), sc);
      pairs.push_back({"t" + std::to_string(t), target, ref.image, seed});
    }
  }
  return pairs;
}

OptimizeOptions quick_options() {
  OptimizeOptions o;
  o.min_region_px = 8;
  o.synthesis.max_steps = 40;
  o.synthesis.tolerance = 1e-2;
  return o;
}

}  // namespace

TEST_CASE("mse examples") {
  const ImageBuffer x = testing::uniform_noise(8, 1);
  CHECK(mse(x, x) == 0.0);
  CHECK(mse(ImageBuffer(4, 4, 1, 0.0), ImageBuffer(4, 4, 1, 1.0)) == 1.0);
  CHECK(mse(ImageBuffer(2, 2, 1, {0, 0, 0, 0}), ImageBuffer(2, 2, 1, {0, 0.5, 1, 0.5})) == 0.375);
  CHECK_THROWS_AS(mse(ImageBuffer(2, 2, 1), ImageBuffer(2, 3, 1)), DimensionError);
  CHECK_THROWS_AS(mse(ImageBuffer(2, 2, 1), ImageBuffer(2, 2, 3)), DimensionError);
}

TEST_CASE("metric axioms") {
  const PerceptualConfig pc;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ImageBuffer a = testing::filtered_noise(64, testing::random_texture_params(seed), seed);
    const ImageBuffer b = testing::white_noise(64, seed + 10);
    for (const auto& m : {mse_metric(), perceptual_metric(pc)}) {
      CHECK(m.distance(a, a) == 0.0);
      CHECK(m.distance(a, b) > 0.0);
      CHECK(std::abs(m.distance(a, b) - m.distance(b, a)) <= 1e-12);
    }
  }
}

TEST_CASE("perceptual distance is texture tolerant") {
  const PerceptualConfig pc;
  int wins = 0;
  for (int t = 0; t < 50; ++t) {
    const auto params = testing::random_texture_params(300 + t);
    const ImageBuffer a = testing::filtered_noise(64, params, 2 * t);
    const ImageBuffer b = testing::filtered_noise(64, params, 2 * t + 1);
    const ImageBuffer noise = testing::white_noise(64, 900 + t);
    if (perceptual_distance(a, b, pc) < perceptual_distance(a, noise, pc)) ++wins;
  }
  CHECK(wins >= 45);
}

TEST_CASE("alpha one reduces to the normalized statistic distance") {
  PerceptualConfig pc;
  pc.alpha = 1.0;
  pc.stat_median = 0.7;
  const ImageBuffer a = testing::filtered_noise(64, testing::random_texture_params(1), 1);
  const ImageBuffer b = testing::white_noise(64, 2);
  const StatConfig sc = perceptual_stat_config(pc, 64);
  const double d = stat_distance(compute_stats(a, sc), compute_stats(b, sc));
  CHECK(perceptual_distance(a, b, pc) == d / (d + 0.7));
  CHECK_THROWS_AS(perceptual_distance(a, testing::white_noise(32, 1), pc), DimensionError);
  pc.alpha = 2;
  CHECK_THROWS_AS(perceptual_distance(a, b, pc), ConfigError);
}

TEST_CASE("calibration uses corpus medians") {
  std::vector<ImageBuffer> targets;
  for (int t = 0; t < 4; ++t) targets.push_back(testing::filtered_noise(32, testing::random_texture_params(t), t));
  const auto pc = calibrate_perceptual(targets, PerceptualConfig{});
  std::vector<double> st;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) st.push_back(perceptual_parts(targets[i], targets[j], pc).stat);
  std::sort(st.begin(), st.end());
  CHECK(pc.stat_median == doctest::Approx(0.5 * (st[2] + st[3])));
  // A typical pair then scores near one half on that component.
  CHECK(pc.structure_median > 0.0);
}

TEST_CASE("pyramid IQA on identical and blurred pairs") {
  std::vector<ImagePair> same, blur;
  for (int t = 0; t < 6; ++t) {
    const ImageBuffer img = testing::filtered_noise(64, testing::random_texture_params(t), 70 + t);
    same.push_back({"c", "i" + std::to_string(t), "texform", "orig_vs_synth", "x", img, img});
    blur.push_back({"c", "i" + std::to_string(t), "texform", "orig_vs_synth", "x", img, blurred(img)});
  }
  const auto metrics = std::vector{mse_metric(), perceptual_metric(PerceptualConfig{})};
  const auto r0 = pyramid_iqa(same, metrics);
  CHECK(r0.scores.size() == 6 * 2 * 2);
  for (const auto& s : r0.scores) CHECK(s.score == 0.0);

  const auto r1 = pyramid_iqa(blur, {mse_metric()});
  for (std::size_t p = 0; p < blur.size(); ++p) {
    double l0 = -1, l3 = -1;
    for (const auto& s : r1.scores)
      if (s.pair == p) (s.level == 0 ? l0 : l3) = s.score;
    CHECK(l3 < l0);
  }
}

TEST_CASE("IQA report structure and aggregates") {
  std::vector<ImagePair> pairs;
  for (int t = 0; t < 45; ++t)
    pairs.push_back({"c", "i" + std::to_string(t), "texform", t % 2 ? "orig_vs_synth" : "synth_vs_synth", "x",
                     testing::white_noise(64, t), testing::white_noise(64, 100 + t)});
  pairs.push_back({"c", "bad", "texform", "orig_vs_synth", "x", testing::white_noise(64, 1), testing::white_noise(16, 1)});
  const auto rep = pyramid_iqa(pairs, {mse_metric(), perceptual_metric(PerceptualConfig{})});
  CHECK(rep.scores.size() == 180);
  CHECK(rep.skipped.size() == 1);
  CHECK(rep.aggregates.size() == 2 * 2 * 2);
  // Recompute one aggregate by hand.
  std::vector<double> v;
  for (const auto& s : rep.scores)
    if (s.level == 0 && s.metric == "mse" && rep.pairs[s.pair].condition == "orig_vs_synth") v.push_back(s.score);
  double m = 0, ss = 0;
  for (double x : v) m += x;
  m /= v.size();
  for (double x : v) ss += (x - m) * (x - m);
  const double se = std::sqrt(ss / (v.size() - 1) / v.size());
  bool found = false;
  for (const auto& a : rep.aggregates)
    if (a.level == 0 && a.metric == "mse" && a.condition == "orig_vs_synth") {
      found = true;
      CHECK(a.n == v.size());
      CHECK(a.mean == doctest::Approx(m).epsilon(1e-12));
      CHECK(a.high() - a.low() == doctest::Approx(4 * se).epsilon(1e-9));
    }
  CHECK(found);
  const auto j = rep.to_json();
  CHECK(j["scores"].size() == 180);
  const std::string csv = rep.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 181);
}

TEST_CASE("pyramid IQA over a stimulus set itemizes unmatched pairs") {
  TempDir dir("metamer_iqa_set");
  for (int i = 0; i < 3; ++i) {
    const fs::path item = dir.path / "cat" / ("img" + std::to_string(i));
    fs::create_directories(item);
    write_png(item / "original.png", testing::uniform_noise(32, i));
    for (int s : {1, 2})
      if (!(i == 2 && s == 2)) write_png(item / ("texform_seed" + std::to_string(s) + ".png"), testing::uniform_noise(32, 10 * i + s));
  }
  const auto set = ingest_stimulus_set(dir.path);
  const auto rep = pyramid_iqa(set, {mse_metric()}, {0, 3}, {"texform"});
  // 3 items x 2 seeds orig_vs_synth + 3 synth pairs, minus the missing seed.
  CHECK(rep.pairs.size() == 5 + 2);
  CHECK(rep.skipped.size() == 2);
  CHECK(rep.scores.size() == 7 * 2);
}

TEST_CASE("texform parameter search") {
  OptimizeOptions opts = quick_options();
  const auto Q = perceptual_metric(PerceptualConfig{});

  SUBCASE("single-point grid") {
    const auto pairs = planted_pairs(0.5, 80, opts);
    const auto r = optimize_texform_params(pairs, {0.6}, {64}, Q, opts);
    REQUIRE(r.best);
    CHECK(r.grid[*r.best].s == 0.6);
    CHECK(r.grid[*r.best].Z >= 0.0);
  }
  SUBCASE("planted parameters are recovered, and the cache replays them") {
    TempDir cache("metamer_opt_cache");
    opts.cache_dir = cache.path;
    const auto pairs = planted_pairs(0.6, 80, opts);
    const auto r = optimize_texform_params(pairs, {0.4, 0.6, 0.8}, {48, 80}, Q, opts);
    REQUIRE(r.best);
    CHECK(r.grid[*r.best].s == 0.6);
    CHECK(r.grid[*r.best].z == 80);
    for (const auto& g : r.grid) {
      REQUIRE(g.valid);
      CHECK(r.grid[*r.best].Z <= g.Z);
      // Z recomputed from the stored per-pair values.
      double a = 0, b = 0;
      for (double q : g.q_texform) a += q;
      for (double q : g.q_reference) b += q;
      CHECK(std::abs(g.Z - std::abs(a / g.q_texform.size() - b / g.q_reference.size())) <= 1e-9);
    }
    const auto again = optimize_texform_params(pairs, {0.4, 0.6, 0.8}, {48, 80}, Q, opts);
    for (const auto& g : again.grid) CHECK(g.from_cache);
    CHECK(again.to_json() == r.to_json());
    CHECK(again.to_csv() == r.to_csv());
  }
  SUBCASE("failing points are invalid and ties go to smaller s then z") {
    const auto pairs = planted_pairs(0.5, 80, opts);
    const PerceptualMetric flat{"flat", [](const ImageBuffer&, const ImageBuffer&) { return 0.25; }};
    const auto r = optimize_texform_params(pairs, {-1.0, 0.8, 0.5}, {90, 60}, flat, opts);
    CHECK_FALSE(r.grid[0].valid);
    CHECK_FALSE(r.grid[0].error.empty());
    REQUIRE(r.best);
    CHECK(r.grid[*r.best].s == 0.5);
    CHECK(r.grid[*r.best].z == 60);
    CHECK(r.ties.size() == 3);
    CHECK(r.to_json()["grid"][0]["Z"].is_null());
  }
  CHECK_THROWS_AS(optimize_texform_params({}, {0.5}, {640}, Q, opts), ConfigError);
}
