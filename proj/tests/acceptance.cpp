// Acceptance run: one PASS/FAIL line per primary criterion. Exit status is
// the number of failed criteria.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "corpus.hpp"
#include "grad_check.hpp"
#include "metamer/analysis.hpp"
#include "metamer/gaussian_pyramid.hpp"
#include "metamer/hashing.hpp"
#include "metamer/iqa.hpp"
#include "metamer/pooling_geometry.hpp"
#include "metamer/psychophysics.hpp"
#include "metamer/steerable_pyramid.hpp"
#include "metamer/synthesis.hpp"
#include "metamer/texture_stats.hpp"
#include "support.hpp"

using namespace metamer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double pixel_mse(const ImageBuffer& a, const ImageBuffer& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.vec()[i] - b.vec()[i]) * (a.vec()[i] - b.vec()[i]);
  return s / a.size();
}

bool nonincreasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[i - 1]) return false;
  return true;
}

// Smallest k with P(X <= k) >= q for X ~ Binomial(n, p).
int binom_quantile(int n, double p, double q) {
  double cdf = 0.0;
  for (int k = 0; k <= n; ++k) {
    cdf += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
                    (n - k) * std::log1p(-p));
    if (cdf >= q) return k;
  }
  return n;
}

Outcome pyramid_reconstruction() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const ImageBuffer img = i % 2 ? testing::white_noise(64, 900 + i) : testing::uniform_noise(64, 900 + i);
    worst = std::max(worst, testing::rel_mse(steerable_reconstruct(steerable_decompose(img, 4, 4)), img));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-8 && secs < 5.0, fmt("max relative MSE %.2e over 50 images, %.2f s", worst, secs)};
}

Outcome partition_of_unity() {
  double worst = 0;
  int configs = 0;
  for (double s : {0.25, 0.4, 0.5, 0.6, 0.8, 1.2})
    for (auto z : {std::pair{64.0, 64.0}, {0.0, 0.0}, {448.0, 64.0}, {640.0, 64.0}, {832.0, 10.0}, {-300.0, 200.0}}) {
      PoolingConfig c;
      c.s = s;
      c.z_x = z.first;
      c.z_y = z.second;
      c.width = c.height = 128;
      const auto layout = build_regions(c);
      std::vector<double> sum(128 * 128, 0.0);
      for (const auto& r : layout.regions)
        for (int y = r.y0; y < r.y1; ++y)
          for (int x = r.x0; x < r.x1; ++x) sum[y * 128 + x] += r.weight_at(x, y);
      for (double v : sum) worst = std::max(worst, std::abs(v - 1.0));
      ++configs;
    }
  return {worst < 1e-6, fmt("max |sum - 1| %.2e over %d (s, z) configs", worst, configs)};
}

Outcome gradient_oracle() {
  const StatConfig cfg{.scales = 2, .orientations = 4, .autocorr_size = 3};
  double worst = 1.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const ImageBuffer img = testing::white_noise(16, 1200 + i);
    const StatVector target = compute_stats(testing::white_noise(16, 1300 + i, 0.45, 0.2), cfg);
    const ImageBuffer g = stat_gradient(img, target, cfg);
    auto loss = [&](const std::vector<double>& x) {
      const double d = stat_distance(compute_stats(ImageBuffer(16, 16, 1, x), cfg), target);
      return 0.5 * d * d;
    };
    worst = std::min(worst, testing::fraction_within(g.vec(), testing::central_differences(loss, img.vec(), 1e-4), 1e-4));
  }
  return {worst >= 0.99, fmt("worst instance has %.1f%% of pixels within 1e-4 (20 instances)", 100 * worst)};
}

Outcome synthesis_convergence() {
  const auto t0 = std::chrono::steady_clock::now();
  const StatConfig sc = StatConfig{}.fitted_to(64);
  const StatsExtractor g(64, sc);
  SynthesisConfig cfg;
  cfg.max_steps = 2000;
  cfg.tolerance = 1e-2;
  int ok = 0;
  double worst_ratio = 0, min_mse = 1e9;
  for (int t = 0; t < 10; ++t) {
    const ImageBuffer target = testing::filtered_noise(64, testing::random_texture_params(t), 40 + t);
    std::vector<SynthesisResult> runs;
    bool good = true;
    for (std::uint64_t seed : {1, 2}) {
      cfg.seed = seed;
      runs.push_back(invert_features(g, target, cfg));
      const auto& r = runs.back();
      worst_ratio = std::max(worst_ratio, r.final_loss / r.initial_loss);
      min_mse = std::min(min_mse, r.pixel_mse);
      good = good && r.steps <= 2000 && r.final_loss < 0.01 * r.initial_loss && nonincreasing(r.loss_trace) &&
             r.pixel_mse > 1e-4;
    }
    ok += good && pixel_mse(runs[0].image, runs[1].image) > 0.0;
  }
  const double secs = seconds_since(t0);
  return {ok == 10 && secs < 600,
          fmt("%d/10 textures; worst final/initial loss %.2e; min pixel MSE to target %.2e; %.1f s", ok, worst_ratio,
              min_mse, secs)};
}

Outcome parameter_recovery() {
  OptimizeOptions opts;
  opts.min_region_px = 8;
  opts.synthesis.max_steps = 40;
  opts.synthesis.tolerance = 1e-2;
  const double s0 = 0.5, z0 = 64;
  std::vector<OptimizationPair> pairs;
  for (int t = 0; t < 2; ++t) {
    const ImageBuffer target = testing::filtered_noise(32, testing::random_texture_params(70 + t), 80 + t);
    for (std::uint64_t seed : {1, 2}) {
      PoolingConfig pc;
      pc.s = s0;
      pc.z_x = z0;
      pc.min_region_px = opts.min_region_px;
      SynthesisConfig sc = opts.synthesis;
      sc.seed = seed;
      pairs.push_back({"t" + std::to_string(t), target,
                       synthesize_texform(target, pc, opts.stat_cfg.fitted_to(32), sc).image, seed});
    }
  }
  const auto r = optimize_texform_params(pairs, {0.4, 0.5, 0.6}, {48, 64, 96}, perceptual_metric(PerceptualConfig{}),
                                         opts);
  if (!r.best) return {false, "no valid grid point"};
  const auto& b = r.grid[*r.best];
  double z_truth = -1, z_min = 1e300;
  for (const auto& g : r.grid) {
    if (!g.valid) continue;
    z_min = std::min(z_min, g.Z);
    if (g.s == s0 && g.z == z0) z_truth = g.Z;
  }
  return {b.s == s0 && b.z == z0 && z_truth == z_min,
          fmt("planted (%.2f, %.0f), recovered (%.2f, %.0f); Z at truth %.2e, grid minimum %.2e", s0, z0, b.s, b.z,
              z_truth, z_min)};
}

Outcome level_asymmetry() {
  const PoolingConfig pc{.s = 0.5, .z_x = 160, .min_region_px = 8};
  SynthesisConfig cfg;
  cfg.seed = 1;
  cfg.max_steps = 2000;
  cfg.tolerance = 1e-2;
  int converged = 0, ok = 0;
  double min_ratio = 1e300;
  for (int t = 0; t < 10; ++t) {
    const ImageBuffer target = testing::filtered_noise(64, testing::random_texture_params(20 + t), 21 + t);
    const auto r = synthesize_texform(target, pc, StatConfig{}.fitted_to(64), cfg);
    if (!r.converged) continue;
    ++converged;
    const double ratio =
        pixel_mse(r.image, target) / pixel_mse(gaussian_level(r.image, 3), gaussian_level(target, 3));
    min_ratio = std::min(min_ratio, ratio);
    ok += ratio >= 10;
  }
  return {converged > 0 && ok >= 0.9 * converged,
          fmt("%d/%d converged texforms with level-0 MSE >= 10x level-3 MSE (of 10); min ratio %.1f", ok, converged,
              min_ratio)};
}

Outcome duplicate_qc() {
  std::vector<SynthesisResult> results;
  for (int t = 0; t < 894; ++t)
    for (std::uint64_t seed : {1, 2}) {
      SynthesisResult r;
      r.target_id = "t" + std::to_string(t);
      r.seed = seed;
      const bool dup = t % 49 == 0 && t / 49 < 18;
      r.image = testing::uniform_noise(4, dup ? 10000 + t : 2 * t + seed);
      results.push_back(std::move(r));
    }
  const auto rep = detect_duplicates(results);
  return {rep.pairs.size() == 18 && rep.candidate_pairs == 894 && rep.rate_percent == 2,
          fmt("%zu/%zu duplicates, reported %d%%", rep.pairs.size(), rep.candidate_pairs, rep.rate_percent)};
}

StimulusSet virtual_set(int n) {
  StimulusSet set;
  set.root = "/nonexistent";
  set.conditions = {"robust"};
  set.seeds = {1, 2};
  for (int i = 0; i < n; ++i) {
    StimulusItem it{"c" + std::to_string(i % 3), "img" + std::to_string(i), fs::path("orig"), {}};
    it.synth["robust"] = {{1, "a"}, {2, "b"}};
    set.items.push_back(it);
  }
  return set;
}

Outcome chance_levels() {
  const auto set = virtual_set(100);
  bool pass = true;
  std::string detail;
  for (Task task : {Task::kOddity, Task::kMatch2afc})
    for (int n : {72, 80}) {
      ExperimentConfig cfg;
      cfg.task = task;
      cfg.eccentricities = {20};
      cfg.conditions = {{"robust", "orig_vs_synth"}};
      cfg.trials_per_cell = n;
      cfg.seed = 100 + n;
      const auto trials = generate_trials(cfg, set);
      const auto table = score_session(simulate_session(trials, random_responder, 7 + n, "rand"), trials);
      const auto& c = table.cells.at(0);
      const double p = chance_level(task);
      const int lo = binom_quantile(n, p, 0.005), hi = binom_quantile(n, p, 0.995);
      const bool in = table.cells.size() == 1 && c.n == n && c.k >= lo && c.k <= hi;
      pass = pass && in;
      detail += fmt("%s%s n=%d: %d in [%d, %d]", detail.empty() ? "" : "; ", task_name(task), n, c.k, lo, hi);
    }
  return {pass, detail};
}

Outcome bootstrap_coverage() {
  bool pass = true;
  std::string detail;
  for (double p : {0.4, 0.5, 0.7, 0.9}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(p * 1000));
    std::binomial_distribution<int> data(72, p);
    int covered = 0;
    for (int rep = 0; rep < 1000; ++rep) {
      BootstrapOptions o;
      o.samples = 10000;
      o.seed = 7000 + rep;
      const auto ci = bootstrap_ci(data(rng), 72, o);
      covered += ci.low <= p && p <= ci.high;
    }
    pass = pass && covered >= 930 && covered <= 970;
    detail += fmt("%sp=%.1f %.1f%%", detail.empty() ? "" : "; ", p, covered / 10.0);
  }
  return {pass, detail};
}

Outcome end_to_end_decay() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto root = testing::ensure_corpus();
  const auto set = ingest_stimulus_set(root);
  const auto load = file_stimulus_loader(root);
  ObserverConfig oc;
  oc.noise_sd = 0.02;
  ExperimentConfig cfg;
  cfg.eccentricities = {0, 10, 20, 30, 40};
  cfg.trials_per_cell = 24;
  const Condition tex{"texform", "orig_vs_synth"}, standard{"standard", "orig_vs_synth"};
  cfg.conditions = {tex, standard};
  const auto trials = generate_trials(cfg, set);
  const auto recs = simulate_session(
      trials, [&](const TrialSpec& t, std::uint64_t s) { return simulated_observer(t, oc, load, s); }, 3, "sim");
  const auto table = score_session(records_from_jsonl(records_to_jsonl(recs)), trials);
  const auto tex_fit = fit_sigmoid(build_curve({table}, tex));
  const auto std_fit = fit_sigmoid(build_curve({table}, standard));
  const auto crit = critical_eccentricity(tex_fit);
  const double secs = seconds_since(t0);
  const bool pass = tex_fit.decay && crit && std::isfinite(*crit) && !std_fit.decay &&
                    std_fit.has_flag("no measurable decay") && secs < 900;
  return {pass, fmt("texform critical eccentricity %s deg; standard %s; %.1f s",
                    crit ? fmt("%.1f", *crit).c_str() : "none",
                    std_fit.has_flag("no measurable decay") ? "no measurable decay" : "decays", secs)};
}

// Every subcommand is run once, then again from its manifest; all JSON and
// CSV outputs must match byte for byte.
Outcome reproducibility() {
  const fs::path dir = fs::path(METAMER_TEST_DATA_DIR) / "acceptance" / "repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto corpus = testing::ensure_corpus();
  const fs::path targets = dir / "targets" / "c0" / "img0";
  fs::create_directories(targets);
  write_png(targets / "original.png", testing::corpus_original(32, 77), 16);
  write_png(dir / "one.png", testing::corpus_original(32, 78), 16);
  const std::string quick = "--steps=60";
  const std::vector<std::pair<std::string, std::vector<std::string>>> runs{
      {"synth", {"synth", "--in", (dir / "one.png").string(), "--seeds", "1,2", quick}},
      {"texform", {"texform", "--set", (dir / "targets").string(), "--s", "0.5", "--zx", "64", quick}},
      {"optimize",
       {"optimize", "--targets", (dir / "targets").string(), "--refs", (dir / "out_texform").string(), "--family",
        "texform", "--s-grid", "0.4,0.5", "--z-grid", "64", "--metric", "mse", quick}},
      {"iqa", {"iqa", "--set", corpus.string(), "--levels", "0,1", "--metrics", "mse"}},
      {"ingest", {"ingest", "--set", corpus.string()}},
      {"trials", {"trials", "--set", corpus.string(), "--eccentricities", "0,20", "--trials-per-cell", "6"}},
      {"simulate",
       {"simulate", "--set", corpus.string(), "--eccentricities", "0,10,20,30", "--trials-per-cell", "12",
        "--conditions", "texform:orig_vs_synth"}},
      {"analyze", {"analyze", "--in", (dir / "out_simulate").string(), "--samples", "1000"}},
  };
  int identical = 0;
  std::vector<std::string> bad;
  for (const auto& [name, args] : runs) {
    std::ostringstream sink;
    auto a = args;
    a.insert(a.end(), {"--out", (dir / ("out_" + name)).string()});
    const int c1 = cli::run(a, sink, sink);
    const int c2 = cli::run({name, "--from-manifest", (dir / ("out_" + name) / "manifest.json").string(), "--out",
                             (dir / ("re_" + name)).string()},
                            sink, sink);
    bool same = c1 == cli::kExitOk && c2 == cli::kExitOk;
    int files = 0;
    if (same)
      for (const auto& e : fs::recursive_directory_iterator(dir / ("out_" + name))) {
        const auto ext = e.path().extension();
        if (ext != ".json" && ext != ".csv") continue;
        const auto rel = fs::relative(e.path(), dir / ("out_" + name));
        ++files;
        same = same && fs::exists(dir / ("re_" + name) / rel) &&
               read_file(e.path()) == read_file(dir / ("re_" + name) / rel);
      }
    same = same && files > 0;
    identical += same;
    if (!same) bad.push_back(name);
  }
  std::string detail = fmt("%d/%zu subcommands bit-identical from manifest", identical, runs.size());
  for (const auto& b : bad) detail += " " + b;
  return {identical == static_cast<int>(runs.size()), detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"pyramid reconstruction", pyramid_reconstruction},
      {"partition of unity", partition_of_unity},
      {"gradient oracle", gradient_oracle},
      {"synthesis convergence", synthesis_convergence},
      {"texform parameter recovery", parameter_recovery},
      {"level-0 vs level-3 asymmetry", level_asymmetry},
      {"duplicate QC", duplicate_qc},
      {"chance levels", chance_levels},
      {"bootstrap coverage", bootstrap_coverage},
      {"end-to-end decay", end_to_end_decay},
      {"reproducibility", reproducibility},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed;
}
