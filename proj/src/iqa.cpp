#include "metamer/iqa.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <thread>
#include <tuple>

#include "csv.hpp"
#include "metamer/error.hpp"
#include "metamer/gaussian_pyramid.hpp"
#include "metamer/hashing.hpp"
#include "metamer/png_io.hpp"

namespace metamer {
namespace fs = std::filesystem;

double mse(const ImageBuffer& a, const ImageBuffer& b) {
  if (!a.same_shape(b))
    throw DimensionError("mse: images differ in shape (" + std::to_string(a.width()) + "x" +
                         std::to_string(a.height()) + "x" + std::to_string(a.channels()) + " vs " +
                         std::to_string(b.width()) + "x" + std::to_string(b.height()) + "x" +
                         std::to_string(b.channels()) + ")");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.vec()[i] - b.vec()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

void PerceptualConfig::validate() const {
  stats.validate();
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("perceptual alpha must lie in [0, 1]");
  if (!(stat_median > 0.0) || !(structure_median > 0.0)) throw ConfigError("perceptual normalizers must be > 0");
  if (structure_level < 0) throw ConfigError("structure_level must be >= 0");
  for (double g : group_gain)
    if (!(g >= 0.0) || !std::isfinite(g)) throw ConfigError("perceptual group gains must be finite and >= 0");
}

StatConfig perceptual_stat_config(const PerceptualConfig& cfg, int n) {
  StatConfig sc = cfg.stats.fitted_to(n);
  if (!sc.group_weights) {
    auto w = effective_group_weights(sc);
    for (int g = 0; g < kStatGroupCount; ++g) w[g] *= cfg.group_gain[g];
    sc.group_weights = w;
  }
  return sc;
}

PerceptualParts perceptual_parts(const ImageBuffer& a, const ImageBuffer& b, const PerceptualConfig& cfg) {
  if (a.width() != b.width() || a.height() != b.height())
    throw DimensionError("perceptual_distance: images differ in size");
  const ImageBuffer ga = to_grayscale(a), gb = to_grayscale(b);
  PerceptualParts p;
  const ImageBuffer sa = require_pow2_square(ga, true), sb = require_pow2_square(gb, true);
  const StatConfig sc = perceptual_stat_config(cfg, sa.width());
  p.stat = stat_distance(compute_stats(sa, sc), compute_stats(sb, sc));
  const int level = std::min(cfg.structure_level, max_pyramid_levels(a.width(), a.height()) - 1);
  p.structure = std::sqrt(mse(gaussian_level(ga, level), gaussian_level(gb, level)));
  return p;
}

namespace {

double normalized(double d, double median) { return d == 0.0 ? 0.0 : d / (d + median); }

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double perceptual_distance(const ImageBuffer& a, const ImageBuffer& b, const PerceptualConfig& cfg) {
  cfg.validate();
  const auto p = perceptual_parts(a, b, cfg);
  return cfg.alpha * normalized(p.stat, cfg.stat_median) +
         (1.0 - cfg.alpha) * normalized(p.structure, cfg.structure_median);
}

double perceptual_distance(const ImageBuffer& a, const ImageBuffer& b, const StatConfig& cfg) {
  PerceptualConfig pc;
  pc.stats = cfg;
  return perceptual_distance(a, b, pc);
}

PerceptualConfig calibrate_perceptual(const std::vector<ImageBuffer>& targets, PerceptualConfig cfg) {
  std::vector<double> st, sr;
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = i + 1; j < targets.size(); ++j) {
      const auto p = perceptual_parts(targets[i], targets[j], cfg);
      st.push_back(p.stat);
      sr.push_back(p.structure);
    }
  const double ms = median_of(st), mr = median_of(sr);
  if (ms > 0.0) cfg.stat_median = ms;
  if (mr > 0.0) cfg.structure_median = mr;
  return cfg;
}

PerceptualMetric mse_metric() { return {"mse", [](const ImageBuffer& a, const ImageBuffer& b) { return mse(a, b); }}; }

PerceptualMetric perceptual_metric(PerceptualConfig cfg) {
  cfg.validate();
  const nlohmann::json params = {{"alpha", cfg.alpha},
                                 {"stat_median", cfg.stat_median},
                                 {"structure_median", cfg.structure_median},
                                 {"structure_level", cfg.structure_level},
                                 {"group_gain", cfg.group_gain},
                                 {"stats", {cfg.stats.scales, cfg.stats.orientations, cfg.stats.autocorr_size}},
                                 {"group_weights", cfg.stats.group_weights ? nlohmann::json(*cfg.stats.group_weights)
                                                                           : nlohmann::json(nullptr)}};
  return {"perceptual", [cfg](const ImageBuffer& a, const ImageBuffer& b) { return perceptual_distance(a, b, cfg); },
          params};
}

// ---------------------------------------------------------------------------

IQAReport pyramid_iqa(std::vector<ImagePair> pairs, const std::vector<PerceptualMetric>& metrics,
                      const std::vector<int>& levels) {
  IQAReport rep;
  using Key = std::tuple<std::string, std::string, int, std::string>;
  std::map<Key, std::vector<double>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const ImagePair& p = pairs[i];
    const std::string where = p.cls + "/" + p.image_id + " " + p.family + " " + p.label;
    if (!p.a.same_shape(p.b)) {
      rep.skipped.push_back(where + ": images differ in shape");
      continue;
    }
    for (int level : levels) {
      ImageBuffer la, lb;
      try {
        la = gaussian_level(p.a, level);
        lb = gaussian_level(p.b, level);
      } catch (const Error& e) {
        rep.skipped.push_back(where + " level " + std::to_string(level) + ": " + e.what());
        continue;
      }
      for (const auto& m : metrics) {
        double v;
        try {
          v = m.distance(la, lb);
        } catch (const Error& e) {
          rep.skipped.push_back(where + " level " + std::to_string(level) + " " + m.id + ": " + e.what());
          continue;
        }
        if (!std::isfinite(v)) {
          rep.skipped.push_back(where + " level " + std::to_string(level) + " " + m.id + ": non-finite score");
          continue;
        }
        rep.scores.push_back({i, level, m.id, v});
        groups[{p.family, p.condition, level, m.id}].push_back(v);
      }
    }
  }
  for (const auto& [k, v] : groups) {
    IQAAggregate a;
    std::tie(a.family, a.condition, a.level, a.metric) = k;
    a.n = v.size();
    for (double x : v) a.mean += x;
    a.mean /= a.n;
    if (a.n > 1) {
      double ss = 0;
      for (double x : v) ss += (x - a.mean) * (x - a.mean);
      a.se = std::sqrt(ss / (a.n - 1)) / std::sqrt(double(a.n));
    }
    rep.aggregates.push_back(a);
  }
  for (auto& p : pairs) {
    p.a = ImageBuffer();
    p.b = ImageBuffer();
  }
  rep.pairs = std::move(pairs);
  return rep;
}

nlohmann::json IQAReport::to_json() const {
  nlohmann::json ps = nlohmann::json::array(), ss = nlohmann::json::array(), as = nlohmann::json::array();
  for (const auto& p : pairs)
    ps.push_back({{"class", p.cls}, {"image_id", p.image_id}, {"family", p.family}, {"condition", p.condition},
                  {"label", p.label}});
  for (const auto& s : scores) ss.push_back({{"pair", s.pair}, {"level", s.level}, {"metric", s.metric}, {"score", s.score}});
  for (const auto& a : aggregates)
    as.push_back({{"family", a.family}, {"condition", a.condition}, {"level", a.level}, {"metric", a.metric},
                  {"n", a.n}, {"mean", a.mean}, {"se", a.se}, {"low", a.low()}, {"high", a.high()}});
  return {{"pairs", ps}, {"scores", ss}, {"aggregates", as}, {"skipped", skipped}};
}

using detail::csv_field;
using detail::num;

std::string IQAReport::to_csv() const {
  std::string out = "class,image_id,family,condition,label,level,metric,score\n";
  for (const auto& s : scores) {
    const auto& p = pairs[s.pair];
    out += csv_field(p.cls) + "," + csv_field(p.image_id) + "," + p.family + "," + p.condition + "," +
           csv_field(p.label) + "," + std::to_string(s.level) + "," + s.metric + "," + num(s.score) + "\n";
  }
  return out;
}

std::vector<ImagePair> stimulus_pairs(const StimulusSet& set, const std::vector<std::string>& families,
                                      const std::vector<std::string>& conditions, std::vector<std::string>* skipped) {
  auto skip = [&](const std::string& s) {
    if (skipped) skipped->push_back(s);
  };
  const bool ovs = std::find(conditions.begin(), conditions.end(), "orig_vs_synth") != conditions.end();
  const bool svs = std::find(conditions.begin(), conditions.end(), "synth_vs_synth") != conditions.end();
  std::vector<ImagePair> out;
  for (const auto& it : set.items) {
    const std::string where = it.cls + "/" + it.image_id;
    std::optional<ImageBuffer> original;
    for (const auto& fam : families) {
      const auto f = it.synth.find(fam);
      auto file = [&](int seed) -> const fs::path* {
        if (f == it.synth.end()) return nullptr;
        auto s = f->second.find(seed);
        return s == f->second.end() ? nullptr : &s->second;
      };
      if (ovs) {
        if (!it.original) {
          skip(where + " " + fam + " orig_vs_synth: original missing");
        } else {
          for (int seed : set.seeds) {
            const fs::path* p = file(seed);
            if (!p) {
              skip(where + " " + fam + " orig_vs_synth: seed " + std::to_string(seed) + " missing");
              continue;
            }
            if (!original) original = read_png(*it.original);
            out.push_back({it.cls, it.image_id, fam, "orig_vs_synth", "original~seed" + std::to_string(seed),
                           *original, read_png(*p)});
          }
        }
      }
      if (svs)
        for (std::size_t a = 0; a < set.seeds.size(); ++a)
          for (std::size_t b = a + 1; b < set.seeds.size(); ++b) {
            const fs::path *pa = file(set.seeds[a]), *pb = file(set.seeds[b]);
            const std::string label = "seed" + std::to_string(set.seeds[a]) + "~seed" + std::to_string(set.seeds[b]);
            if (!pa || !pb) {
              skip(where + " " + fam + " synth_vs_synth " + label + ": seed missing");
              continue;
            }
            out.push_back({it.cls, it.image_id, fam, "synth_vs_synth", label, read_png(*pa), read_png(*pb)});
          }
    }
  }
  return out;
}

IQAReport pyramid_iqa(const StimulusSet& set, const std::vector<PerceptualMetric>& metrics,
                      const std::vector<int>& levels, const std::vector<std::string>& families,
                      const std::vector<std::string>& conditions) {
  std::vector<std::string> skipped;
  auto pairs = stimulus_pairs(set, families, conditions, &skipped);
  IQAReport rep = pyramid_iqa(std::move(pairs), metrics, levels);
  rep.skipped.insert(rep.skipped.begin(), skipped.begin(), skipped.end());
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

std::string image_digest(const ImageBuffer& img) {
  std::string bytes = std::to_string(img.width()) + "x" + std::to_string(img.height()) + "x" +
                      std::to_string(img.channels()) + ":";
  bytes.append(reinterpret_cast<const char*>(img.vec().data()), img.size() * sizeof(double));
  return sha1_hex(bytes);
}

nlohmann::json point_json(const GridPoint& g) {
  return {{"s", g.s},
          {"z", g.z},
          {"valid", g.valid},
          {"error", g.error},
          {"Z", g.valid ? nlohmann::json(g.Z) : nlohmann::json(nullptr)},
          {"mean_texform", g.mean_texform},
          {"mean_reference", g.mean_reference},
          {"q_texform", g.q_texform},
          {"q_reference", g.q_reference},
          {"non_converged", g.non_converged},
          {"key", g.key}};
}

GridPoint point_from_json(const nlohmann::json& j) {
  GridPoint g;
  g.s = j.at("s");
  g.z = j.at("z");
  g.valid = j.at("valid");
  g.error = j.at("error");
  g.Z = j.at("Z").is_null() ? 0.0 : j.at("Z").get<double>();
  g.mean_texform = j.at("mean_texform");
  g.mean_reference = j.at("mean_reference");
  g.q_texform = j.at("q_texform").get<std::vector<double>>();
  g.q_reference = j.at("q_reference").get<std::vector<double>>();
  g.non_converged = j.at("non_converged");
  g.key = j.at("key");
  return g;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

}  // namespace

OptimizationResult optimize_texform_params(const std::vector<OptimizationPair>& pairs,
                                           const std::vector<double>& s_grid, const std::vector<double>& z_grid,
                                           const PerceptualMetric& Q, const OptimizeOptions& opts) {
  if (s_grid.empty() || z_grid.empty()) throw ConfigError("optimize_texform_params: empty grid");
  if (pairs.empty()) throw ConfigError("optimize_texform_params: no target/reference pairs");
  opts.synthesis.validate();
  OptimizationResult res;
  res.metric = Q.id;

  std::vector<double> q_ref;
  nlohmann::json pair_desc = nlohmann::json::array();
  for (const auto& p : pairs) {
    q_ref.push_back(Q.distance(p.target, p.reference));
    pair_desc.push_back({{"id", p.id}, {"seed", p.seed}, {"target", image_digest(p.target)},
                         {"reference", image_digest(p.reference)}});
  }
  nlohmann::json synth = to_json(opts.synthesis);
  synth.erase("seed");
  const nlohmann::json base = {{"metric", Q.id},
                               {"metric_params", Q.params},
                               {"stats", {opts.stat_cfg.scales, opts.stat_cfg.orientations, opts.stat_cfg.autocorr_size}},
                               {"synthesis", synth},
                               {"min_region_px", opts.min_region_px},
                               {"z_y", opts.z_y ? nlohmann::json(*opts.z_y) : nlohmann::json(nullptr)},
                               {"pairs", pair_desc}};

  for (double s : s_grid)
    for (double z : z_grid) {
      GridPoint g;
      g.s = s;
      g.z = z;
      nlohmann::json k = base;
      k["s"] = s;
      k["z"] = z;
      g.key = sha1_hex(k.dump());
      res.grid.push_back(std::move(g));
    }

  auto evaluate = [&](GridPoint& g) {
    if (opts.cache_dir) {
      const fs::path f = *opts.cache_dir / (g.key + ".json");
      if (fs::exists(f)) {
        try {
          GridPoint c = point_from_json(nlohmann::json::parse(read_file(f)));
          if (c.key == g.key) {
            c.from_cache = true;
            g = std::move(c);
            return;
          }
        } catch (const std::exception&) {
          // unreadable cache entry: recompute and overwrite
        }
      }
    }
    g.q_reference = q_ref;
    try {
      for (const auto& p : pairs) {
        PoolingConfig pc;
        pc.s = g.s;
        pc.z_x = g.z;
        pc.z_y = opts.z_y;
        pc.min_region_px = opts.min_region_px;
        pc.width = p.target.width();
        pc.height = p.target.height();
        SynthesisConfig sc = opts.synthesis;
        sc.seed = p.seed;
        const auto r = synthesize_texform(p.target, pc, opts.stat_cfg.fitted_to(p.target.width()), sc);
        if (!r.converged) ++g.non_converged;
        g.q_texform.push_back(Q.distance(p.target, r.image));
      }
      g.mean_texform = mean_of(g.q_texform);
      g.mean_reference = mean_of(g.q_reference);
      g.Z = std::abs(g.mean_texform - g.mean_reference);
      g.valid = std::isfinite(g.Z);
      if (!g.valid) g.error = "non-finite dissimilarity";
    } catch (const std::exception& e) {
      g.valid = false;
      g.error = e.what();
    }
    if (opts.cache_dir) write_file_atomic(*opts.cache_dir / (g.key + ".json"), point_json(g).dump(2));
  };

  const int workers = std::max(1, std::min<int>(opts.workers, static_cast<int>(res.grid.size())));
  if (workers == 1) {
    for (auto& g : res.grid) evaluate(g);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < res.grid.size();) evaluate(res.grid[i]);
      });
    for (auto& t : pool) t.join();
  }

  // Argmin; ties toward smaller s, then smaller z.
  for (std::size_t i = 0; i < res.grid.size(); ++i) {
    const auto& g = res.grid[i];
    if (!g.valid) continue;
    if (!res.best) {
      res.best = i;
      continue;
    }
    const auto& b = res.grid[*res.best];
    if (std::tie(g.Z, g.s, g.z) < std::tie(b.Z, b.s, b.z)) res.best = i;
  }
  if (res.best) {
    const double bz = res.grid[*res.best].Z;
    for (std::size_t i = 0; i < res.grid.size(); ++i)
      if (i != *res.best && res.grid[i].valid && std::abs(res.grid[i].Z - bz) <= 1e-12) res.ties.push_back(i);
  }
  return res;
}

nlohmann::json OptimizationResult::to_json() const {
  nlohmann::json grid_json = nlohmann::json::array();
  for (const auto& g : grid) grid_json.push_back(point_json(g));
  nlohmann::json b = nullptr;
  if (best) b = {{"s", grid[*best].s}, {"z", grid[*best].z}, {"Z", grid[*best].Z}};
  nlohmann::json t = nlohmann::json::array();
  for (auto i : ties) t.push_back({{"s", grid[i].s}, {"z", grid[i].z}});
  return {{"metric", metric}, {"best", b}, {"ties", t}, {"grid", grid_json}};
}

std::string OptimizationResult::to_csv() const {
  std::string out = "s,z,valid,Z,mean_texform,mean_reference,non_converged,error\n";
  for (const auto& g : grid)
    out += num(g.s) + "," + num(g.z) + "," + (g.valid ? "1" : "0") + "," + (g.valid ? num(g.Z) : "") + "," +
           num(g.mean_texform) + "," + num(g.mean_reference) + "," + std::to_string(g.non_converged) + "," +
           csv_field(g.error) + "\n";
  return out;
}

std::vector<OptimizationPair> optimization_pairs(const StimulusSet& targets, const StimulusSet& refs,
                                                 const std::string& family, std::vector<std::string>* skipped) {
  auto skip = [&](const std::string& s) {
    if (skipped) skipped->push_back(s);
  };
  std::vector<OptimizationPair> out;
  for (const auto& it : targets.items) {
    const std::string where = it.cls + "/" + it.image_id;
    if (!it.original) {
      skip(where + ": original missing");
      continue;
    }
    const StimulusItem* r = refs.find(it.cls, it.image_id);
    const auto f = r ? r->synth.find(family) : decltype(r->synth.end()){};
    if (!r || f == r->synth.end() || f->second.empty()) {
      skip(where + ": no " + family + " reference");
      continue;
    }
    const ImageBuffer target = read_png(*it.original);
    for (const auto& [seed, path] : f->second)
      out.push_back({where + "#" + std::to_string(seed), target, read_png(path), static_cast<std::uint64_t>(seed)});
  }
  return out;
}

}  // namespace metamer
