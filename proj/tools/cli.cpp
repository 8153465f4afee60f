#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "metamer/analysis.hpp"
#include "metamer/error.hpp"
#include "metamer/hashing.hpp"
#include "metamer/iqa.hpp"
#include "metamer/png_io.hpp"
#include "metamer/psychophysics.hpp"
#include "metamer/service.hpp"
#include "metamer/synthesis.hpp"

namespace metamer::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kManifestVersion = 1;

// ---------------------------------------------------------------- params

enum class Kind { kString, kInt, kDouble, kBool, kStrings, kInts, kDoubles };

struct Param {
  std::string key;
  Kind kind = Kind::kString;
  std::string value;
  std::vector<std::string> values;
  bool flag = false;
  bool required = false;
  std::string flag_name;
  CLI::Option* opt = nullptr;
};

long long parse_int(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError("--" + key + ": '" + s + "' is not an integer");
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v))
    throw ConfigError("--" + key + ": '" + s + "' is not a finite number");
  return v;
}

json param_value(const Param& p) {
  switch (p.kind) {
    case Kind::kString: return p.value;
    case Kind::kInt: return parse_int(p.key, p.value);
    case Kind::kDouble: return parse_double(p.key, p.value);
    case Kind::kBool: return p.flag;
    case Kind::kStrings: return p.values;
    case Kind::kInts: {
      json a = json::array();
      for (const auto& s : p.values) a.push_back(parse_int(p.key, s));
      return a;
    }
    case Kind::kDoubles: {
      json a = json::array();
      for (const auto& s : p.values) a.push_back(parse_double(p.key, s));
      return a;
    }
  }
  return nullptr;
}

// ---------------------------------------------------------------- context

struct Context {
  std::string command;
  json params;
  fs::path out_dir;
  int jobs = 1;
  bool verbose = false;
  std::ostream* log = nullptr;
  json manifest_inputs;  // from --from-manifest, for change detection

  std::mutex mu;
  json inputs = json::array();
  std::set<std::string> outputs;
  json errors = json::array();
  std::vector<std::string> warnings;
  json items = json::array();
  json summary = json::object();

  void error(const std::string& item, const std::string& code, const std::string& message) {
    std::lock_guard lk(mu);
    errors.push_back({{"item", item}, {"code", code}, {"message", message}});
  }
  void warn(const std::string& w) {
    std::lock_guard lk(mu);
    warnings.push_back(w);
  }
  void progress(const std::string& line) {
    if (!verbose) return;
    std::lock_guard lk(mu);
    *log << line << "\n";
  }
  void output(const fs::path& rel) {
    std::lock_guard lk(mu);
    outputs.insert(rel.generic_string());
  }
  void write(const fs::path& rel, const std::string& bytes) {
    write_file_atomic(out_dir / rel, bytes);
    output(rel);
  }
  void add_input(const json& in) {
    if (manifest_inputs.is_array())
      for (const auto& m : manifest_inputs)
        if (m.value("path", "") == in.value("path", "") && m.value("git_hash", "") != in.value("git_hash", ""))
          warn("input " + in.value("path", "") + " changed since the manifest was written");
    std::lock_guard lk(mu);
    inputs.push_back(in);
  }
  void input_file(const fs::path& p) {
    if (!fs::is_regular_file(p)) throw IoError("no such file: " + p.string());
    add_input({{"path", p.generic_string()}, {"kind", "file"}, {"git_hash", file_git_hash(p)}});
  }
  // Tree hash over every PNG below `root`: the git blob hash of the sorted
  // "relative-path hash" listing.
  void input_set(const fs::path& root) {
    if (!fs::is_directory(root)) throw IoError("no such directory: " + root.string());
    std::vector<std::string> lines;
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().extension() == ".png")
        lines.push_back(fs::relative(e.path(), root).generic_string() + " " + file_git_hash(e.path()));
    std::sort(lines.begin(), lines.end());
    std::string listing;
    for (const auto& l : lines) listing += l + "\n";
    add_input({{"path", root.generic_string()},
               {"kind", "stimulus_set"},
               {"files", lines.size()},
               {"git_hash", git_blob_hash(listing)}});
  }

  const json& p(const std::string& key) const { return params.at(key); }
  std::string str(const std::string& key) const { return params.at(key).get<std::string>(); }
  bool has(const std::string& key) const {
    const auto f = params.find(key);
    return f != params.end() && !f->is_null() && !(f->is_string() && f->get<std::string>().empty());
  }
};

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& f) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) f(i);
  };
  const std::size_t threads = std::min<std::size_t>(std::max(jobs, 1), n);
  if (threads <= 1) return worker();
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

std::string code_of(const std::exception& e) {
  if (const auto* m = dynamic_cast<const Error*>(&e)) return m->code();
  return "internal_error";
}

json read_json_file(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- commands

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::vector<std::unique_ptr<Param>> params;
  json defaults = json::object();
  bool writes_outputs = true;
  std::function<void(Context&)> body;

  std::string out, from_manifest;
  int jobs = 1;
  bool force = false, verbose = false;

  Param& add(const std::string& names, const std::string& key, Kind kind, json def, const std::string& help) {
    auto p = std::make_unique<Param>();
    p->key = key;
    p->kind = kind;
    p->flag_name = names.substr(names.rfind(',') + 1);
    if (kind == Kind::kBool)
      p->opt = app->add_flag(names, p->flag, help);
    else if (kind == Kind::kStrings || kind == Kind::kInts || kind == Kind::kDoubles)
      p->opt = app->add_option(names, p->values, help)->delimiter(',');
    else
      p->opt = app->add_option(names, p->value, help);
    defaults[key] = std::move(def);
    params.push_back(std::move(p));
    return *params.back();
  }

  json resolve() const {
    json p = defaults;
    if (!from_manifest.empty()) {
      const json m = read_json_file(from_manifest);
      if (m.value("command", "") != name)
        throw ConfigError(from_manifest + " is a manifest for '" + m.value("command", "") + "', not '" + name + "'");
      for (const auto& [k, v] : m.at("params").items())
        if (p.contains(k)) p[k] = v;
    }
    for (const auto& prm : params)
      if (prm->opt->count() > 0) p[prm->key] = param_value(*prm);
    for (const auto& prm : params) {
      const json& v = p[prm->key];
      if (prm->required && (v.is_null() || (v.is_string() && v.get<std::string>().empty()) || (v.is_array() && v.empty())))
        throw ConfigError(prm->flag_name + " is required");
    }
    return p;
  }
};

SynthesisConfig synthesis_from(const Context& c) {
  SynthesisConfig sc;
  sc.max_steps = c.p("steps").get<int>();
  sc.tolerance = c.p("tolerance").get<double>();
  if (c.params.contains("lambda")) sc.lambda = c.p("lambda").get<double>();
  if (c.params.contains("optimizer")) {
    const auto o = c.str("optimizer");
    if (o == "adam") sc.optimizer = Optimizer::kAdam;
    else if (o != "line_search") throw ConfigError("--optimizer must be line_search or adam");
    sc.adam_rate = c.p("adam_rate").get<double>();
  }
  sc.validate();
  return sc;
}

// Images to synthesize from: --in files or every original of --set.
struct Source {
  std::string label;
  fs::path input;
  fs::path out_stem;  // relative; "<stem>_" or "cls/id/"
};

std::vector<Source> batch_sources(Context& c) {
  std::vector<Source> out;
  const bool files = c.has("in") && !c.p("in").empty();
  if (files == c.has("set")) throw ConfigError("give exactly one of --in or --set");
  if (files) {
    for (const auto& f : c.p("in")) {
      const fs::path p = f.get<std::string>();
      c.input_file(p);
      out.push_back({p.stem().string(), p, p.stem().string() + "_"});
    }
    return out;
  }
  const fs::path root = c.str("set");
  c.input_set(root);
  const auto set = ingest_stimulus_set(root);
  for (const auto& it : set.items) {
    if (!it.original) {
      c.warn(it.cls + "/" + it.image_id + " has no original; skipped");
      continue;
    }
    const fs::path dir = fs::path(it.cls) / it.image_id;
    fs::create_directories(c.out_dir / dir);
    fs::copy_file(*it.original, c.out_dir / dir / "original.png", fs::copy_options::overwrite_existing);
    c.output(dir / "original.png");
    out.push_back({it.cls + "/" + it.image_id, *it.original, dir.generic_string() + "/"});
  }
  return out;
}

struct BatchJob {
  std::size_t source = 0;
  std::uint64_t seed = 0;
};

std::vector<BatchJob> batch_jobs(const Context& c, std::size_t sources) {
  std::vector<BatchJob> jobs;
  for (std::size_t i = 0; i < sources; ++i)
    for (const auto& s : c.p("seeds")) jobs.push_back({i, s.get<std::uint64_t>()});
  if (c.p("seeds").empty()) throw ConfigError("--seeds must not be empty");
  return jobs;
}

void finish_batch(Context& c, const std::vector<Source>& sources, const std::vector<BatchJob>& jobs,
                  std::vector<std::optional<SynthesisResult>>& results, const std::string& family) {
  std::vector<SynthesisResult> done;
  int converged = 0;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (!results[j]) continue;
    auto& r = *results[j];
    const auto& src = sources[jobs[j].source];
    c.items.push_back({{"item", src.label},
                       {"seed", jobs[j].seed},
                       {"output", src.out_stem.generic_string() + family + "_seed" + std::to_string(jobs[j].seed) + ".png"},
                       {"status", r.status},
                       {"converged", r.converged},
                       {"steps", r.steps},
                       {"final_loss", r.final_loss}});
    if (r.converged) ++converged;
    else c.warn(src.label + " seed " + std::to_string(jobs[j].seed) + " did not converge (" + r.status + ")");
    r.target_id = src.label;
    r.image = ImageBuffer();  // duplicate scan uses the written pixels below
    done.push_back(r);
  }
  // Exact duplicates across seeds, on the stored 8-bit pixels.
  std::vector<ImageBuffer> imgs;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> targets;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (!results[j]) continue;
    const auto& src = sources[jobs[j].source];
    imgs.push_back(read_png(c.out_dir / (src.out_stem.generic_string() + family + "_seed" +
                                         std::to_string(jobs[j].seed) + ".png")));
    seeds.push_back(jobs[j].seed);
    targets.push_back(src.label);
  }
  const auto dup = detect_duplicates(imgs, seeds, targets);
  json pairs = json::array();
  for (const auto& [a, b] : dup.pairs) {
    pairs.push_back({{"target", targets[a]}, {"seeds", {seeds[a], seeds[b]}}});
    c.warn("duplicate outputs for " + targets[a] + " seeds " + std::to_string(seeds[a]) + " and " +
           std::to_string(seeds[b]));
  }
  c.write("duplicates.json", json{{"pairs", pairs},
                                  {"candidate_pairs", dup.candidate_pairs},
                                  {"rate", dup.rate},
                                  {"rate_percent", dup.rate_percent}}
                                 .dump(2) + "\n");
  c.summary = {{"outputs", done.size()},
               {"converged", converged},
               {"failed", jobs.size() - done.size()},
               {"duplicate_pairs", dup.pairs.size()},
               {"duplicate_rate_percent", dup.rate_percent}};
}

void run_synth(Context& c) {
  const auto sources = batch_sources(c);
  const auto jobs = batch_jobs(c, sources.size());
  SynthesisConfig sc = synthesis_from(c);
  const std::string kind = c.str("extractor"), family = c.str("family");
  if (kind != "random_conv" && kind != "global_stats" && kind != "identity")
    throw ConfigError("--extractor must be random_conv, global_stats or identity");
  const auto conv = std::make_shared<RandomConvExtractor>(c.p("conv_seed").get<std::uint64_t>());
  std::vector<std::optional<SynthesisResult>> results(jobs.size());
  parallel_for(jobs.size(), c.jobs, [&](std::size_t j) {
    const auto& src = sources[jobs[j].source];
    try {
      const ImageBuffer target = to_grayscale(read_png(src.input));
      std::shared_ptr<const FeatureExtractor> g;
      if (kind == "random_conv") g = conv;
      else if (kind == "identity") g = std::make_shared<IdentityExtractor>();
      else {
        if (target.width() != target.height()) throw DimensionError("global_stats needs a square image");
        g = std::make_shared<StatsExtractor>(target.width(), StatConfig{}.fitted_to(target.width()));
      }
      SynthesisConfig cfg = sc;
      cfg.seed = jobs[j].seed;
      auto r = invert_features(*g, target, cfg);
      const fs::path rel = src.out_stem.generic_string() + family + "_seed" + std::to_string(cfg.seed) + ".png";
      write_synthesis_output(c.out_dir / rel, r,
                             {{"extractor", g->describe()}, {"synthesis", to_json(cfg)}, {"source", src.label}});
      c.output(rel);
      c.output(fs::path(rel).replace_extension(".json"));
      c.progress(rel.generic_string() + " " + r.status);
      results[j] = std::move(r);
    } catch (const std::exception& e) {
      c.error(src.label + " seed " + std::to_string(jobs[j].seed), code_of(e), e.what());
    }
  });
  finish_batch(c, sources, jobs, results, family);
}

void run_texform(Context& c) {
  const auto sources = batch_sources(c);
  const auto jobs = batch_jobs(c, sources.size());
  const SynthesisConfig sc = synthesis_from(c);
  PoolingConfig pc;
  pc.s = c.p("s").get<double>();
  pc.z_x = c.p("zx").get<double>();
  if (c.has("zy")) pc.z_y = c.p("zy").get<double>();
  pc.min_region_px = c.p("min_region").get<int>();
  std::vector<std::optional<SynthesisResult>> results(jobs.size());
  parallel_for(jobs.size(), c.jobs, [&](std::size_t j) {
    const auto& src = sources[jobs[j].source];
    try {
      const ImageBuffer target = read_png(src.input);
      SynthesisConfig cfg = sc;
      cfg.seed = jobs[j].seed;
      auto r = synthesize_texform(target, pc, StatConfig{}.fitted_to(target.width()), cfg);
      const fs::path rel = src.out_stem.generic_string() + "texform_seed" + std::to_string(cfg.seed) + ".png";
      PoolingConfig used = pc;
      used.width = target.width();
      used.height = target.height();
      write_synthesis_output(c.out_dir / rel, r,
                             {{"pooling", to_json(used)}, {"synthesis", to_json(cfg)}, {"source", src.label}});
      c.output(rel);
      c.output(fs::path(rel).replace_extension(".json"));
      c.progress(rel.generic_string() + " " + r.status);
      results[j] = std::move(r);
    } catch (const std::exception& e) {
      c.error(src.label + " seed " + std::to_string(jobs[j].seed), code_of(e), e.what());
    }
  });
  finish_batch(c, sources, jobs, results, "texform");
}

PerceptualMetric metric_named(const std::string& name, const StimulusSet& calibration) {
  if (name == "mse") return mse_metric();
  if (name != "percep") throw ConfigError("unknown metric '" + name + "' (mse, percep)");
  std::vector<ImageBuffer> targets;
  for (const auto& it : calibration.items)
    if (it.original) targets.push_back(to_grayscale(read_png(*it.original)));
  if (targets.size() < 2) throw StructureError("percep metric needs at least two originals to calibrate");
  return perceptual_metric(calibrate_perceptual(targets, PerceptualConfig{}));
}

void run_optimize(Context& c) {
  const fs::path troot = c.str("targets"), rroot = c.str("refs");
  c.input_set(troot);
  c.input_set(rroot);
  const auto targets = ingest_stimulus_set(troot), refs = ingest_stimulus_set(rroot);
  std::vector<std::string> skipped;
  const auto pairs = optimization_pairs(targets, refs, c.str("family"), &skipped);
  for (const auto& s : skipped) c.warn("unpaired: " + s);
  if (pairs.empty()) throw StructureError("no target/reference pairs for family '" + c.str("family") + "'");
  OptimizeOptions o;
  o.synthesis = synthesis_from(c);
  o.min_region_px = c.p("min_region").get<int>();
  if (c.has("zy")) o.z_y = c.p("zy").get<double>();
  if (c.has("cache")) o.cache_dir = c.str("cache");
  o.workers = c.jobs;
  const auto Q = metric_named(c.str("metric"), targets);
  const auto r = optimize_texform_params(pairs, c.p("s_grid").get<std::vector<double>>(),
                                         c.p("z_grid").get<std::vector<double>>(), Q, o);
  for (const auto& g : r.grid)
    if (!g.valid) c.warn("grid point s=" + std::to_string(g.s) + " z=" + std::to_string(g.z) + " invalid: " + g.error);
  c.write("optimization.json", r.to_json().dump(2) + "\n");
  c.write("optimization.csv", r.to_csv());
  if (!r.best) throw StructureError("no valid grid point");
  const auto& b = r.grid[*r.best];
  c.summary = {{"pairs", pairs.size()}, {"s", b.s}, {"z", b.z}, {"Z", b.Z}, {"ties", r.ties.size()}};
}

void run_iqa(Context& c) {
  const fs::path root = c.str("set");
  c.input_set(root);
  const auto set = ingest_stimulus_set(root);
  std::vector<PerceptualMetric> metrics;
  for (const auto& m : c.p("metrics")) metrics.push_back(metric_named(m.get<std::string>(), set));
  auto families = c.p("families").get<std::vector<std::string>>();
  if (families.empty()) families = set.conditions;
  const auto report = pyramid_iqa(set, metrics, c.p("levels").get<std::vector<int>>(), families,
                                  c.p("conditions").get<std::vector<std::string>>());
  for (const auto& s : report.skipped) c.warn("skipped: " + s);
  c.write("iqa.csv", report.to_csv());
  c.write("iqa.json", report.to_json().dump(2) + "\n");
  c.summary = {{"pairs", report.pairs.size()}, {"scores", report.scores.size()}};
}

ExperimentConfig experiment_from(Context& c) {
  json e = json::object();
  if (c.params.contains("experiment") && c.p("experiment").is_object()) {
    e = c.p("experiment");
  } else if (c.has("config")) {
    c.input_file(c.str("config"));
    e = read_json_file(c.str("config"));
  }
  if (!e.is_object()) throw ConfigError("experiment config must be a JSON object");
  if (c.has("task")) e["task"] = c.p("task");
  if (c.has("seed")) e["seed"] = c.p("seed");
  if (c.has("trials_per_cell")) e["trials_per_cell"] = c.p("trials_per_cell");
  if (c.has("eccentricities") && !c.p("eccentricities").empty()) e["eccentricities"] = c.p("eccentricities");
  if (c.has("conditions") && !c.p("conditions").empty()) e["conditions"] = c.p("conditions");
  ExperimentConfig cfg = experiment_config_from_json(e).resolved();
  cfg.validate();
  for (const auto& w : cfg.geometry.validate()) c.warn(w);
  c.params["experiment"] = to_json(cfg);
  return cfg;
}

std::vector<TrialSpec> schedule_for(Context& c, const ExperimentConfig& cfg, StimulusSet* set_out) {
  const fs::path root = c.str("set");
  c.input_set(root);
  *set_out = ingest_stimulus_set(root);
  auto trials = generate_trials(cfg, *set_out);
  json tj = json::array();
  for (const auto& t : trials) tj.push_back(to_json(t));
  c.write("trials.json", json{{"config", to_json(cfg)}, {"trials", tj}}.dump(2) + "\n");
  return trials;
}

void run_trials(Context& c) {
  const auto cfg = experiment_from(c);
  StimulusSet set;
  const auto trials = schedule_for(c, cfg, &set);
  c.summary = {{"task", task_name(cfg.task)}, {"trials", trials.size()}, {"seed", cfg.seed}};
}

void run_simulate(Context& c) {
  const auto cfg = experiment_from(c);
  StimulusSet set;
  const auto trials = schedule_for(c, cfg, &set);
  Responder respond;
  const std::string observer = c.str("observer");
  if (observer == "blur") {
    ObserverConfig oc;
    oc.noise_sd = c.p("noise").get<double>();
    oc.level_step_deg = c.p("level_step").get<double>();
    oc.max_level = c.p("max_level").get<int>();
    const auto load = file_stimulus_loader(set.root);
    respond = [oc, load](const TrialSpec& t, std::uint64_t s) { return simulated_observer(t, oc, load, s); };
  } else if (observer == "random") {
    respond = random_responder;
  } else {
    throw ConfigError("--observer must be blur or random");
  }
  const auto records = simulate_session(trials, respond, cfg.seed, c.str("session"));
  const auto table = score_session(records, trials);
  c.write("records.jsonl", records_to_jsonl(records));
  c.write("cells.json", table.to_json().dump(2) + "\n");
  c.write("cells.csv", table.to_csv());
  int k = 0;
  for (const auto& r : records) k += r.correct;
  c.summary = {{"task", task_name(cfg.task)}, {"trials", records.size()}, {"correct", k}, {"seed", cfg.seed}};
}

// One subject's cell table from a simulate output directory, a service
// session directory, or a cells JSON file.
CellTable load_table(Context& c, const fs::path& in, bool exclude) {
  if (fs::is_directory(in)) {
    const fs::path log = in / "records.jsonl";
    if (!fs::exists(log)) throw StructureError(in.string() + " has no records.jsonl");
    c.input_file(log);
    std::vector<TrialSpec> specs;
    const fs::path trials = in / "trials.json", manifest = in / "manifest.json";
    json list;
    if (fs::exists(trials)) {
      c.input_file(trials);
      list = read_json_file(trials).at("trials");
    } else if (fs::exists(manifest) && read_json_file(manifest).contains("schedule")) {
      c.input_file(manifest);
      list = read_json_file(manifest).at("schedule");
    } else {
      throw StructureError(in.string() + " has neither trials.json nor a session manifest");
    }
    for (const auto& t : list) specs.push_back(trial_spec_from_json(t));
    return score_session(records_from_jsonl(read_file(log)), specs, exclude);
  }
  c.input_file(in);
  const json j = read_json_file(in);
  if (!j.contains("cells")) throw StructureError(in.string() + " is not a cell table");
  if (exclude) c.warn(in.string() + ": cell tables are already aggregated; timing exclusion not applied");
  return cell_table_from_json(j);
}

Condition condition_from_label(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ConfigError("condition '" + s + "' must be family:variant");
  return {s.substr(0, colon), s.substr(colon + 1)};
}

void run_analyze(Context& c) {
  const bool exclude = c.p("exclude_timing_suspect").get<bool>();
  std::vector<CellTable> tables;
  for (const auto& in : c.p("in")) {
    const std::string path = in.get<std::string>();
    try {
      tables.push_back(load_table(c, path, exclude));
    } catch (const std::exception& e) {
      c.error(path, code_of(e), e.what());
    }
  }
  if (tables.empty()) throw StructureError("no usable inputs");
  BootstrapOptions bo;
  bo.samples = c.p("samples").get<int>();
  bo.level = c.p("level").get<double>();
  bo.seed = c.p("seed").get<std::uint64_t>();
  bo.validate();
  const PoolMode mode = pool_mode_from_name(c.str("mode"));
  const double threshold = c.p("threshold").get<double>();

  std::map<Task, std::vector<CellTable>> by_task;
  for (const auto& t : tables) by_task[t.task].push_back(t);

  json curves_json = json::array(), comparisons = json::array();
  std::string csv;
  std::map<std::pair<Task, std::string>, PsychometricCurve> by_label;
  int fitted = 0;
  for (const auto& [task, group] : by_task) {
    std::set<Condition> conds;
    for (const auto& t : group)
      for (const auto& cell : t.cells) conds.insert(cell.condition);
    std::vector<PsychometricCurve> curves;
    std::vector<std::optional<SigmoidFit>> fits;
    for (const auto& cond : conds) {
      std::vector<CellTable> subjects;
      for (const auto& t : group)
        if (std::any_of(t.cells.begin(), t.cells.end(), [&](const CellResult& r) { return r.condition == cond; }))
          subjects.push_back(t);
      const auto curve = build_curve(subjects, cond, mode, bo);
      std::optional<SigmoidFit> fit;
      if (curve.points.size() >= 3) {
        fit = fit_sigmoid(curve);
        ++fitted;
      } else {
        c.warn(cond.label() + " (" + task_name(task) + "): fewer than 3 eccentricities, no fit");
      }
      std::optional<double> crit = fit ? critical_eccentricity(*fit, threshold) : std::nullopt;
      curves_json.push_back({{"task", task_name(task)},
                             {"condition", cond.label()},
                             {"curve", curve.to_json()},
                             {"fit", fit ? fit->to_json() : json(nullptr)},
                             {"critical_eccentricity", crit ? json(*crit) : json(nullptr)}});
      const std::string body = curve.to_csv();
      csv += csv.empty() ? body : body.substr(body.find('\n') + 1);
      by_label[{task, cond.label()}] = curve;
      curves.push_back(curve);
      fits.push_back(fit);
    }
    const std::string svg_name = std::string("curves_") + task_name(task) + ".svg";
    c.write(svg_name, curves_svg(curves, fits, std::string(task_name(task)) + " (" + pool_mode_name(mode) + ")"));
  }
  for (const auto& spec : c.p("compare")) {
    const std::string s = spec.get<std::string>();
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--compare expects a=b, got '" + s + "'");
    const auto a = condition_from_label(s.substr(0, eq)).label(), b = condition_from_label(s.substr(eq + 1)).label();
    bool any = false;
    for (const auto& [task, group] : by_task) {
      const auto fa = by_label.find({task, a}), fb = by_label.find({task, b});
      if (fa == by_label.end() || fb == by_label.end()) continue;
      any = true;
      try {
        auto cmp = compare_curves(fa->second, fb->second, bo).to_json();
        cmp["task"] = task_name(task);
        comparisons.push_back(cmp);
      } catch (const std::exception& e) {
        c.error(s, code_of(e), e.what());
      }
    }
    if (!any) c.error(s, "unknown_condition", "no task has curves for both " + a + " and " + b);
  }
  c.write("analysis.json", json{{"mode", pool_mode_name(mode)},
                                {"bootstrap", {{"samples", bo.samples}, {"level", bo.level}, {"seed", bo.seed}}},
                                {"threshold", threshold},
                                {"subjects", tables.size()},
                                {"curves", curves_json},
                                {"comparisons", comparisons}}
                               .dump(2) + "\n");
  c.write("curves.csv", csv);
  c.summary = {{"subjects", tables.size()}, {"curves", curves_json.size()}, {"fits", fitted},
               {"comparisons", comparisons.size()}};
}

void run_ingest(Context& c) {
  const fs::path root = c.str("set");
  c.input_set(root);
  json pin = json::object();
  if (c.has("pin")) {
    c.input_file(c.str("pin"));
    pin = read_json_file(c.str("pin"));
  }
  const auto set = ingest_stimulus_set(root, pin);
  for (const auto& m : set.missing) c.error(m, "missing_file", "expected stimulus file is missing");
  for (const auto& m : set.malformed) c.error(m, "malformed_entry", "entry does not follow the set layout");
  for (const auto& d : set.duplicates) c.warn("duplicate stimuli: " + d);
  c.write("stimulus_manifest.json", set.manifest().dump(2) + "\n");
  c.summary = set.manifest().value("counts", json::object());
  c.summary["missing"] = set.missing.size();
  c.summary["duplicates"] = set.duplicates.size();
}

std::atomic<bool> g_stop_requested{false};
extern "C" void on_stop_signal(int) { g_stop_requested = true; }

void run_serve(Context& c) {
  const fs::path root = c.str("set");
  const auto set = ingest_stimulus_set(root);
  if (!set.missing.empty()) c.warn(std::to_string(set.missing.size()) + " stimulus files missing");
  SessionStore store(c.str("sessions"), set);
  ServerOptions so;
  so.token = c.str("token");
  so.log_requests = c.verbose;
  ExperimentServer server(store, so);
  const int port = server.bind(c.str("host"), c.p("port").get<int>());
  *c.log << "serving http://" << c.str("host") << ":" << port << " (" << store.list().size() << " sessions)\n";
  g_stop_requested = false;
  const auto old_int = std::signal(SIGINT, on_stop_signal);
  const auto old_term = std::signal(SIGTERM, on_stop_signal);
  if (c.has("ready_file")) write_file_atomic(c.str("ready_file"), std::to_string(port) + "\n");
  std::atomic<bool> done{false};
  std::thread watcher([&] {
    while (!done && !g_stop_requested) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    server.stop();
  });
  const bool ok = server.listen();
  done = true;
  watcher.join();
  std::signal(SIGINT, old_int);
  std::signal(SIGTERM, old_term);
  if (!ok && !g_stop_requested) throw IoError("server stopped unexpectedly");
  c.summary = {{"port", port}, {"sessions", store.list().size()}};
}

// ---------------------------------------------------------------- wiring

void add_synthesis_params(Command& c, int steps, double tolerance) {
  c.add("--steps", "steps", Kind::kInt, steps, "maximum optimizer steps");
  c.add("--tolerance", "tolerance", Kind::kDouble, tolerance, "relative loss at convergence");
}

void add_texform_params(Command& c) {
  c.add("--lambda", "lambda", Kind::kDouble, 1.0, "structural prior weight");
  c.add("--min-region", "min_region", Kind::kInt, 16, "minimum pooling region diameter (px)");
  c.add("--zy", "zy", Kind::kDouble, nullptr, "fixation row (default mid-height)");
}

void add_experiment_params(Command& c) {
  c.add("--config", "config", Kind::kString, "", "experiment config JSON");
  c.add("--set", "set", Kind::kString, nullptr, "stimulus set root").required = true;
  c.add("--task", "task", Kind::kString, nullptr, "oddity or 2afc (overrides the config)");
  c.add("--seed", "seed", Kind::kInt, nullptr, "schedule seed (overrides the config)");
  c.add("--trials-per-cell", "trials_per_cell", Kind::kInt, nullptr, "trials per condition and eccentricity");
  c.add("--eccentricities", "eccentricities", Kind::kDoubles, json::array(), "eccentricities in degrees");
  c.add("--conditions", "conditions", Kind::kStrings, json::array(), "family:variant list");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Foveated metamer synthesis, psychophysics and analysis"};
  app.name("metamer");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  bool json_diag = false;
  app.add_flag("--json", json_diag, "print machine-readable diagnostics on stdout");

  std::vector<std::unique_ptr<Command>> commands;
  auto add_command = [&](const std::string& name, const std::string& help, std::function<void(Context&)> body) {
    auto c = std::make_unique<Command>();
    c->name = name;
    c->app = app.add_subcommand(name, help);
    c->body = std::move(body);
    c->app->add_option("--out", c->out, "output directory");
    c->app->add_option("--from-manifest", c->from_manifest, "re-run with the parameters of a manifest");
    c->app->add_option("--jobs", c->jobs, "worker threads")->check(CLI::Range(1, 1024));
    c->app->add_flag("--force", c->force, "allow writing into a non-empty output directory");
    c->app->add_flag("-v,--verbose", c->verbose, "progress on stderr");
    c->app->add_flag("--json", json_diag, "print machine-readable diagnostics on stdout");
    commands.push_back(std::move(c));
    return commands.back().get();
  };

  {
    auto* c = add_command("synth", "feature inversion from seeded noise", run_synth);
    c->add("--in", "in", Kind::kStrings, json::array(), "input PNG files");
    c->add("--set", "set", Kind::kString, "", "stimulus set root (writes a set layout)");
    c->add("--extractor", "extractor", Kind::kString, "random_conv", "random_conv, global_stats or identity");
    c->add("--conv-seed", "conv_seed", Kind::kInt, 7, "weight seed of the random_conv extractor");
    c->add("--family", "family", Kind::kString, "standard", "output family name");
    c->add("--seed,--seeds", "seeds", Kind::kInts, json::array({1, 2}), "noise seeds");
    c->add("--optimizer", "optimizer", Kind::kString, "line_search", "line_search or adam");
    c->add("--adam-rate", "adam_rate", Kind::kDouble, 0.01, "Adam learning rate");
    add_synthesis_params(*c, 4000, 1e-3);
  }
  {
    auto* c = add_command("texform", "pooled texture-statistic synthesis", run_texform);
    c->add("--in", "in", Kind::kStrings, json::array(), "input PNG files");
    c->add("--set", "set", Kind::kString, "", "stimulus set root (writes a set layout)");
    c->add("--s", "s", Kind::kDouble, 0.5, "scaling factor");
    c->add("--zx", "zx", Kind::kDouble, 640.0, "fixation column (px, may lie outside the image)");
    c->add("--seed,--seeds", "seeds", Kind::kInts, json::array({1}), "noise seeds");
    add_texform_params(*c);
    add_synthesis_params(*c, 4000, 1e-3);
  }
  {
    auto* c = add_command("optimize", "grid search of texform (s, z) against reference stimuli", run_optimize);
    c->add("--targets", "targets", Kind::kString, nullptr, "set with the original images").required = true;
    c->add("--refs", "refs", Kind::kString, nullptr, "set with the reference stimuli").required = true;
    c->add("--family", "family", Kind::kString, "robust", "reference family");
    c->add("--s-grid", "s_grid", Kind::kDoubles, default_s_grid(), "scaling factors");
    c->add("--z-grid", "z_grid", Kind::kDoubles, default_z_grid(), "fixation columns (px)");
    c->add("--metric", "metric", Kind::kString, "percep", "mse or percep");
    c->add("--cache", "cache", Kind::kString, "", "per-candidate cache directory");
    add_texform_params(*c);
    add_synthesis_params(*c, 4000, 1e-3);
  }
  {
    auto* c = add_command("iqa", "Gaussian-pyramid image-quality report", run_iqa);
    c->add("--set", "set", Kind::kString, nullptr, "stimulus set root").required = true;
    c->add("--levels", "levels", Kind::kInts, json::array({0, 3}), "pyramid levels");
    c->add("--metrics", "metrics", Kind::kStrings, json::array({"mse", "percep"}), "mse, percep");
    c->add("--families", "families", Kind::kStrings, json::array(), "families (default: all in the set)");
    c->add("--variants", "conditions", Kind::kStrings, json::array({"orig_vs_synth", "synth_vs_synth"}),
           "pair variants");
  }
  {
    auto* c = add_command("trials", "generate a trial schedule", run_trials);
    add_experiment_params(*c);
  }
  {
    auto* c = add_command("simulate", "run a simulated observer over a schedule", run_simulate);
    add_experiment_params(*c);
    c->add("--observer", "observer", Kind::kString, "blur", "blur or random");
    c->add("--noise", "noise", Kind::kDouble, 0.02, "response noise on RMSE distances");
    c->add("--level-step", "level_step", Kind::kDouble, 10.0, "degrees per blur level");
    c->add("--max-level", "max_level", Kind::kInt, 4, "largest blur level");
    c->add("--session", "session", Kind::kString, "sim", "session id written into records");
  }
  {
    auto* c = add_command("analyze", "psychometric curves, fits and comparisons", run_analyze);
    c->add("--in", "in", Kind::kStrings, nullptr, "session directories or cell tables, one per subject").required = true;
    c->add("--mode", "mode", Kind::kString, "pooled_trials", "pooled_trials or mean_of_subjects");
    c->add("--samples", "samples", Kind::kInt, 10000, "bootstrap resamples");
    c->add("--level", "level", Kind::kDouble, 0.95, "interval level");
    c->add("--seed", "seed", Kind::kInt, 1, "bootstrap seed");
    c->add("--exclude-timing-suspect", "exclude_timing_suspect", Kind::kBool, false, "drop flagged trials");
    c->add("--threshold", "threshold", Kind::kDouble, 0.5, "critical eccentricity threshold");
    c->add("--compare", "compare", Kind::kStrings, json::array(), "family:variant=family:variant pairs");
  }
  {
    auto* c = add_command("ingest", "validate a stimulus set and write its manifest", run_ingest);
    c->add("--set", "set", Kind::kString, nullptr, "stimulus set root").required = true;
    c->add("--pin", "pin", Kind::kString, "", "JSON pinning classes, conditions and seeds");
  }
  {
    auto* c = add_command("serve", "HTTP experiment service", run_serve);
    c->writes_outputs = false;
    c->add("--set", "set", Kind::kString, nullptr, "stimulus set root").required = true;
    c->add("--sessions", "sessions", Kind::kString, nullptr, "session storage directory").required = true;
    c->add("--host", "host", Kind::kString, "127.0.0.1", "bind address");
    c->add("--port", "port", Kind::kInt, 8080, "port (0 picks a free one)");
    c->add("--token", "token", Kind::kString, "", "experimenter token for /sessions routes");
    c->add("--ready-file", "ready_file", Kind::kString, "", "write the bound port here once listening");
  }

  std::vector<std::string> argv_store{"metamer"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  auto report = [&](const std::string& command, int code, const Context* ctx, const json& fatal) {
    if (json_diag) {
      json j{{"command", command}, {"exit_code", code},
             {"status", code == kExitOk ? "ok" : code == kExitUsage ? "usage_error" : "error"}};
      json errors = ctx ? ctx->errors : json::array();
      if (!fatal.is_null()) errors.push_back(fatal);
      j["errors"] = errors;
      j["warnings"] = ctx ? json(ctx->warnings) : json::array();
      j["outputs"] = ctx ? json(std::vector<std::string>(ctx->outputs.begin(), ctx->outputs.end())) : json::array();
      j["summary"] = ctx ? ctx->summary : json::object();
      j["items"] = ctx ? ctx->items : json::array();
      out << j.dump(2) << "\n";
      return code;
    }
    if (ctx) {
      constexpr std::size_t kShown = 20;
      for (std::size_t i = 0; i < std::min(kShown, ctx->warnings.size()); ++i)
        err << "warning: " << ctx->warnings[i] << "\n";
      if (ctx->warnings.size() > kShown)
        err << "warning: ... " << ctx->warnings.size() - kShown << " more (use --json for all)\n";
      for (const auto& e : ctx->errors)
        err << "error: " << e["item"].get<std::string>() << ": " << e["message"].get<std::string>() << " ["
            << e["code"].get<std::string>() << "]\n";
      if (!ctx->summary.empty()) out << command << ": " << ctx->summary.dump() << "\n";
    }
    if (!fatal.is_null())
      err << "error: " << fatal["message"].get<std::string>() << " [" << fatal["code"].get<std::string>() << "]\n";
    return code;
  };

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (json_diag || std::find(args.begin(), args.end(), "--json") != args.end()) {
      json_diag = true;
      return report("", kExitUsage, nullptr, {{"item", ""}, {"code", "usage"}, {"message", e.what()}});
    }
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  Command* cmd = nullptr;
  for (auto& c : commands)
    if (c->app->parsed()) cmd = c.get();
  Context ctx;
  ctx.command = cmd->name;
  ctx.jobs = cmd->jobs;
  ctx.verbose = cmd->verbose;
  ctx.log = &err;
  try {
    ctx.params = cmd->resolve();
    if (!cmd->from_manifest.empty()) ctx.manifest_inputs = read_json_file(cmd->from_manifest).value("inputs", json());
    if (cmd->writes_outputs) {
      if (cmd->out.empty()) throw ConfigError("--out is required");
      ctx.out_dir = cmd->out;
      if (fs::exists(ctx.out_dir) && !fs::is_empty(ctx.out_dir) && !cmd->force)
        throw Error("output_exists", ctx.out_dir.string() + " is not empty; pass --force to write into it");
      fs::create_directories(ctx.out_dir);
    }
    cmd->body(ctx);
  } catch (const ConfigError& e) {
    return report(cmd->name, kExitUsage, &ctx, {{"item", ""}, {"code", e.code()}, {"message", e.what()}});
  } catch (const std::exception& e) {
    return report(cmd->name, kExitFailure, &ctx, {{"item", ""}, {"code", code_of(e)}, {"message", e.what()}});
  }

  if (cmd->writes_outputs) {
    json outputs = json::array();
    for (const auto& rel : ctx.outputs)
      outputs.push_back({{"path", rel}, {"git_hash", file_git_hash(ctx.out_dir / rel)}});
    json manifest{{"tool", "metamer"},
                  {"manifest_version", kManifestVersion},
                  {"command", cmd->name},
                  {"params", ctx.params},
                  {"inputs", ctx.inputs},
                  {"outputs", outputs},
                  {"errors", ctx.errors}};
    write_file_atomic(ctx.out_dir / "manifest.json", manifest.dump(2) + "\n");
  }
  return report(cmd->name, ctx.errors.empty() ? kExitOk : kExitFailure, &ctx, nullptr);
}

}  // namespace metamer::cli
