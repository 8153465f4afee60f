#include "metamer/psychophysics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "csv.hpp"
#include "metamer/error.hpp"
#include "metamer/gaussian_pyramid.hpp"
#include "metamer/iqa.hpp"
#include "metamer/png_io.hpp"
#include "rng.hpp"

namespace metamer {
namespace fs = std::filesystem;
using detail::csv_field;
using detail::num;

std::vector<std::string> DisplayGeometry::validate() const {
  if (screen_px_w <= 0 || screen_px_h <= 0) throw ConfigError("screen pixel dimensions must be positive");
  if (!(screen_cm_w > 0) || !(screen_cm_h > 0) || !std::isfinite(screen_cm_w) || !std::isfinite(screen_cm_h))
    throw ConfigError("screen physical dimensions must be positive");
  if (!(viewing_distance_cm > 0) || !std::isfinite(viewing_distance_cm))
    throw ConfigError("viewing distance must be positive");
  std::vector<std::string> warnings;
  const double px_per_cm_w = screen_px_w / screen_cm_w, px_per_cm_h = screen_px_h / screen_cm_h;
  if (std::abs(px_per_cm_w / px_per_cm_h - 1.0) > 0.05)
    warnings.push_back("pixel aspect inconsistent: " + num(px_per_cm_w) + " px/cm horizontally vs " +
                       num(px_per_cm_h) + " px/cm vertically");
  return warnings;
}

ScreenAngles degrees_per_screen(const DisplayGeometry& g) {
  g.validate();
  const double k = 180.0 / std::numbers::pi;
  return {2.0 * std::atan(g.screen_cm_w / 2.0 / g.viewing_distance_cm) * k,
          2.0 * std::atan(g.screen_cm_h / 2.0 / g.viewing_distance_cm) * k};
}

double deg_to_px(double deg, const DisplayGeometry& g) {
  if (!(deg >= 0.0)) throw ConfigError("degrees must be >= 0");
  return deg * g.screen_px_h / degrees_per_screen(g).vertical;
}

double px_to_deg(double px, const DisplayGeometry& g) {
  if (!(px >= 0.0)) throw ConfigError("pixels must be >= 0");
  return px * degrees_per_screen(g).vertical / g.screen_px_h;
}

const char* task_name(Task t) { return t == Task::kOddity ? "oddity" : "match2afc"; }

Task task_from_name(const std::string& s) {
  if (s == "oddity") return Task::kOddity;
  if (s == "match2afc" || s == "2afc") return Task::kMatch2afc;
  throw ConfigError("unknown task '" + s + "' (expected oddity or match2afc)");
}

int response_positions(Task t) { return t == Task::kOddity ? 3 : 2; }
double chance_level(Task t) { return 1.0 / response_positions(t); }

// ---------------------------------------------------------------------------

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig c = *this;
  if (c.trials_per_cell == 0) c.trials_per_cell = task == Task::kOddity ? 72 : 80;
  if (c.mask_ms == 0) c.mask_ms = task == Task::kOddity ? 500 : 1000;
  return c;
}

void ExperimentConfig::validate() const {
  geometry.validate();
  if (eccentricities.empty()) throw ConfigError("at least one eccentricity is required");
  std::set<double> seen;
  for (double e : eccentricities) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("eccentricities must be finite and >= 0");
    if (!seen.insert(e).second) throw ConfigError("duplicate eccentricity " + num(e));
  }
  for (const auto& c : conditions)
    if (std::find(roving_variants().begin(), roving_variants().end(), c.variant) == roving_variants().end())
      throw ConfigError("unknown roving variant '" + c.variant + "'");
  if (trials_per_cell < 0) throw ConfigError("trials_per_cell must be > 0");
  if (stimulus_ms <= 0 || mask_ms < 0) throw ConfigError("stimulus_ms must be > 0 and mask_ms >= 0");
  if (!(stimulus_deg > 0.0)) throw ConfigError("stimulus_deg must be > 0");
  if (!(refresh_hz > 0.0)) throw ConfigError("refresh_hz must be > 0");
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json conds = nlohmann::json::array();
  for (const auto& c : cfg.conditions) conds.push_back({{"family", c.family}, {"variant", c.variant}});
  const auto& g = cfg.geometry;
  return {{"task", task_name(cfg.task)},
          {"eccentricities", cfg.eccentricities},
          {"conditions", conds},
          {"trials_per_cell", cfg.trials_per_cell},
          {"stimulus_ms", cfg.stimulus_ms},
          {"mask_ms", cfg.mask_ms},
          {"stimulus_deg", cfg.stimulus_deg},
          {"refresh_hz", cfg.refresh_hz},
          {"seed", cfg.seed},
          {"geometry",
           {{"screen_px", {g.screen_px_w, g.screen_px_h}},
            {"screen_cm", {g.screen_cm_w, g.screen_cm_h}},
            {"viewing_distance_cm", g.viewing_distance_cm}}}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known{"task",        "eccentricities", "conditions", "trials_per_cell",
                                           "stimulus_ms", "mask_ms",        "stimulus_deg", "refresh_hz",
                                           "seed",        "geometry"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown experiment config field '" + k + "'");
  ExperimentConfig c;
  try {
    if (j.contains("task")) c.task = task_from_name(j["task"].get<std::string>());
    if (j.contains("eccentricities")) c.eccentricities = j["eccentricities"].get<std::vector<double>>();
    if (j.contains("conditions"))
      for (const auto& e : j["conditions"]) {
        if (e.is_string()) {
          // "family:variant" shorthand
          const auto s = e.get<std::string>();
          const auto colon = s.find(':');
          if (colon == std::string::npos) throw ConfigError("condition '" + s + "' must be family:variant");
          c.conditions.push_back({s.substr(0, colon), s.substr(colon + 1)});
        } else {
          c.conditions.push_back({e.at("family").get<std::string>(), e.at("variant").get<std::string>()});
        }
      }
    if (j.contains("trials_per_cell")) c.trials_per_cell = j["trials_per_cell"].get<int>();
    if (j.contains("stimulus_ms")) c.stimulus_ms = j["stimulus_ms"].get<int>();
    if (j.contains("mask_ms")) c.mask_ms = j["mask_ms"].get<int>();
    if (j.contains("stimulus_deg")) c.stimulus_deg = j["stimulus_deg"].get<double>();
    if (j.contains("refresh_hz")) c.refresh_hz = j["refresh_hz"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("geometry")) {
      const auto& g = j["geometry"];
      if (g.contains("screen_px")) {
        c.geometry.screen_px_w = g["screen_px"].at(0).get<int>();
        c.geometry.screen_px_h = g["screen_px"].at(1).get<int>();
      }
      if (g.contains("screen_cm")) {
        c.geometry.screen_cm_w = g["screen_cm"].at(0).get<double>();
        c.geometry.screen_cm_h = g["screen_cm"].at(1).get<double>();
      }
      if (g.contains("viewing_distance_cm")) c.geometry.viewing_distance_cm = g["viewing_distance_cm"].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json ref_json(const StimulusRef& r) {
  nlohmann::json j = {{"class", r.cls}, {"image_id", r.image_id}, {"kind", r.kind}, {"path", r.path}};
  if (r.kind == "synth") j["seed"] = r.seed;
  return j;
}

StimulusRef ref_from_json(const nlohmann::json& j) {
  return {j.at("class").get<std::string>(), j.at("image_id").get<std::string>(), j.at("kind").get<std::string>(),
          j.value("seed", -1), j.at("path").get<std::string>()};
}

StimulusRef original_ref(const StimulusItem& it) {
  return {it.cls, it.image_id, "original", -1, it.cls + "/" + it.image_id + "/original.png"};
}

StimulusRef synth_ref(const StimulusItem& it, const std::string& family, int seed) {
  return {it.cls, it.image_id, "synth", seed,
          it.cls + "/" + it.image_id + "/" + family + "_seed" + std::to_string(seed) + ".png"};
}

std::vector<int> item_seeds(const StimulusItem& it, const std::string& family) {
  std::vector<int> out;
  const auto f = it.synth.find(family);
  if (f != it.synth.end())
    for (const auto& [s, p] : f->second) out.push_back(s);
  return out;
}

// n positions in [0, p): each appears n / p times, the remainder goes to
// distinct positions drawn without replacement; then shuffled.
std::vector<int> balanced_positions(int n, int p, std::mt19937_64& rng) {
  std::vector<int> out;
  for (int i = 0; i < n / p; ++i)
    for (int k = 0; k < p; ++k) out.push_back(k);
  std::vector<int> extra(p);
  for (int k = 0; k < p; ++k) extra[k] = k;
  std::shuffle(extra.begin(), extra.end(), rng);
  for (int i = 0; i < n % p; ++i) out.push_back(extra[i]);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace

nlohmann::json to_json(const TrialSpec& t) {
  nlohmann::json stimuli = nlohmann::json::array(), placements = nlohmann::json::array(),
                 timeline = nlohmann::json::array();
  for (const auto& s : t.stimuli) stimuli.push_back(ref_json(s));
  for (const auto& p : t.placements) placements.push_back({{"x", p.x}, {"y", p.y}});
  for (const auto& i : t.timeline)
    timeline.push_back({{"stimuli", i.stimuli}, {"onset_ms", i.onset_ms}, {"duration_ms", i.duration_ms}});
  return {{"id", t.id},
          {"task", task_name(t.task)},
          {"family", t.condition.family},
          {"variant", t.condition.variant},
          {"eccentricity_deg", t.eccentricity_deg},
          {"stimuli", stimuli},
          {"correct_index", t.correct_index},
          {"side", t.side},
          {"placements", placements},
          {"size_px", t.size_px},
          {"timeline", timeline}};
}

TrialSpec trial_spec_from_json(const nlohmann::json& j) {
  try {
    TrialSpec t;
    t.id = j.at("id").get<std::string>();
    t.task = task_from_name(j.at("task").get<std::string>());
    t.condition = {j.at("family").get<std::string>(), j.at("variant").get<std::string>()};
    t.eccentricity_deg = j.at("eccentricity_deg").get<double>();
    for (const auto& s : j.at("stimuli")) t.stimuli.push_back(ref_from_json(s));
    t.correct_index = j.at("correct_index").get<int>();
    t.side = j.value("side", 1);
    for (const auto& p : j.at("placements")) t.placements.push_back({p.at("x").get<double>(), p.at("y").get<double>()});
    t.size_px = j.at("size_px").get<double>();
    for (const auto& i : j.at("timeline"))
      t.timeline.push_back(
          {i.at("stimuli").get<std::vector<int>>(), i.at("onset_ms").get<int>(), i.at("duration_ms").get<int>()});
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw StructureError(std::string("malformed trial spec: ") + e.what());
  }
}

std::vector<TrialSpec> generate_trials(const ExperimentConfig& raw, const StimulusSet& set) {
  const ExperimentConfig cfg = raw.resolved();
  cfg.validate();
  std::vector<Condition> conditions = cfg.conditions;
  if (conditions.empty())
    for (const auto& f : set.conditions)
      for (const auto& v : roving_variants()) conditions.push_back({f, v});
  if (conditions.empty()) throw StructureError("stimulus set has no synthesized families");

  // Eligible images per condition: orig_vs_synth needs the original and one
  // sample, synth_vs_synth two distinct samples.
  std::map<Condition, std::vector<const StimulusItem*>> eligible;
  std::vector<std::string> shortfall;
  for (const auto& c : conditions) {
    auto& v = eligible[c];
    for (const auto& it : set.items) {
      const auto seeds = item_seeds(it, c.family);
      if (c.variant == "orig_vs_synth" ? (it.original && !seeds.empty()) : seeds.size() >= 2) v.push_back(&it);
    }
    if (static_cast<int>(v.size()) < cfg.trials_per_cell)
      for (double e : cfg.eccentricities)
        shortfall.push_back(c.label() + " @ " + num(e) + " deg: need " + std::to_string(cfg.trials_per_cell) +
                            " distinct images, have " + std::to_string(v.size()));
  }
  if (!shortfall.empty()) {
    std::string msg = "insufficient stimuli:";
    for (const auto& s : shortfall) msg += "\n  " + s;
    throw StructureError(msg);
  }

  std::mt19937_64 rng(cfg.seed);
  const int positions = response_positions(cfg.task);
  const double size_px = deg_to_px(cfg.stimulus_deg, cfg.geometry);
  const int n = cfg.trials_per_cell;
  std::vector<TrialSpec> trials;
  for (const auto& c : conditions) {
    for (double ecc : cfg.eccentricities) {
      const double ecc_px = deg_to_px(ecc, cfg.geometry);
      const auto pos = balanced_positions(n, positions, rng);
      const auto flip = balanced_positions(n, 2, rng);  // which member of an orig/synth pair is odd or templated
      auto pool = eligible[c];
      std::shuffle(pool.begin(), pool.end(), rng);
      for (int i = 0; i < n; ++i) {
        const StimulusItem& it = *pool[i];
        auto seeds = item_seeds(it, c.family);
        std::shuffle(seeds.begin(), seeds.end(), rng);
        StimulusRef odd, same;
        if (c.variant == "orig_vs_synth") {
          odd = original_ref(it);
          same = synth_ref(it, c.family, seeds[0]);
          if (flip[i]) std::swap(odd, same);
        } else {
          odd = synth_ref(it, c.family, seeds[0]);
          same = synth_ref(it, c.family, seeds[1]);
        }
        TrialSpec t;
        t.task = cfg.task;
        t.condition = c;
        t.eccentricity_deg = ecc;
        t.correct_index = pos[i];
        t.size_px = size_px;
        if (cfg.task == Task::kOddity) {
          // Three sequential intervals at one peripheral location; the two
          // non-oddball intervals show the same image.
          t.side = std::uniform_int_distribution<int>(0, 1)(rng) ? 1 : -1;
          for (int k = 0; k < 3; ++k) {
            t.stimuli.push_back(k == pos[i] ? odd : same);
            t.placements.push_back({t.side * ecc_px, 0.0});
            t.timeline.push_back({{k}, k * (cfg.stimulus_ms + cfg.mask_ms), cfg.stimulus_ms});
          }
        } else {
          // Foveal template, mask, then left/right candidates; the matching
          // candidate is an identical copy of the template.
          const StimulusRef& tmpl = odd;
          t.stimuli = {tmpl, pos[i] == 0 ? tmpl : same, pos[i] == 0 ? same : tmpl};
          t.placements = {{0.0, 0.0}, {-ecc_px, 0.0}, {ecc_px, 0.0}};
          t.timeline = {{{0}, 0, cfg.stimulus_ms}, {{1, 2}, cfg.stimulus_ms + cfg.mask_ms, cfg.stimulus_ms}};
        }
        trials.push_back(std::move(t));
      }
    }
  }
  std::shuffle(trials.begin(), trials.end(), rng);
  const int width = static_cast<int>(std::to_string(trials.size()).size());
  for (std::size_t i = 0; i < trials.size(); ++i) {
    std::string idx = std::to_string(i + 1);
    trials[i].id = "t" + std::string(width - idx.size(), '0') + idx;
  }
  return trials;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const TrialRecord& r) {
  nlohmann::json iv = nlohmann::json::array();
  for (const auto& i : r.intervals) iv.push_back({{"onset_ms", i.onset_ms}, {"offset_ms", i.offset_ms}});
  return {{"schema_version", r.schema_version},
          {"session_id", r.session_id},
          {"trial_id", r.trial_id},
          {"response", r.response},
          {"correct", r.correct},
          {"response_time_ms", r.response_time_ms},
          {"intervals", iv},
          {"telemetry_valid", r.telemetry_valid},
          {"timing_suspect", r.timing_suspect}};
}

TrialRecord trial_record_from_json(const nlohmann::json& j) {
  try {
    TrialRecord r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kRecordSchemaVersion)
      throw StructureError("unsupported record schema_version " + std::to_string(r.schema_version));
    r.session_id = j.at("session_id").get<std::string>();
    r.trial_id = j.at("trial_id").get<std::string>();
    r.response = j.at("response").get<int>();
    r.correct = j.at("correct").get<bool>();
    r.response_time_ms = j.at("response_time_ms").get<double>();
    for (const auto& i : j.at("intervals")) r.intervals.push_back({i.at("onset_ms"), i.at("offset_ms")});
    r.telemetry_valid = j.at("telemetry_valid").get<bool>();
    r.timing_suspect = j.at("timing_suspect").get<bool>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw StructureError(std::string("malformed trial record: ") + e.what());
  }
}

bool response_valid(const TrialSpec& spec, int response) {
  return response >= 0 && response < response_positions(spec.task);
}

TrialRecord score_response(const TrialSpec& spec, int response, const nlohmann::json& telemetry,
                           double refresh_hz, const std::string& session_id) {
  if (!response_valid(spec, response))
    throw ConfigError("response " + std::to_string(response) + " is not valid for a " + task_name(spec.task) +
                      " trial");
  TrialRecord r;
  r.session_id = session_id;
  r.trial_id = spec.id;
  r.response = response;
  r.correct = response == spec.correct_index;

  bool ok = telemetry.is_object() && telemetry.contains("intervals") && telemetry["intervals"].is_array() &&
            telemetry["intervals"].size() == spec.timeline.size();
  if (ok && telemetry.contains("response_time_ms")) {
    ok = telemetry["response_time_ms"].is_number() && telemetry["response_time_ms"].get<double>() >= 0.0;
    if (ok) r.response_time_ms = telemetry["response_time_ms"].get<double>();
  }
  if (ok) {
    double last = -std::numeric_limits<double>::infinity();
    for (const auto& i : telemetry["intervals"]) {
      if (!i.is_object() || !i.contains("onset_ms") || !i.contains("offset_ms") || !i["onset_ms"].is_number() ||
          !i["offset_ms"].is_number()) {
        ok = false;
        break;
      }
      const IntervalTiming t{i["onset_ms"].get<double>(), i["offset_ms"].get<double>()};
      if (!(t.onset_ms > last && t.offset_ms > t.onset_ms) || !std::isfinite(t.offset_ms)) {
        ok = false;
        break;
      }
      last = t.offset_ms;
      r.intervals.push_back(t);
    }
  }
  if (!ok) {
    r.telemetry_valid = false;
    r.intervals.clear();
    return r;
  }
  // One display frame of slack on every duration and on every gap.
  const double frame = 1000.0 / refresh_hz;
  for (std::size_t k = 0; k < spec.timeline.size(); ++k) {
    const double measured = r.intervals[k].offset_ms - r.intervals[k].onset_ms;
    if (std::abs(measured - spec.timeline[k].duration_ms) > frame) r.timing_suspect = true;
    if (k > 0) {
      const double gap = r.intervals[k].onset_ms - r.intervals[k - 1].offset_ms;
      const double nominal = spec.timeline[k].onset_ms - spec.timeline[k - 1].onset_ms - spec.timeline[k - 1].duration_ms;
      if (std::abs(gap - nominal) > frame) r.timing_suspect = true;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

const CellResult* CellTable::find(const Condition& c, double ecc) const {
  for (const auto& r : cells)
    if (r.condition == c && r.eccentricity_deg == ecc) return &r;
  return nullptr;
}

nlohmann::json CellTable::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : cells)
    rows.push_back({{"family", r.condition.family},
                    {"variant", r.condition.variant},
                    {"eccentricity_deg", r.eccentricity_deg},
                    {"k", r.k},
                    {"n", r.n},
                    {"proportion", r.proportion()}});
  return {{"task", task_name(task)}, {"chance", chance_level(task)}, {"excluded", excluded}, {"cells", rows}};
}

std::string CellTable::to_csv() const {
  std::string out = "task,family,variant,eccentricity_deg,k,n,proportion\n";
  for (const auto& r : cells)
    out += std::string(task_name(task)) + "," + csv_field(r.condition.family) + "," + r.condition.variant + "," +
           num(r.eccentricity_deg) + "," + std::to_string(r.k) + "," + std::to_string(r.n) + "," +
           num(r.proportion()) + "\n";
  return out;
}

CellTable cell_table_from_json(const nlohmann::json& j) {
  try {
    CellTable t;
    t.task = task_from_name(j.at("task").get<std::string>());
    t.excluded = j.value("excluded", 0);
    for (const auto& r : j.at("cells")) {
      CellResult c{{r.at("family").get<std::string>(), r.at("variant").get<std::string>()},
                   r.at("eccentricity_deg").get<double>(), r.at("k").get<int>(), r.at("n").get<int>()};
      if (c.n < 0 || c.k < 0 || c.k > c.n) throw StructureError("cell counts must satisfy 0 <= k <= n");
      t.cells.push_back(c);
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw StructureError(std::string("malformed cell table: ") + e.what());
  }
}

CellTable score_session(const std::vector<TrialRecord>& records, const std::vector<TrialSpec>& specs,
                        bool exclude_timing_suspect) {
  std::map<std::string, const TrialSpec*> by_id;
  for (const auto& s : specs) by_id[s.id] = &s;
  CellTable table;
  if (!specs.empty()) table.task = specs.front().task;
  std::map<std::pair<Condition, double>, CellResult> cells;
  std::set<std::string> seen;
  for (const auto& r : records) {
    const auto f = by_id.find(r.trial_id);
    if (f == by_id.end()) throw StructureError("record for unknown trial '" + r.trial_id + "'");
    if (!seen.insert(r.trial_id).second) throw StructureError("duplicate record for trial '" + r.trial_id + "'");
    const TrialSpec& s = *f->second;
    if (!response_valid(s, r.response) || r.correct != (r.response == s.correct_index))
      throw StructureError("record for trial '" + r.trial_id + "' is scored inconsistently with its spec");
    if (exclude_timing_suspect && r.timing_suspect) {
      ++table.excluded;
      continue;
    }
    auto& c = cells[{s.condition, s.eccentricity_deg}];
    c.condition = s.condition;
    c.eccentricity_deg = s.eccentricity_deg;
    c.k += r.correct ? 1 : 0;
    ++c.n;
  }
  for (auto& [key, c] : cells) table.cells.push_back(c);
  return table;
}

std::string records_to_jsonl(const std::vector<TrialRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

std::vector<TrialRecord> records_from_jsonl(const std::string& text) {
  std::vector<TrialRecord> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw StructureError("JSONL line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(trial_record_from_json(j));
  }
  return out;
}

// ---------------------------------------------------------------------------

int observer_blur_level(const ObserverConfig& cfg, double eccentricity_deg) {
  const long l = std::lround(eccentricity_deg / cfg.level_step_deg);
  return static_cast<int>(std::clamp<long>(l, 0, cfg.max_level));
}

StimulusLoader file_stimulus_loader(const fs::path& root) {
  auto cache = std::make_shared<std::map<std::string, ImageBuffer>>();
  auto mu = std::make_shared<std::mutex>();
  return [root, cache, mu](const StimulusRef& ref) {
    {
      std::lock_guard<std::mutex> lock(*mu);
      const auto f = cache->find(ref.path);
      if (f != cache->end()) return f->second;
    }
    ImageBuffer img = to_grayscale(read_png(root / ref.path));
    std::lock_guard<std::mutex> lock(*mu);
    return cache->emplace(ref.path, std::move(img)).first->second;
  };
}

namespace {

int seeded_pick(const std::vector<int>& options, std::mt19937_64& rng) {
  if (options.size() == 1) return options.front();
  return options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
}

}  // namespace

int random_responder(const TrialSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return std::uniform_int_distribution<int>(0, response_positions(spec.task) - 1)(rng);
}

int simulated_observer(const TrialSpec& spec, const ObserverConfig& cfg, const StimulusLoader& load,
                       std::uint64_t noise_seed) {
  if (std::isinf(cfg.noise_sd)) return random_responder(spec, noise_seed);
  if (!(cfg.noise_sd >= 0.0)) throw ConfigError("observer noise_sd must be >= 0");
  if (!(cfg.level_step_deg > 0.0) || cfg.max_level < 0) throw ConfigError("invalid observer blur schedule");
  if (spec.stimuli.size() != 3) throw StructureError("trial '" + spec.id + "' must reference three stimuli");

  std::vector<ImageBuffer> imgs;
  for (const auto& s : spec.stimuli) imgs.push_back(load(s));
  for (const auto& im : imgs)
    if (!im.same_shape(imgs.front())) throw DimensionError("trial '" + spec.id + "' mixes stimulus sizes");
  const int level = std::min(observer_blur_level(cfg, spec.eccentricity_deg),
                             max_pyramid_levels(imgs[0].width(), imgs[0].height()) - 1);
  for (auto& im : imgs) im = gaussian_level(im, std::max(level, 0));

  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto dist = [&](int a, int b) { return std::sqrt(mse(imgs[a], imgs[b])) + cfg.noise_sd * noise(rng); };

  std::vector<double> score;
  bool larger_wins = true;
  if (spec.task == Task::kOddity) {
    const double d01 = dist(0, 1), d02 = dist(0, 2), d12 = dist(1, 2);
    score = {d01 + d02, d01 + d12, d02 + d12};
  } else {
    score = {dist(0, 1), dist(0, 2)};
    larger_wins = false;
  }
  const double best = larger_wins ? *std::max_element(score.begin(), score.end())
                                  : *std::min_element(score.begin(), score.end());
  std::vector<int> tied;
  for (int i = 0; i < static_cast<int>(score.size()); ++i)
    if (score[i] == best) tied.push_back(i);
  return seeded_pick(tied, rng);
}

std::vector<TrialRecord> simulate_session(const std::vector<TrialSpec>& specs, const Responder& respond,
                                          std::uint64_t seed, const std::string& session_id) {
  std::vector<TrialRecord> out;
  out.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    nlohmann::json iv = nlohmann::json::array();
    for (const auto& t : s.timeline) iv.push_back({{"onset_ms", t.onset_ms}, {"offset_ms", t.onset_ms + t.duration_ms}});
    const nlohmann::json telemetry = {{"response_time_ms", 0.0}, {"intervals", iv}};
    out.push_back(score_response(s, respond(s, detail::mix_seed(seed, i)), telemetry, 60.0, session_id));
  }
  return out;
}

}  // namespace metamer
