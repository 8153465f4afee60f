#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "metamer/image.hpp"
#include "metamer/synthesis.hpp"

namespace metamer {

// Physical display and viewing distance. Defaults are the apparatus of the
// original experiments: 3440 x 1440 px on an 80 x 34 cm panel at 50 cm.
struct DisplayGeometry {
  int screen_px_w = 3440;
  int screen_px_h = 1440;
  double screen_cm_w = 80.0;
  double screen_cm_h = 34.0;
  double viewing_distance_cm = 50.0;

  // Throws ConfigError on nonpositive entries; returns warnings (aspect
  // mismatch above 5% between px and cm).
  std::vector<std::string> validate() const;
};

struct ScreenAngles {
  double horizontal = 0.0;
  double vertical = 0.0;
};

// Full visual angle subtended by the screen: 2 atan((extent / 2) / d).
ScreenAngles degrees_per_screen(const DisplayGeometry& g);
// Proportional convention: px per degree = screen_px_h / vertical angle.
double deg_to_px(double deg, const DisplayGeometry& g);
double px_to_deg(double px, const DisplayGeometry& g);

enum class Task { kOddity, kMatch2afc };
const char* task_name(Task t);
Task task_from_name(const std::string& s);
int response_positions(Task t);  // 3 for oddity, 2 for 2AFC
double chance_level(Task t);

inline const std::vector<std::string>& roving_variants() {
  static const std::vector<std::string> v{"orig_vs_synth", "synth_vs_synth"};
  return v;
}

struct Condition {
  std::string family;   // stimulus condition in the set: standard, robust, texform
  std::string variant;  // orig_vs_synth or synth_vs_synth
  bool operator==(const Condition&) const = default;
  bool operator<(const Condition& o) const {
    return family != o.family ? family < o.family : variant < o.variant;
  }
  std::string label() const { return family + ":" + variant; }
};

struct ExperimentConfig {
  Task task = Task::kOddity;
  std::vector<double> eccentricities{5, 10, 20, 30, 40};  // placeholder sweep
  std::vector<Condition> conditions;  // empty: every family in the set x both variants
  int trials_per_cell = 0;            // 0: 72 for oddity, 80 for 2AFC
  int stimulus_ms = 100;
  int mask_ms = 0;                    // 0: 500 for oddity, 1000 for 2AFC
  double stimulus_deg = 6.67;
  double refresh_hz = 60.0;           // timing budget is one frame
  std::uint64_t seed = 1;
  DisplayGeometry geometry;

  // Fills task-dependent defaults and checks invariants (ConfigError).
  ExperimentConfig resolved() const;
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

struct StimulusRef {
  std::string cls;
  std::string image_id;
  std::string kind;  // "original" or "synth"
  int seed = -1;     // synth only
  std::string path;  // relative to the stimulus root
  bool operator==(const StimulusRef&) const = default;
};

struct Placement {
  double x = 0.0;  // px from screen center, +x right
  double y = 0.0;  // px from screen center, +y down
};

struct Interval {
  std::vector<int> stimuli;  // indices into TrialSpec::stimuli
  int onset_ms = 0;
  int duration_ms = 0;
};

// Oddity: stimuli are the three intervals in presentation order and
// correct_index is the oddball interval. 2AFC: stimuli are
// {template, left, right} and correct_index is 0 (left) or 1 (right).
struct TrialSpec {
  std::string id;
  Task task = Task::kOddity;
  Condition condition;
  double eccentricity_deg = 0.0;
  std::vector<StimulusRef> stimuli;
  int correct_index = 0;
  int side = 1;  // oddity: meridian side of the intervals, -1 left or +1 right
  std::vector<Placement> placements;  // one per stimulus
  double size_px = 0.0;
  std::vector<Interval> timeline;
};

nlohmann::json to_json(const TrialSpec& t);
TrialSpec trial_spec_from_json(const nlohmann::json& j);

// Throws StructureError listing every cell that lacks enough images.
std::vector<TrialSpec> generate_trials(const ExperimentConfig& cfg, const StimulusSet& set);

inline constexpr int kRecordSchemaVersion = 1;

struct IntervalTiming {
  double onset_ms = 0.0;
  double offset_ms = 0.0;
};

struct TrialRecord {
  int schema_version = kRecordSchemaVersion;
  std::string session_id;
  std::string trial_id;
  int response = -1;
  bool correct = false;
  double response_time_ms = 0.0;
  std::vector<IntervalTiming> intervals;  // measured, one per timeline entry
  bool telemetry_valid = true;
  bool timing_suspect = false;
};

nlohmann::json to_json(const TrialRecord& r);
TrialRecord trial_record_from_json(const nlohmann::json& j);

bool response_valid(const TrialSpec& spec, int response);

// Builds a scored record from raw client telemetry. Telemetry is
// {"response_time_ms": x, "intervals": [{"onset_ms": a, "offset_ms": b}, ...]};
// anything malformed leaves the response counted with telemetry_valid false.
// A measured interval more than one frame from nominal sets timing_suspect.
TrialRecord score_response(const TrialSpec& spec, int response, const nlohmann::json& telemetry,
                           double refresh_hz, const std::string& session_id);

struct CellResult {
  Condition condition;
  double eccentricity_deg = 0.0;
  int k = 0;
  int n = 0;
  double proportion() const { return n ? static_cast<double>(k) / n : 0.0; }
};

struct CellTable {
  Task task = Task::kOddity;
  std::vector<CellResult> cells;  // ordered by condition then eccentricity
  int excluded = 0;               // timing_suspect records left out

  const CellResult* find(const Condition& c, double ecc) const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

CellTable cell_table_from_json(const nlohmann::json& j);

// Proportion correct per (condition, eccentricity). Every record must
// match a spec (StructureError otherwise) and be scored consistently.
CellTable score_session(const std::vector<TrialRecord>& records, const std::vector<TrialSpec>& specs,
                        bool exclude_timing_suspect = false);

// JSONL helpers: one record per line.
std::string records_to_jsonl(const std::vector<TrialRecord>& records);
std::vector<TrialRecord> records_from_jsonl(const std::string& text);

struct ObserverConfig {
  double noise_sd = 0.0;       // response noise on RMSE distances; inf gives chance
  double level_step_deg = 10;  // blur level = clamp(round(ecc / step), 0, max_level)
  int max_level = 4;
};

int observer_blur_level(const ObserverConfig& cfg, double eccentricity_deg);

using StimulusLoader = std::function<ImageBuffer(const StimulusRef&)>;

// Loads from `root` / ref.path, converts to grayscale and memoizes.
StimulusLoader file_stimulus_loader(const std::filesystem::path& root);

// Blurs every stimulus to the eccentricity's pyramid level, compares RMSE
// distances perturbed by Gaussian noise and answers: the oddity interval
// farthest from the other two, or the 2AFC side nearer the template.
// Exact ties go to a seeded draw. Deterministic given noise_seed.
int simulated_observer(const TrialSpec& spec, const ObserverConfig& cfg, const StimulusLoader& load,
                       std::uint64_t noise_seed);

// Uniform over response positions.
int random_responder(const TrialSpec& spec, std::uint64_t seed);

using Responder = std::function<int(const TrialSpec&, std::uint64_t)>;

// Runs a responder over a schedule and returns scored records with nominal
// timing telemetry. Trial i uses noise seed mix(seed, i).
std::vector<TrialRecord> simulate_session(const std::vector<TrialSpec>& specs, const Responder& respond,
                                          std::uint64_t seed, const std::string& session_id);

}  // namespace metamer
