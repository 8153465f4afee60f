#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "metamer/error.hpp"
#include "metamer/psychophysics.hpp"
#include "metamer/synthesis.hpp"

namespace metamer {

// Failure carrying an HTTP status and a stable machine code.
class ServiceError : public Error {
 public:
  ServiceError(int status, std::string code, const std::string& what, nlohmann::json details = nullptr)
      : Error(std::move(code), what), status_(status), details_(std::move(details)) {}
  int status() const noexcept { return status_; }
  const nlohmann::json& details() const noexcept { return details_; }

 private:
  int status_;
  nlohmann::json details_;
};

enum class SessionStatus { kActive, kPaused, kComplete };
const char* session_status_name(SessionStatus s);

// Immutable view of a session; replaced wholesale on every mutation.
struct SessionSnapshot {
  std::string id;
  std::string subject;
  std::string idempotency_key;
  std::string request_hash;  // of the creating request, for idempotent replays
  ExperimentConfig config;  // resolved, including the schedule seed
  std::string config_hash;  // git blob hash of the resolved config JSON
  std::shared_ptr<const std::vector<TrialSpec>> schedule;
  std::vector<TrialRecord> records;  // one per answered trial, schedule order
  std::size_t cursor = 0;
  SessionStatus status = SessionStatus::kActive;
  std::string created_at;
  std::string updated_at;

  nlohmann::json summary() const;
};

struct SubmitResult {
  TrialRecord record;
  SessionStatus status = SessionStatus::kActive;
};

// Sessions persisted under root/<id>/{manifest.json,records.jsonl}. The
// JSONL is append-only and fsynced before a response is acknowledged; on
// construction every session is replayed from disk, incomplete ones as
// paused. Mutations serialize per session; reads take snapshots.
class SessionStore {
 public:
  SessionStore(std::filesystem::path root, StimulusSet stimuli);

  // `config` is experiment config JSON; without "seed" a fresh one is
  // drawn. Refuses 2AFC until the subject has a completed oddity session.
  // A repeated idempotency key returns the original session (`existed`).
  std::shared_ptr<const SessionSnapshot> create(const std::string& subject, const nlohmann::json& config,
                                                const std::string& idempotency_key = "",
                                                bool* existed = nullptr);
  std::shared_ptr<const SessionSnapshot> get(const std::string& id) const;
  std::vector<std::shared_ptr<const SessionSnapshot>> list() const;

  // Cursor trial with stimulus URLs and timing, or an end marker.
  nlohmann::json next_trial(const std::string& id);
  SubmitResult submit(const std::string& id, const std::string& trial_id, int response,
                      const nlohmann::json& telemetry);
  CellTable results(const std::string& id, bool exclude_timing_suspect) const;

  // Content hash -> file, for every stimulus in the set.
  std::optional<std::filesystem::path> stimulus_file(const std::string& hash) const;
  std::string stimulus_hash(const StimulusRef& ref) const;

  const std::filesystem::path& root() const { return root_; }

 private:
  struct Entry {
    std::mutex write_mu;
    mutable std::mutex snap_mu;
    std::shared_ptr<const SessionSnapshot> snap;
    std::shared_ptr<const SessionSnapshot> load() const;
    void store(std::shared_ptr<const SessionSnapshot> s);
  };

  std::shared_ptr<Entry> entry(const std::string& id) const;
  void replay(const std::filesystem::path& dir);
  void write_manifest(const SessionSnapshot& s) const;
  void append_record(const std::string& id, const TrialRecord& r) const;

  std::filesystem::path root_;
  StimulusSet stimuli_;
  std::map<std::string, std::filesystem::path> by_hash_;
  std::map<std::string, std::string> hash_of_path_;
  mutable std::shared_mutex mu_;  // guards the maps below
  std::mutex create_mu_;          // one creation at a time (ordering rule)
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::map<std::string, std::string> idempotency_;
};

struct ServerOptions {
  std::string token;  // when set, /sessions routes need "Authorization: Bearer <token>"
  bool log_requests = false;
};

// HTTP+JSON front end over a SessionStore.
class ExperimentServer {
 public:
  ExperimentServer(SessionStore& store, ServerOptions opts = {});
  ~ExperimentServer();
  // Returns the bound port (port 0 picks a free one).
  int bind(const std::string& host, int port);
  // Blocks until stop().
  bool listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace metamer
