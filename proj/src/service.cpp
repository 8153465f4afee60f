#include "metamer/service.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>
#include <regex>
#include <sstream>

#include "httplib.h"
#include "metamer/hashing.hpp"

namespace metamer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char frac[8];
  std::snprintf(frac, sizeof frac, ".%03dZ", static_cast<int>(ms));
  return std::string(buf) + frac;
}

std::uint64_t fresh_u64() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

std::string fresh_id() {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fresh_u64()));
  return buf;
}

bool valid_subject(const std::string& s) {
  static const std::regex re("[A-Za-z0-9_.-]{1,64}");
  return std::regex_match(s, re);
}

SessionStatus status_from_name(const std::string& s) {
  if (s == "active") return SessionStatus::kActive;
  if (s == "paused") return SessionStatus::kPaused;
  if (s == "complete") return SessionStatus::kComplete;
  throw StructureError("unknown session status '" + s + "'");
}

json manifest_json(const SessionSnapshot& s) {
  json schedule = json::array();
  for (const auto& t : *s.schedule) schedule.push_back(to_json(t));
  json j = s.summary();
  j["manifest_version"] = kManifestVersion;
  j["request_hash"] = s.request_hash;
  j["config"] = to_json(s.config);
  j["schedule"] = std::move(schedule);
  return j;
}

}  // namespace

const char* session_status_name(SessionStatus s) {
  switch (s) {
    case SessionStatus::kActive: return "active";
    case SessionStatus::kPaused: return "paused";
    case SessionStatus::kComplete: return "complete";
  }
  return "active";
}

json SessionSnapshot::summary() const {
  return {{"session_id", id},
          {"subject", subject},
          {"idempotency_key", idempotency_key},
          {"task", task_name(config.task)},
          {"config_hash", config_hash},
          {"seed", config.seed},
          {"cursor", cursor},
          {"total", schedule ? schedule->size() : 0},
          {"status", session_status_name(status)},
          {"created_at", created_at},
          {"updated_at", updated_at}};
}

std::shared_ptr<const SessionSnapshot> SessionStore::Entry::load() const {
  std::lock_guard lk(snap_mu);
  return snap;
}

void SessionStore::Entry::store(std::shared_ptr<const SessionSnapshot> s) {
  std::lock_guard lk(snap_mu);
  snap = std::move(s);
}

SessionStore::SessionStore(fs::path root, StimulusSet stimuli) : root_(std::move(root)), stimuli_(std::move(stimuli)) {
  auto index = [&](const fs::path& p) {
    const auto h = file_git_hash(p);
    by_hash_[h] = p;
    hash_of_path_[fs::relative(p, stimuli_.root).generic_string()] = h;
  };
  for (const auto& item : stimuli_.items) {
    if (item.original) index(*item.original);
    for (const auto& [cond, seeds] : item.synth)
      for (const auto& [seed, p] : seeds) index(p);
  }
  fs::create_directories(root_);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root_))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) replay(d);
}

void SessionStore::replay(const fs::path& dir) {
  json m;
  try {
    m = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw StructureError("corrupt session manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  auto s = std::make_shared<SessionSnapshot>();
  try {
    if (m.at("manifest_version").get<int>() != kManifestVersion)
      throw StructureError("unsupported session manifest version in " + dir.string());
    s->id = m.at("session_id").get<std::string>();
    s->subject = m.at("subject").get<std::string>();
    s->idempotency_key = m.value("idempotency_key", "");
    s->request_hash = m.value("request_hash", "");
    s->config = experiment_config_from_json(m.at("config"));
    s->config_hash = m.at("config_hash").get<std::string>();
    s->created_at = m.at("created_at").get<std::string>();
    s->updated_at = m.at("updated_at").get<std::string>();
    auto schedule = std::make_shared<std::vector<TrialSpec>>();
    for (const auto& t : m.at("schedule")) schedule->push_back(trial_spec_from_json(t));
    s->schedule = std::move(schedule);
    status_from_name(m.at("status").get<std::string>());
  } catch (const json::exception& e) {
    throw StructureError("corrupt session manifest in " + dir.string() + ": " + e.what());
  }
  if (s->id != dir.filename().string()) throw StructureError("session manifest id does not match " + dir.string());

  // Acknowledged records end in a newline; a torn tail was never
  // acknowledged and is cut off.
  const fs::path log = dir / "records.jsonl";
  std::string text = fs::exists(log) ? read_file(log) : std::string();
  const auto last_nl = text.rfind('\n');
  const std::size_t keep = last_nl == std::string::npos ? 0 : last_nl + 1;
  if (keep != text.size()) {
    fs::resize_file(log, keep);
    text.resize(keep);
  }
  s->records = records_from_jsonl(text);
  if (s->records.size() > s->schedule->size())
    throw StructureError("session " + s->id + " has more records than trials");
  for (std::size_t i = 0; i < s->records.size(); ++i) {
    const auto& r = s->records[i];
    const auto& t = (*s->schedule)[i];
    if (r.trial_id != t.id || r.session_id != s->id || !response_valid(t, r.response) ||
        r.correct != (r.response == t.correct_index))
      throw StructureError("session " + s->id + " record " + std::to_string(i + 1) + " does not match its schedule");
  }
  s->cursor = s->records.size();
  s->status = s->cursor == s->schedule->size() ? SessionStatus::kComplete : SessionStatus::kPaused;

  auto e = std::make_shared<Entry>();
  e->snap = s;
  sessions_[s->id] = e;
  if (!s->idempotency_key.empty()) idempotency_[s->idempotency_key] = s->id;
}

void SessionStore::write_manifest(const SessionSnapshot& s) const {
  write_file_atomic(root_ / s.id / "manifest.json", manifest_json(s).dump(2) + "\n");
}

void SessionStore::append_record(const std::string& id, const TrialRecord& r) const {
  const fs::path log = root_ / id / "records.jsonl";
  const std::string line = to_json(r).dump() + "\n";
  const int fd = ::open(log.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("cannot open " + log.string());
  struct stat st {};
  ::fstat(fd, &st);
  std::size_t done = 0;
  bool ok = true;
  while (done < line.size()) {
    const ssize_t w = ::write(fd, line.data() + done, line.size() - done);
    if (w <= 0) {
      ok = false;
      break;
    }
    done += static_cast<std::size_t>(w);
  }
  ok = ok && ::fsync(fd) == 0;
  if (!ok && ::ftruncate(fd, st.st_size) != 0) {
    // the torn tail is dropped on replay
  }
  ::close(fd);
  if (!ok) throw IoError("cannot append to " + log.string());
}

std::shared_ptr<SessionStore::Entry> SessionStore::entry(const std::string& id) const {
  std::shared_lock lk(mu_);
  const auto f = sessions_.find(id);
  if (f == sessions_.end()) throw ServiceError(404, "unknown_session", "no session '" + id + "'");
  return f->second;
}

std::shared_ptr<const SessionSnapshot> SessionStore::get(const std::string& id) const { return entry(id)->load(); }

std::vector<std::shared_ptr<const SessionSnapshot>> SessionStore::list() const {
  std::shared_lock lk(mu_);
  std::vector<std::shared_ptr<const SessionSnapshot>> out;
  for (const auto& [id, e] : sessions_) out.push_back(e->load());
  return out;
}

std::shared_ptr<const SessionSnapshot> SessionStore::create(const std::string& subject, const json& config,
                                                            const std::string& idempotency_key, bool* existed) {
  if (existed) *existed = false;
  if (!valid_subject(subject))
    throw ServiceError(422, "invalid_subject", "subject code must be 1-64 characters of [A-Za-z0-9_.-]");
  const std::string request_hash = git_blob_hash(json{{"subject", subject}, {"config", config}}.dump());

  std::lock_guard create_lk(create_mu_);
  if (!idempotency_key.empty()) {
    std::shared_lock lk(mu_);
    const auto f = idempotency_.find(idempotency_key);
    if (f != idempotency_.end()) {
      auto s = sessions_.at(f->second)->load();
      if (s->request_hash != request_hash)
        throw ServiceError(409, "idempotency_conflict",
                           "idempotency key '" + idempotency_key + "' was used with a different request",
                           json{{"session_id", s->id}});
      if (existed) *existed = true;
      return s;
    }
  }

  ExperimentConfig cfg;
  try {
    cfg = experiment_config_from_json(config);
    if (!config.contains("seed")) cfg.seed = fresh_u64() >> 11;  // exact in a double
    cfg = cfg.resolved();
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ServiceError(422, "invalid_config", e.what());
  } catch (const json::exception& e) {
    throw ServiceError(422, "invalid_config", e.what());
  }

  if (cfg.task == Task::kMatch2afc) {
    bool oddity_done = false;
    for (const auto& s : list())
      oddity_done = oddity_done || (s->subject == subject && s->config.task == Task::kOddity &&
                                    s->status == SessionStatus::kComplete);
    if (!oddity_done)
      throw ServiceError(409, "oddity_first",
                         "subject '" + subject + "' has no completed oddity session; the oddity task is always "
                         "performed before 2AFC matching");
  }

  auto schedule = std::make_shared<std::vector<TrialSpec>>();
  try {
    *schedule = generate_trials(cfg, stimuli_);
  } catch (const StructureError& e) {
    json lines = json::array();
    std::istringstream in(e.what());
    std::string line;
    while (std::getline(in, line))
      if (line.rfind("  ", 0) == 0) lines.push_back(line.substr(2));
    throw ServiceError(422, "insufficient_stimuli", e.what(), lines);
  }
  for (const auto& t : *schedule)
    for (const auto& ref : t.stimuli)
      if (!hash_of_path_.count(ref.path)) throw ServiceError(500, "missing_stimulus", "unindexed stimulus " + ref.path);

  auto s = std::make_shared<SessionSnapshot>();
  {
    std::shared_lock lk(mu_);
    do s->id = fresh_id();
    while (sessions_.count(s->id) || fs::exists(root_ / s->id));
  }
  s->subject = subject;
  s->idempotency_key = idempotency_key;
  s->request_hash = request_hash;
  s->config = cfg;
  s->config_hash = git_blob_hash(to_json(cfg).dump());
  s->schedule = std::move(schedule);
  s->created_at = s->updated_at = utc_now();
  s->status = s->schedule->empty() ? SessionStatus::kComplete : SessionStatus::kActive;

  fs::create_directories(root_ / s->id);
  write_file_atomic(root_ / s->id / "records.jsonl", "");
  write_manifest(*s);

  auto e = std::make_shared<Entry>();
  e->snap = s;
  std::unique_lock lk(mu_);
  sessions_[s->id] = e;
  if (!idempotency_key.empty()) idempotency_[idempotency_key] = s->id;
  return s;
}

json SessionStore::next_trial(const std::string& id) {
  auto e = entry(id);
  auto s = e->load();
  if (s->status == SessionStatus::kPaused) {
    std::lock_guard lk(e->write_mu);
    s = e->load();
    if (s->status == SessionStatus::kPaused) {
      auto resumed = std::make_shared<SessionSnapshot>(*s);
      resumed->status = SessionStatus::kActive;
      resumed->updated_at = utc_now();
      write_manifest(*resumed);
      e->store(resumed);
      s = resumed;
    }
  }
  json out{{"session_id", s->id},
           {"status", session_status_name(s->status)},
           {"cursor", s->cursor},
           {"total", s->schedule->size()}};
  if (s->status == SessionStatus::kComplete) {
    out["end_of_session"] = true;
    return out;
  }
  const TrialSpec& t = (*s->schedule)[s->cursor];
  json urls = json::array();
  for (const auto& ref : t.stimuli) urls.push_back("/stimuli/" + stimulus_hash(ref) + ".png");
  out["end_of_session"] = false;
  out["trial"] = to_json(t);
  out["stimulus_urls"] = std::move(urls);
  out["response_positions"] = response_positions(t.task);
  out["timing"] = {{"stimulus_ms", s->config.stimulus_ms},
                   {"mask_ms", s->config.mask_ms},
                   {"refresh_hz", s->config.refresh_hz},
                   {"frame_ms", 1000.0 / s->config.refresh_hz}};
  return out;
}

SubmitResult SessionStore::submit(const std::string& id, const std::string& trial_id, int response,
                                  const json& telemetry) {
  auto e = entry(id);
  std::lock_guard lk(e->write_mu);
  auto s = e->load();
  const auto& schedule = *s->schedule;
  std::size_t idx = schedule.size();
  for (std::size_t i = 0; i < schedule.size(); ++i)
    if (schedule[i].id == trial_id) {
      idx = i;
      break;
    }
  if (idx == schedule.size())
    throw ServiceError(404, "unknown_trial", "session " + id + " has no trial '" + trial_id + "'");
  if (idx < s->cursor)
    throw ServiceError(409, "duplicate_response", "trial '" + trial_id + "' was already answered",
                       json{{"record", to_json(s->records[idx])}});
  if (idx != s->cursor)
    throw ServiceError(409, "out_of_order", "trial '" + trial_id + "' is not the current trial",
                       json{{"expected_trial_id", schedule[s->cursor].id}});
  const TrialSpec& t = schedule[idx];
  if (!response_valid(t, response))
    throw ServiceError(422, "invalid_response",
                       "response " + std::to_string(response) + " is outside 0.." +
                           std::to_string(response_positions(t.task) - 1));

  TrialRecord r = score_response(t, response, telemetry, s->config.refresh_hz, id);
  append_record(id, r);

  auto next = std::make_shared<SessionSnapshot>(*s);
  next->records.push_back(r);
  next->cursor = idx + 1;
  next->status = next->cursor == schedule.size() ? SessionStatus::kComplete : SessionStatus::kActive;
  next->updated_at = utc_now();
  e->store(next);
  try {
    write_manifest(*next);
  } catch (const std::exception&) {
    // the log is authoritative; the manifest is refreshed on the next write
  }
  return {r, next->status};
}

CellTable SessionStore::results(const std::string& id, bool exclude_timing_suspect) const {
  auto s = get(id);
  auto table = score_session(s->records, *s->schedule, exclude_timing_suspect);
  table.task = s->config.task;
  return table;
}

std::optional<fs::path> SessionStore::stimulus_file(const std::string& hash) const {
  const auto f = by_hash_.find(hash);
  if (f == by_hash_.end()) return std::nullopt;
  return f->second;
}

std::string SessionStore::stimulus_hash(const StimulusRef& ref) const {
  const auto f = hash_of_path_.find(ref.path);
  if (f == hash_of_path_.end()) throw ServiceError(500, "missing_stimulus", "unindexed stimulus " + ref.path);
  return f->second;
}

// ---------------------------------------------------------------- HTTP

struct ExperimentServer::Impl {
  SessionStore& store;
  ServerOptions opts;
  httplib::Server svr;

  Impl(SessionStore& st, ServerOptions o) : store(st), opts(std::move(o)) { routes(); }

  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& msg,
                         const json& details = nullptr) {
    json err{{"code", code}, {"message", msg}};
    if (!details.is_null()) err["details"] = details;
    send_json(res, status, {{"error", err}});
  }

  template <class F>
  static auto guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ServiceError& e) {
        send_error(res, e.status(), e.code(), e.what(), e.details());
      } catch (const json::exception& e) {
        send_error(res, 400, "bad_request", e.what());
      } catch (const ConfigError& e) {
        send_error(res, 422, e.code(), e.what());
      } catch (const Error& e) {
        send_error(res, 500, e.code(), e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal_error", e.what());
      }
    };
  }

  static json body_object(const httplib::Request& req) {
    json j = json::parse(req.body);
    if (!j.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
    return j;
  }

  static bool truthy(const std::string& v) { return v == "1" || v == "true" || v == "yes"; }

  void routes() {
    svr.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (opts.token.empty() || req.path.rfind("/sessions", 0) != 0) return httplib::Server::HandlerResponse::Unhandled;
      if (req.get_header_value("Authorization") == "Bearer " + opts.token)
        return httplib::Server::HandlerResponse::Unhandled;
      send_error(res, 401, "unauthorized", "missing or wrong experimenter token");
      return httplib::Server::HandlerResponse::Handled;
    });
    svr.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "not_found" : "http_error",
                                       "no route for " + req.method + " " + req.path);
    });
    if (opts.log_requests)
      svr.set_logger([](const httplib::Request& req, const httplib::Response& res) {
        std::cerr << req.method << " " << req.path << " " << res.status << "\n";
      });

    svr.Get("/healthz", guarded([this](const httplib::Request&, httplib::Response& res) {
              send_json(res, 200, {{"status", "ok"}, {"sessions", store.list().size()}});
            }));

    svr.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const json body = body_object(req);
               if (!body.contains("subject") || !body["subject"].is_string())
                 throw ServiceError(422, "invalid_subject", "body needs a string 'subject'");
               if (!body.contains("config")) throw ServiceError(422, "invalid_config", "body needs a 'config' object");
               std::string key = req.get_header_value("Idempotency-Key");
               if (body.contains("idempotency_key")) key = body["idempotency_key"].get<std::string>();
               bool existed = false;
               const auto s = store.create(body["subject"].get<std::string>(), body["config"], key, &existed);
               send_json(res, existed ? 200 : 201, s->summary());
             }));

    svr.Get("/sessions", guarded([this](const httplib::Request&, httplib::Response& res) {
              json out = json::array();
              for (const auto& s : store.list()) out.push_back(s->summary());
              send_json(res, 200, {{"sessions", out}});
            }));

    svr.Get(R"(/sessions/([0-9a-f]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
              send_json(res, 200, store.get(req.matches[1])->summary());
            }));

    svr.Get(R"(/sessions/([0-9a-f]+)/next)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              send_json(res, 200, store.next_trial(req.matches[1]));
            }));

    svr.Post(R"(/sessions/([0-9a-f]+)/responses)",
             guarded([this](const httplib::Request& req, httplib::Response& res) {
               const json body = body_object(req);
               if (!body.contains("trial_id") || !body["trial_id"].is_string())
                 throw ServiceError(422, "invalid_response", "body needs a string 'trial_id'");
               if (!body.contains("response") || !body["response"].is_number_integer())
                 throw ServiceError(422, "invalid_response", "body needs an integer 'response'");
               const auto r = store.submit(req.matches[1], body["trial_id"].get<std::string>(),
                                           body["response"].get<int>(), body.value("telemetry", json()));
               send_json(res, 201, {{"record", to_json(r.record)}, {"status", session_status_name(r.status)}});
             }));

    svr.Get(R"(/sessions/([0-9a-f]+)/results)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              const bool exclude = truthy(req.get_param_value("exclude_timing_suspect"));
              const auto s = store.get(req.matches[1]);
              const auto table = store.results(s->id, exclude);
              if (req.get_param_value("format") == "csv") {
                res.status = 200;
                res.set_content(table.to_csv(), "text/csv");
                return;
              }
              send_json(res, 200,
                        {{"session", s->summary()},
                         {"answered", s->records.size()},
                         {"exclude_timing_suspect", exclude},
                         {"table", table.to_json()}});
            }));

    svr.Get(R"(/stimuli/([0-9a-f]{40})\.png)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              const std::string hash = req.matches[1];
              const auto p = store.stimulus_file(hash);
              if (!p) throw ServiceError(404, "unknown_stimulus", "no stimulus with hash " + hash);
              res.status = 200;
              res.set_header("Cache-Control", "public, max-age=31536000, immutable");
              res.set_header("ETag", "\"" + hash + "\"");
              res.set_content(read_file(*p), "image/png");
            }));
  }
};

ExperimentServer::ExperimentServer(SessionStore& store, ServerOptions opts)
    : impl_(std::make_unique<Impl>(store, std::move(opts))) {}

ExperimentServer::~ExperimentServer() = default;

int ExperimentServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->svr.bind_to_any_port(host);
    if (p < 0) throw IoError("cannot bind " + host);
    return p;
  }
  if (!impl_->svr.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

bool ExperimentServer::listen() { return impl_->svr.listen_after_bind(); }

void ExperimentServer::stop() { impl_->svr.stop(); }

}  // namespace metamer
