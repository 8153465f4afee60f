#include <atomic>
#include <fstream>
#include <set>
#include <thread>

#include "corpus.hpp"
#include "doctest.h"
#include "httplib.h"
#include "metamer/hashing.hpp"
#include "metamer/service.hpp"

using namespace metamer;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_store_dir(const std::string& name) {
  const fs::path p = fs::path(METAMER_TEST_DATA_DIR) / "service" / name;
  fs::remove_all(p);
  return p;
}

const StimulusSet& corpus_set() {
  static const StimulusSet set = ingest_stimulus_set(testing::ensure_corpus());
  return set;
}

json small_config(const std::string& task = "oddity") {
  return {{"task", task},
          {"eccentricities", {5, 10}},
          {"conditions", {"texform:orig_vs_synth"}},
          {"trials_per_cell", 3},
          {"seed", 11}};
}

json nominal_telemetry(const TrialSpec& t, double stretch = 0.0) {
  json iv = json::array();
  for (const auto& i : t.timeline)
    iv.push_back({{"onset_ms", 500.0 + i.onset_ms}, {"offset_ms", 500.0 + i.onset_ms + i.duration_ms * (1 + stretch)}});
  return {{"response_time_ms", 700.0}, {"intervals", iv}};
}

std::string error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.code();
  }
  return "";
}

// Answers every remaining trial correctly.
void finish(SessionStore& store, const std::string& id) {
  for (;;) {
    const json n = store.next_trial(id);
    if (n["end_of_session"].get<bool>()) return;
    const TrialSpec t = trial_spec_from_json(n["trial"]);
    store.submit(id, t.id, t.correct_index, nominal_telemetry(t));
  }
}

std::vector<std::string> log_lines(const fs::path& root, const std::string& id) {
  std::ifstream in(root / id / "records.jsonl");
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("session creation rules") {
  const auto root = fresh_store_dir("create");
  SessionStore store(root, corpus_set());

  CHECK(error_code([&] { store.create("S01", small_config("2afc")); }) == "oddity_first");

  bool existed = true;
  const auto a = store.create("S01", small_config(), "key-1", &existed);
  CHECK_FALSE(existed);
  CHECK(a->status == SessionStatus::kActive);
  CHECK(a->schedule->size() == 6);
  CHECK(a->cursor == 0);
  CHECK(fs::exists(root / a->id / "manifest.json"));
  CHECK(fs::exists(root / a->id / "records.jsonl"));

  const auto again = store.create("S01", small_config(), "key-1", &existed);
  CHECK(existed);
  CHECK(again->id == a->id);
  CHECK(error_code([&] { store.create("S02", small_config(), "key-1"); }) == "idempotency_conflict");

  // An incomplete oddity session does not unlock 2AFC.
  CHECK(error_code([&] { store.create("S01", small_config("2afc")); }) == "oddity_first");
  finish(store, a->id);
  CHECK(store.get(a->id)->status == SessionStatus::kComplete);
  const auto afc = store.create("S01", small_config("2afc"));
  CHECK(afc->config.task == Task::kMatch2afc);
  CHECK(error_code([&] { store.create("S02", small_config("2afc")); }) == "oddity_first");

  // Without a pinned seed every session gets its own schedule seed.
  json unseeded = small_config();
  unseeded.erase("seed");
  const auto u1 = store.create("S03", unseeded), u2 = store.create("S03", unseeded);
  CHECK(u1->config.seed != u2->config.seed);
  CHECK(u1->config_hash != u2->config_hash);
  CHECK(a->config_hash == git_blob_hash(to_json(a->config).dump()));

  json bad = small_config();
  bad["trials_per_cell"] = -1;
  CHECK(error_code([&] { store.create("S04", bad); }) == "invalid_config");
  bad = small_config();
  bad["colour"] = 1;
  CHECK(error_code([&] { store.create("S04", bad); }) == "invalid_config");
  CHECK(error_code([&] { store.create("bad subject!", small_config()); }) == "invalid_subject");
  json missing = small_config();
  missing["conditions"] = {"robust:orig_vs_synth"};
  try {
    store.create("S04", missing);
    FAIL("expected a shortfall");
  } catch (const ServiceError& e) {
    CHECK(e.code() == "insufficient_stimuli");
    CHECK(e.details().size() == 2);
  }
}

TEST_CASE("trial sequencing and exactly-once responses") {
  const auto root = fresh_store_dir("sequence");
  SessionStore store(root, corpus_set());
  const auto s = store.create("S01", small_config());

  const json n1 = store.next_trial(s->id), n2 = store.next_trial(s->id);
  CHECK(n1 == n2);
  CHECK(n1["cursor"] == 0);
  CHECK(n1["end_of_session"] == false);
  CHECK(n1["trial"]["id"] == (*s->schedule)[0].id);
  CHECK(n1["stimulus_urls"].size() == 3);
  CHECK(n1["timing"]["stimulus_ms"] == 100);
  CHECK(n1["timing"]["mask_ms"] == 500);
  // Placement is server side, from the session geometry.
  CHECK(n1["trial"]["size_px"].get<double>() == doctest::Approx(256.0).epsilon(0.01));
  for (const auto& u : n1["stimulus_urls"]) {
    const std::string url = u.get<std::string>();
    const auto p = store.stimulus_file(url.substr(9, 40));
    REQUIRE(p.has_value());
    CHECK(file_git_hash(*p) == url.substr(9, 40));
  }

  const TrialSpec t0 = (*s->schedule)[0], t1 = (*s->schedule)[1], t2 = (*s->schedule)[2];
  CHECK(error_code([&] { store.submit(s->id, t1.id, 0, nominal_telemetry(t1)); }) == "out_of_order");
  CHECK(error_code([&] { store.submit(s->id, t0.id, 3, nominal_telemetry(t0)); }) == "invalid_response");
  CHECK(error_code([&] { store.submit(s->id, "t999", 0, json()); }) == "unknown_trial");
  CHECK(error_code([&] { store.submit("ffff", t0.id, 0, json()); }) == "unknown_session");

  const auto r0 = store.submit(s->id, t0.id, t0.correct_index, nominal_telemetry(t0));
  CHECK(r0.record.correct);
  CHECK(r0.record.session_id == s->id);
  CHECK_FALSE(r0.record.timing_suspect);
  CHECK(log_lines(root, s->id).size() == 1);  // written before acknowledgment

  try {
    store.submit(s->id, t0.id, (t0.correct_index + 1) % 3, nominal_telemetry(t0));
    FAIL("duplicate accepted");
  } catch (const ServiceError& e) {
    CHECK(e.code() == "duplicate_response");
    CHECK(e.status() == 409);
    CHECK(e.details()["record"] == to_json(r0.record));
  }
  CHECK(log_lines(root, s->id).size() == 1);

  const auto r1 = store.submit(s->id, t1.id, (t1.correct_index + 1) % 3, nominal_telemetry(t1, 0.4));
  CHECK_FALSE(r1.record.correct);
  CHECK(r1.record.timing_suspect);
  const auto r2 = store.submit(s->id, t2.id, t2.correct_index, json{{"intervals", "garbage"}});
  CHECK_FALSE(r2.record.telemetry_valid);
  CHECK(r2.record.correct);
  CHECK(store.next_trial(s->id)["cursor"] == 3);

  const auto all = store.results(s->id, false), kept = store.results(s->id, true);
  int n_all = 0, k_all = 0;
  for (const auto& c : all.cells) n_all += c.n, k_all += c.k;
  CHECK(n_all == 3);
  CHECK(k_all == 2);
  CHECK(kept.excluded == 1);

  finish(store, s->id);
  const json end = store.next_trial(s->id);
  CHECK(end["end_of_session"] == true);
  CHECK(end["status"] == "complete");
  CHECK(store.get(s->id)->records.size() == s->schedule->size());
}

TEST_CASE("sessions replay exactly after restart") {
  const auto root = fresh_store_dir("replay");
  std::string done_id, open_id;
  json done_table, done_records;
  {
    SessionStore store(root, corpus_set());
    done_id = store.create("S01", small_config(), "k-done")->id;
    finish(store, done_id);
    open_id = store.create("S02", small_config())->id;
    const TrialSpec t = trial_spec_from_json(store.next_trial(open_id)["trial"]);
    store.submit(open_id, t.id, t.correct_index, nominal_telemetry(t, 0.4));
    done_table = store.results(done_id, false).to_json();
    done_records = json::parse(std::string("[") + [&] {
      std::string s;
      for (const auto& r : store.get(done_id)->records) s += (s.empty() ? "" : ",") + to_json(r).dump();
      return s;
    }() + "]");
  }
  // A torn, unacknowledged tail from a crash mid-append.
  {
    std::ofstream out(root / open_id / "records.jsonl", std::ios::app);
    out << "{\"schema_version\":1,\"session_id\":";
  }

  SessionStore store(root, corpus_set());
  CHECK(store.list().size() == 2);
  const auto done = store.get(done_id);
  CHECK(done->status == SessionStatus::kComplete);
  CHECK(store.results(done_id, false).to_json() == done_table);
  for (std::size_t i = 0; i < done->records.size(); ++i) CHECK(to_json(done->records[i]) == done_records[i]);
  bool existed = false;
  CHECK(store.create("S01", small_config(), "k-done", &existed)->id == done_id);
  CHECK(existed);
  // Completed oddity survives the restart, so 2AFC is allowed.
  CHECK(store.create("S01", small_config("2afc"))->config.task == Task::kMatch2afc);

  auto open = store.get(open_id);
  CHECK(open->status == SessionStatus::kPaused);
  CHECK(open->cursor == 1);
  CHECK(open->records[0].timing_suspect);
  CHECK(log_lines(root, open_id).size() == 1);
  const json n = store.next_trial(open_id);
  CHECK(n["status"] == "active");
  CHECK(n["cursor"] == 1);
  CHECK(store.get(open_id)->status == SessionStatus::kActive);
  finish(store, open_id);
  CHECK(log_lines(root, open_id).size() == 6);

  // A log that disagrees with its schedule is refused.
  {
    std::ofstream out(root / open_id / "records.jsonl", std::ios::app);
    out << log_lines(root, open_id).front() << "\n";
  }
  CHECK_THROWS_AS(SessionStore(root, corpus_set()), StructureError);
}

TEST_CASE("concurrent sessions stay isolated and retries score once") {
  const auto root = fresh_store_dir("concurrent");
  SessionStore store(root, corpus_set());
  json cfg = small_config();
  cfg["trials_per_cell"] = 10;
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) ids.push_back(store.create("S" + std::to_string(i), cfg)->id);

  std::atomic<int> accepted{0}, duplicates{0}, other{0};
  std::vector<std::thread> workers;
  for (const auto& id : ids)
    for (int w = 0; w < 3; ++w)  // three clients retrying the same session
      workers.emplace_back([&, id] {
        for (;;) {
          const json n = store.next_trial(id);
          if (n["end_of_session"].get<bool>()) return;
          const TrialSpec t = trial_spec_from_json(n["trial"]);
          try {
            store.submit(id, t.id, t.correct_index, nominal_telemetry(t));
            ++accepted;
          } catch (const ServiceError& e) {
            (e.code() == "duplicate_response" ? duplicates : other)++;
          }
        }
      });
  for (auto& t : workers) t.join();
  CHECK(accepted == 80);
  CHECK(other == 0);
  for (const auto& id : ids) {
    const auto lines = log_lines(root, id);
    CHECK(lines.size() == 20);
    std::set<std::string> trials;
    for (const auto& l : lines) {
      const auto r = trial_record_from_json(json::parse(l));
      CHECK(r.session_id == id);
      trials.insert(r.trial_id);
    }
    CHECK(trials.size() == 20);
  }
}

TEST_CASE("http endpoints") {
  const auto root = fresh_store_dir("http");
  SessionStore store(root, corpus_set());
  ExperimentServer server(store);
  const int port = server.bind("127.0.0.1", 0);
  std::thread th([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);
  cli.set_connection_timeout(5);

  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["status"] == "ok");

  const json create{{"subject", "S01"}, {"config", small_config()}};
  auto created = cli.Post("/sessions", {{"Idempotency-Key", "abc"}}, create.dump(), "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const std::string id = json::parse(created->body)["session_id"];
  auto replayed = cli.Post("/sessions", {{"Idempotency-Key", "abc"}}, create.dump(), "application/json");
  CHECK(replayed->status == 200);
  CHECK(json::parse(replayed->body)["session_id"] == id);

  auto refused = cli.Post("/sessions", json{{"subject", "S01"}, {"config", small_config("2afc")}}.dump(),
                          "application/json");
  CHECK(refused->status == 409);
  CHECK(json::parse(refused->body)["error"]["code"] == "oddity_first");
  auto bad = cli.Post("/sessions", "{not json", "application/json");
  CHECK(bad->status == 400);
  CHECK(json::parse(bad->body)["error"]["code"] == "bad_request");

  auto next = cli.Get("/sessions/" + id + "/next");
  REQUIRE(next);
  CHECK(next->status == 200);
  CHECK(cli.Get("/sessions/" + id + "/next")->body == next->body);
  const json nj = json::parse(next->body);
  const TrialSpec t = trial_spec_from_json(nj["trial"]);
  auto png = cli.Get(nj["stimulus_urls"][0].get<std::string>());
  REQUIRE(png);
  CHECK(png->status == 200);
  CHECK(png->get_header_value("Content-Type") == "image/png");
  CHECK(git_blob_hash(png->body) == nj["stimulus_urls"][0].get<std::string>().substr(9, 40));
  CHECK(cli.Get("/stimuli/" + std::string(40, '0') + ".png")->status == 404);

  const json answer{{"trial_id", t.id}, {"response", t.correct_index}, {"telemetry", nominal_telemetry(t)}};
  auto ok = cli.Post("/sessions/" + id + "/responses", answer.dump(), "application/json");
  REQUIRE(ok);
  CHECK(ok->status == 201);
  const json rec = json::parse(ok->body)["record"];
  CHECK(rec["correct"] == true);
  CHECK(rec["schema_version"] == kRecordSchemaVersion);
  auto dup = cli.Post("/sessions/" + id + "/responses", answer.dump(), "application/json");
  CHECK(dup->status == 409);
  const json dj = json::parse(dup->body)["error"];
  CHECK(dj["code"] == "duplicate_response");
  CHECK(dj["details"]["record"] == rec);
  auto wrong = cli.Post("/sessions/" + id + "/responses", json{{"trial_id", t.id}, {"response", "x"}}.dump(),
                        "application/json");
  CHECK(wrong->status == 422);

  auto results = cli.Get("/sessions/" + id + "/results");
  CHECK(results->status == 200);
  const json rj = json::parse(results->body);
  CHECK(rj["answered"] == 1);
  CHECK(rj["table"] == store.results(id, false).to_json());
  auto csv = cli.Get("/sessions/" + id + "/results?format=csv");
  CHECK(csv->body.rfind("task,family,variant,eccentricity_deg,k,n,proportion\n", 0) == 0);

  auto missing = cli.Get("/sessions/0123abcd/next");
  CHECK(missing->status == 404);
  CHECK(json::parse(missing->body)["error"]["code"] == "unknown_session");
  auto nowhere = cli.Get("/nowhere");
  CHECK(nowhere->status == 404);
  CHECK(json::parse(nowhere->body)["error"]["code"] == "not_found");

  server.stop();
  th.join();

  // Experimenter token guards the session routes only.
  ServerOptions opts;
  opts.token = "secret";
  ExperimentServer guarded(store, opts);
  const int gport = guarded.bind("127.0.0.1", 0);
  std::thread gth([&] { guarded.listen(); });
  httplib::Client gcli("127.0.0.1", gport);
  auto denied = gcli.Get("/sessions/" + id + "/next");
  CHECK(denied->status == 401);
  CHECK(json::parse(denied->body)["error"]["code"] == "unauthorized");
  CHECK(gcli.Get("/sessions/" + id + "/next", {{"Authorization", "Bearer secret"}})->status == 200);
  CHECK(gcli.Get("/healthz")->status == 200);
  guarded.stop();
  gth.join();
}
