#include <chrono>
#include <csignal>
#include <sstream>
#include <thread>

#include "cli.hpp"
#include "corpus.hpp"
#include "doctest.h"
#include "httplib.h"
#include "metamer/hashing.hpp"
#include "metamer/png_io.hpp"

using namespace metamer;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(METAMER_TEST_DATA_DIR) / "cli" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string s(const fs::path& p) { return p.string(); }

// Two 64 px images with two texform-named variants each: enough for an
// IQA report at levels 0 and 3 without running synthesis.
fs::path tiny_set(const fs::path& root) {
  for (int i = 0; i < 2; ++i) {
    const fs::path dir = root / "c0" / ("img" + std::to_string(i));
    fs::create_directories(dir);
    const ImageBuffer orig = testing::corpus_original(64, 40 + i);
    write_png(dir / "original.png", orig, 16);
    for (int seed : {1, 2}) {
      ImageBuffer v = orig;
      const ImageBuffer n = testing::white_noise(64, 100 * i + seed, 0.0, 0.05);
      for (std::size_t k = 0; k < v.size(); ++k) v.data()[k] += n.vec()[k];
      write_png(dir / ("texform_seed" + std::to_string(seed) + ".png"), v, 16);
    }
  }
  return root;
}

int csv_rows(const std::string& text) {
  return static_cast<int>(std::count(text.begin(), text.end(), '\n')) - 1;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(cli_run({}).code == cli::kExitUsage);
  CHECK(cli_run({"simulate", "--nope"}).code == cli::kExitUsage);
  CHECK(cli_run({"analyze", "--samples", "many", "--in", "x", "--out", "y"}).code == cli::kExitUsage);
  const auto help = cli_run({"texform", "--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.out.find("--zx") != std::string::npos);
  const auto j = cli_run({"--json", "iqa", "--bogus"});
  CHECK(j.code == cli::kExitUsage);
  const json d = json::parse(j.out);
  CHECK(d["status"] == "usage_error");
  CHECK(d["errors"][0]["code"] == "usage");
  // Required parameters are checked after manifest resolution.
  const auto missing = cli_run({"--json", "iqa", "--out", s(scratch("usage") / "o")});
  CHECK(missing.code == cli::kExitUsage);
  CHECK(json::parse(missing.out)["errors"][0]["message"] == "--set is required");
}

TEST_CASE("texform writes a PNG and a loss-trace sidecar") {
  const auto dir = scratch("texform");
  write_png(dir / "dog.png", testing::corpus_original(32, 5), 16);
  const auto r = cli_run({"texform", "--in", s(dir / "dog.png"), "--s", "0.5", "--zx", "640", "--seed", "7",
                          "--steps", "200", "--tolerance", "1e-2", "--out", s(dir / "out")});
  CAPTURE(r.err);
  REQUIRE(r.code == cli::kExitOk);
  const auto img = read_png(dir / "out" / "dog_texform_seed7.png");
  CHECK(img.width() == 32);
  const json side = json::parse(read_file(dir / "out" / "dog_texform_seed7.json"));
  CHECK(side["config"]["pooling"]["s"] == 0.5);
  CHECK(side["config"]["pooling"]["z"][0] == 640.0);
  CHECK(side["result"]["seed"] == 7);
  const auto trace = side["result"]["loss_trace"].get<std::vector<double>>();
  REQUIRE(trace.size() >= 2);
  CHECK(trace.back() < trace.front());

  const json m = json::parse(read_file(dir / "out" / "manifest.json"));
  CHECK(m["command"] == "texform");
  CHECK(m["params"]["seeds"] == json::array({7}));
  CHECK(m["inputs"][0]["git_hash"] == file_git_hash(dir / "dog.png"));
  bool listed = false;
  for (const auto& o : m["outputs"])
    if (o["path"] == "dog_texform_seed7.png") listed = o["git_hash"] == file_git_hash(dir / "out" / "dog_texform_seed7.png");
  CHECK(listed);

  // No silent overwrite.
  const auto again = cli_run({"--json", "texform", "--in", s(dir / "dog.png"), "--steps", "5", "--out", s(dir / "out")});
  CHECK(again.code == cli::kExitFailure);
  CHECK(json::parse(again.out)["errors"][0]["code"] == "output_exists");
  CHECK(cli_run({"texform", "--in", s(dir / "dog.png"), "--steps", "5", "--out", s(dir / "out"), "--force"}).code ==
        cli::kExitOk);
}

TEST_CASE("partial batch failure exits 1 with a per-item report") {
  const auto dir = scratch("partial");
  write_png(dir / "good.png", testing::corpus_original(32, 9), 16);
  const auto r = cli_run({"--json", "synth", "--in", s(dir / "good.png"), s(dir / "good.png"), "--steps", "10",
                          "--out", s(dir / "out")});
  CHECK(r.code == cli::kExitOk);
  fs::remove_all(dir / "out");
  std::ofstream(dir / "broken.png") << "not a png";
  const auto p = cli_run({"--json", "synth", "--in", s(dir / "good.png"), s(dir / "broken.png"), "--steps", "10",
                          "--seeds", "1,2", "--out", s(dir / "out")});
  CHECK(p.code == cli::kExitFailure);
  const json d = json::parse(p.out);
  CHECK(d["errors"].size() == 2);  // both seeds of the broken input
  CHECK(d["errors"][0]["item"].get<std::string>().rfind("broken", 0) == 0);
  CHECK(d["summary"]["outputs"] == 2);
  CHECK(fs::exists(dir / "out" / "good_standard_seed1.png"));
  CHECK(fs::exists(dir / "out" / "good_standard_seed2.png"));
  CHECK(json::parse(read_file(dir / "out" / "manifest.json"))["errors"].size() == 2);
}

TEST_CASE("iqa report has one row per pair, level and metric") {
  const auto dir = scratch("iqa");
  const auto set = tiny_set(dir / "set");
  const auto r = cli_run({"iqa", "--set", s(set), "--levels", "0,3", "--metrics", "mse,percep", "--out", s(dir / "out")});
  CAPTURE(r.err);
  REQUIRE(r.code == cli::kExitOk);
  const std::string csv = read_file(dir / "out" / "iqa.csv");
  // 2 images x (2 original~seed + 1 seed~seed) pairs x 2 levels x 2 metrics
  CHECK(csv_rows(csv) == 24);
  CHECK(csv.find(",3,mse,") != std::string::npos);
  CHECK(csv.find(",0,perceptual,") != std::string::npos);
}

TEST_CASE("ingest reports missing files") {
  const auto dir = scratch("ingest");
  const auto set = tiny_set(dir / "set");
  CHECK(cli_run({"ingest", "--set", s(set), "--out", s(dir / "ok")}).code == cli::kExitOk);
  fs::remove(set / "c0" / "img1" / "texform_seed2.png");
  const auto r = cli_run({"--json", "ingest", "--set", s(set), "--out", s(dir / "bad")});
  CHECK(r.code == cli::kExitFailure);
  const json d = json::parse(r.out);
  REQUIRE(d["errors"].size() == 1);
  CHECK(d["errors"][0]["code"] == "missing_file");
  CHECK(d["errors"][0]["item"].get<std::string>().find("texform_seed2") != std::string::npos);
}

TEST_CASE("simulate then analyze is deterministic and reproducible from manifests") {
  const auto dir = scratch("pipeline");
  const auto corpus = testing::ensure_corpus();
  write_file_atomic(dir / "oddity.json",
                    json{{"task", "oddity"},
                         {"eccentricities", {0, 10, 20, 30}},
                         {"conditions", {"texform:orig_vs_synth", "standard:orig_vs_synth"}},
                         {"trials_per_cell", 24}}
                        .dump());
  auto pipeline = [&](const std::string& tag) {
    const auto sim = cli_run({"simulate", "--config", s(dir / "oddity.json"), "--set", s(corpus), "--observer", "blur",
                              "--seed", "1", "--out", s(dir / ("sim" + tag))});
    REQUIRE(sim.code == cli::kExitOk);
    const auto an = cli_run({"analyze", "--in", s(dir / ("sim" + tag)), "--samples", "2000", "--compare",
                             "texform:orig_vs_synth=standard:orig_vs_synth", "--out", s(dir / ("an" + tag))});
    CAPTURE(an.err);
    REQUIRE(an.code == cli::kExitOk);
  };
  pipeline("1");
  pipeline("2");
  for (const char* f : {"records.jsonl", "cells.json", "cells.csv", "trials.json"})
    CHECK(read_file(dir / "sim1" / f) == read_file(dir / "sim2" / f));
  for (const char* f : {"analysis.json", "curves.csv", "curves_oddity.svg"})
    CHECK(read_file(dir / "an1" / f) == read_file(dir / "an2" / f));

  // Re-running from the manifests gives bit-identical outputs.
  REQUIRE(cli_run({"simulate", "--from-manifest", s(dir / "sim1" / "manifest.json"), "--out", s(dir / "sim3")}).code ==
          cli::kExitOk);
  REQUIRE(cli_run({"analyze", "--from-manifest", s(dir / "an1" / "manifest.json"), "--out", s(dir / "an3")}).code ==
          cli::kExitOk);
  CHECK(read_file(dir / "sim1" / "records.jsonl") == read_file(dir / "sim3" / "records.jsonl"));
  CHECK(read_file(dir / "an1" / "analysis.json") == read_file(dir / "an3" / "analysis.json"));
  // A different seed gives a different schedule.
  REQUIRE(cli_run({"simulate", "--from-manifest", s(dir / "sim1" / "manifest.json"), "--seed", "2", "--out",
                   s(dir / "sim4")})
              .code == cli::kExitOk);
  CHECK(read_file(dir / "sim1" / "trials.json") != read_file(dir / "sim4" / "trials.json"));

  const json a = json::parse(read_file(dir / "an1" / "analysis.json"));
  REQUIRE(a["curves"].size() == 2);
  for (const auto& c : a["curves"]) {
    if (c["condition"] == "texform:orig_vs_synth") {
      CHECK(c["fit"]["decay"] == true);
      CHECK(c["critical_eccentricity"].is_number());
    } else {
      CHECK(c["fit"]["decay"] == false);
      CHECK(c["critical_eccentricity"].is_null());
    }
  }
  CHECK(a["comparisons"][0]["verdict"] == "different");
  CHECK(read_file(dir / "an1" / "curves_oddity.svg").rfind("<svg", 0) == 0);

  // Two subjects pooled both ways.
  const auto two = cli_run({"analyze", "--in", s(dir / "sim1"), s(dir / "sim4"), "--mode", "mean_of_subjects",
                            "--samples", "500", "--out", s(dir / "an5")});
  CHECK(two.code == cli::kExitOk);
  const json b = json::parse(read_file(dir / "an5" / "analysis.json"));
  CHECK(b["subjects"] == 2);
  CHECK(b["curves"][0]["curve"]["mode"] == "mean_of_subjects");
}

TEST_CASE("trials subcommand honors overrides") {
  const auto dir = scratch("trials");
  const auto corpus = testing::ensure_corpus();
  const auto r = cli_run({"trials", "--set", s(corpus), "--task", "2afc", "--eccentricities", "5,15",
                          "--conditions", "texform:orig_vs_synth", "--trials-per-cell", "6", "--seed", "3", "--out",
                          s(dir / "out")});
  CAPTURE(r.err);
  REQUIRE(r.code == cli::kExitOk);
  const json t = json::parse(read_file(dir / "out" / "trials.json"));
  CHECK(t["trials"].size() == 12);
  CHECK(t["config"]["task"] == "match2afc");
  CHECK(t["config"]["seed"] == 3);
}

TEST_CASE("optimize recovers planted texform parameters") {
  const auto dir = scratch("optimize");
  const fs::path targets = dir / "targets" / "c0" / "img0";
  fs::create_directories(targets);
  write_png(targets / "original.png", testing::corpus_original(32, 77), 16);
  const std::vector<std::string> synth{"--steps", "150", "--tolerance", "1e-2"};
  auto args = std::vector<std::string>{"texform", "--set", s(dir / "targets"), "--s", "0.5", "--zx", "64",
                                       "--seeds", "1", "--out", s(dir / "refs")};
  args.insert(args.end(), synth.begin(), synth.end());
  REQUIRE(cli_run(args).code == cli::kExitOk);
  CHECK(fs::exists(dir / "refs" / "c0" / "img0" / "original.png"));
  args = {"optimize", "--targets", s(dir / "targets"), "--refs", s(dir / "refs"), "--family", "texform",
          "--s-grid", "0.4,0.5", "--z-grid", "64,96", "--metric", "mse", "--out", s(dir / "out")};
  args.insert(args.end(), synth.begin(), synth.end());
  const auto r = cli_run(args);
  CAPTURE(r.err);
  REQUIRE(r.code == cli::kExitOk);
  const json o = json::parse(read_file(dir / "out" / "optimization.json"));
  const auto& best = o["best"];
  CHECK(best["s"] == 0.5);
  CHECK(best["z"] == 64.0);
  for (const auto& g : o["grid"])
    if (g["s"] != 0.5 || g["z"] != 64.0) CHECK(g["Z"].get<double>() > 10 * best["Z"].get<double>());
  CHECK(csv_rows(read_file(dir / "out" / "optimization.csv")) == 4);
}

TEST_CASE("serve answers until signalled") {
  const auto dir = scratch("serve");
  const auto corpus = testing::ensure_corpus();
  const fs::path ready = dir / "port";
  Run result;
  std::thread th([&] {
    result = cli_run({"serve", "--set", s(corpus), "--sessions", s(dir / "sessions"), "--port", "0", "--ready-file",
                      s(ready)});
  });
  for (int i = 0; i < 200 && !fs::exists(ready); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(25));
  REQUIRE(fs::exists(ready));
  const int port = std::stoi(read_file(ready));
  httplib::Client cli("127.0.0.1", port);
  const auto h = cli.Get("/healthz");
  REQUIRE(h);
  CHECK(h->status == 200);
  const auto created = cli.Post("/sessions",
                                json{{"subject", "S9"},
                                     {"config",
                                      {{"eccentricities", {5}}, {"conditions", {"standard:orig_vs_synth"}},
                                       {"trials_per_cell", 3}}}}
                                    .dump(),
                                "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  std::raise(SIGTERM);
  th.join();
  CHECK(result.code == cli::kExitOk);
  CHECK(result.err.find("serving http://127.0.0.1:") != std::string::npos);
}
