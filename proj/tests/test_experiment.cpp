#include "doctest.h"
#include "robusttraj/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace robusttraj;
using namespace robusttraj::experiment;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("robusttraj_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough to train in well under a second.
fs::path tiny_config(const fs::path& dir) {
  const json j = {{"format_version", 1},
                  {"data", {{"train", 12}, {"test", 4}}},
                  {"train", {{"epochs", 2}, {"drift_scenes", 2}, {"arch", {{"hidden_dim", 8}, {"latent_dim", 2}}}}},
                  {"attack", {{"eps", {0.5}}}}};
  const fs::path p = dir / "tiny.json";
  std::ofstream(p) << j.dump();
  return p;
}

struct CaptureErr {
  std::stringstream buf;
  std::streambuf* old;
  CaptureErr() : old(std::cerr.rdbuf(buf.rdbuf())) {}
  ~CaptureErr() { std::cerr.rdbuf(old); }
};

struct QuietOut {
  std::stringstream buf;
  std::streambuf* old;
  QuietOut() : old(std::cout.rdbuf(buf.rdbuf())) {}
  ~QuietOut() { std::cout.rdbuf(old); }
};

}  // namespace

TEST_CASE("defaults are resolved and echoed") {
  const ExperimentConfig c = resolve_config(json::object(), {});
  const json j = c.to_json();
  CHECK(j.at("format_version") == kConfigFormatVersion);
  CHECK(j.at("train").at("beta") == 0.1);
  CHECK(j.at("train").at("inner_steps") == 2);
  CHECK(j.at("attack").at("steps") == 20);
  CHECK(j.at("attack").at("K") == 5);
  CHECK(j.at("attack").at("eps") == json({0.5, 1.0}));
  CHECK(j.at("data").at("train") == 512);
  CHECK(j.at("data").at("test") == 128);
  CHECK(j.at("simulate").at("epsilon") == 1.0);
  CHECK(j.at("probe").at("seeds") == json({0, 1, 2}));
}

TEST_CASE("overrides beat the file, and resolution is idempotent") {
  const json file = {{"train", {{"beta", 0.5}, {"epochs", 3}}}, {"seed", 4}};
  const ExperimentConfig c = resolve_config(file, {"train.beta=0.25", "attack.kind=naive", "out_dir=elsewhere"});
  CHECK(c.train.beta == 0.25);
  CHECK(c.train.epochs == 3);
  CHECK(c.attack.kind == attack::Kind::Naive);
  CHECK(c.out_dir == "elsewhere");
  CHECK(c.seed == 4);
  const json once = c.to_json();
  CHECK(ExperimentConfig::from_json(once).to_json() == once);
  CHECK(resolve_config(once, {}).to_json() == once);
}

TEST_CASE("module seeds fan out from the global seed") {
  const ExperimentConfig a = resolve_config(json::object(), {"seed=1"});
  const ExperimentConfig b = resolve_config(json::object(), {"seed=2"});
  CHECK(a.train.seed == 1);
  CHECK(a.augment.seed == module_seed(1, "augment"));
  CHECK(a.planner.seed == module_seed(1, "planner"));
  CHECK(a.augment.seed != b.augment.seed);
  CHECK(a.augment.seed != a.planner.seed);
  const ExperimentConfig pinned = resolve_config(json::object(), {"seed=2", "augment.seed=7"});
  CHECK(pinned.augment.seed == 7);
  CHECK(pinned.planner.seed == b.planner.seed);
}

TEST_CASE("schema violations name the field") {
  auto fails_at = [](const json& file, const std::vector<std::string>& ov, const std::string& path) {
    try {
      resolve_config(file, ov);
    } catch (const ValidationError& e) {
      CHECK(e.path() == path);
      return;
    }
    FAIL("no error for " << path);
  };
  fails_at({{"trian", {}}}, {}, "trian");
  fails_at(json::object(), {"train.arch.depth=3"}, "train.arch.depth");
  fails_at(json::object(), {"train.epochs=\"ten\""}, "train.epochs");
  fails_at(json::object(), {"train.epochs=-1"}, "train.epochs");
  fails_at(json::object(), {"attack.eps=0.5"}, "attack.eps");
  fails_at(json::object(), {"attack.eps=[0.5,\"x\"]"}, "attack.eps[1]");
  fails_at(json::object(), {"train.beta=-1"}, "train.beta");
  fails_at(json::object(), {"train.arch.hidden_dim=0"}, "train.arch.hidden_dim");
  fails_at(json::object(), {"data.generator.dt=0"}, "data.generator.dt");
  fails_at(json::object(), {"augment.clip=0"}, "augment.clip");
  fails_at(json::object(), {"attack.kind=\"fgsm\""}, "attack.kind");
  fails_at(json::object(), {"probe.kinds=[\"blur\"]"}, "probe.kinds");
  fails_at(json::object(), {"train.arch.future_len=8"}, "train.arch.future_len");
  fails_at(json::object(), {"noequals"}, "noequals");
  CHECK_THROWS_AS(resolve_config({{"format_version", 2}}, {}), FormatVersionError);
  CHECK_THROWS_AS(resolve_config(json::array(), {}), ValidationError);
}

TEST_CASE("digest tracks configuration, not output location") {
  const ExperimentConfig a = resolve_config(json::object(), {});
  const ExperimentConfig b = resolve_config(json::object(), {"out_dir=\"x\""});
  const ExperimentConfig c = resolve_config(json::object(), {"train.lr=0.002"});
  CHECK(a.digest().size() == 16);
  CHECK(a.digest() == b.digest());
  CHECK(a.digest() != c.digest());
  CHECK(resolve_config(a.to_json(), {}).digest() == a.digest());
}

TEST_CASE("ROBUSTTRAJ_OUT replaces the output directory") {
  ::setenv("ROBUSTTRAJ_OUT", "from_env", 1);
  const ExperimentConfig c = resolve_config({{"out_dir", "from_file"}}, {"out_dir=\"from_flag\""});
  ::unsetenv("ROBUSTTRAJ_OUT");
  CHECK(c.out_dir == "from_env");
}

TEST_CASE("cli exit codes") {
  const fs::path dir = fresh_dir("exit");
  QuietOut quiet;
  {
    CaptureErr err;
    CHECK(cli_main({"frobnicate"}) == 1);
    CHECK(err.buf.str().find("gen-data") != std::string::npos);  // usage text
  }
  {
    CaptureErr err;
    CHECK(cli_main({"gen-data", "--nope"}) == 1);
  }
  {
    CaptureErr err;
    CHECK(cli_main({"gen-data", "--out", (dir / "o").string(), "--set", "train.beta=-2"}) == 1);
    CHECK(err.buf.str().find("train.beta") != std::string::npos);
  }
  {
    CaptureErr err;
    CHECK(cli_main({"eval", "--out", (dir / "empty").string()}) == 2);
  }
  {
    CaptureErr err;
    CHECK(cli_main({"report", "--out", (dir / "empty").string()}) == 2);
  }
}

TEST_CASE("pipeline: gen-data, train, eval, attack, report") {
  const fs::path dir = fresh_dir("pipeline");
  const std::string cfg = tiny_config(dir).string();
  const std::string out = (dir / "o").string();
  QuietOut quiet;
  CHECK(cli_main({"gen-data", "-c", cfg, "--out", out}) == 0);
  for (const char* r : {"clean", "naive_at", "robusttraj"}) CHECK(cli_main({"train", "-c", cfg, "--out", out, "--regime", r}) == 0);
  CHECK(cli_main({"augment", "-c", cfg, "--out", out}) == 0);
  CHECK(cli_main({"train", "-c", cfg, "--out", out, "--regime", "robusttraj", "--augment"}) == 0);

  CHECK(cli_main({"eval", "-c", cfg, "--out", out, "--attack", "deterministic", "--eps", "0.5"}) == 0);
  const std::string eval = slurp(dir / "o/runs/clean-seed0/eval.csv");
  CHECK(eval.find(std::string(train::kMetricsCsvHeader)) != std::string::npos);
  CHECK(eval.find("clean-seed0,test,0.50,deterministic,") != std::string::npos);

  CHECK(cli_main({"attack", "-c", cfg, "--out", out, "--scenes", "2"}) == 0);
  std::ifstream attacks(dir / "o/attacks/deterministic.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(attacks, line); ++lines) {
    const json j = json::parse(line);
    CHECK(j.contains("delta"));
    CHECK(j.contains("config_digest"));
  }
  CHECK(lines == 2);

  CHECK(cli_main({"report", "-c", cfg, "--out", out}) == 0);
  const std::string table = slurp(dir / "o/report.txt");
  const auto pos = [&](const char* s) { return table.find(std::string("\n") + s + " "); };
  REQUIRE(pos("clean") != std::string::npos);
  CHECK(pos("clean") < pos("naive_at"));
  CHECK(pos("naive_at") < pos("robusttraj"));
  CHECK(pos("robusttraj") < pos("robusttraj_aug"));
  CHECK(pos("robusttraj_aug") != std::string::npos);

  // Every artifact carries the digest of the config that produced it.
  const std::string digest = resolve_config(read_config_file(cfg), {"out_dir=\"" + out + "\""}).digest();
  CHECK(slurp(dir / "o/data.jsonl").find(digest) != std::string::npos);
  CHECK(slurp(dir / "o/runs/clean-seed0/model.json").find(digest) != std::string::npos);
  CHECK(json::parse(slurp(dir / "o/gen-data.config.json")).at("config_digest") == digest);
  CHECK(slurp(dir / "o/report.csv").rfind("# config_digest=", 0) == 0);
}

TEST_CASE("pipeline is bitwise reproducible") {
  QuietOut quiet;
  std::vector<std::string> csvs;
  for (const char* name : {"repro_a", "repro_b"}) {
    const fs::path dir = fresh_dir(name);
    const std::string cfg = tiny_config(dir).string();
    const std::string out = (dir / "o").string();
    REQUIRE(cli_main({"gen-data", "-c", cfg, "--out", out, "--seed", "3"}) == 0);
    REQUIRE(cli_main({"train", "-c", cfg, "--out", out, "--seed", "3", "--regime", "robusttraj"}) == 0);
    REQUIRE(cli_main({"eval", "-c", cfg, "--out", out, "--seed", "3", "--regime", "robusttraj"}) == 0);
    csvs.push_back(slurp(dir / "o/runs/robusttraj-seed3/metrics.csv") + slurp(dir / "o/runs/robusttraj-seed3/eval.csv"));
  }
  CHECK(csvs[0] == csvs[1]);
  CHECK(!csvs[0].empty());
}

TEST_CASE("compare_runs averages seeds per regime") {
  auto run = [](const std::string& id, double ade, double robust) {
    train::RunReport r;
    r.run_id = id;
    r.rows.push_back({"test", 0.0, "none", {ade, 2 * ade, 0, 0}, 0.0});
    r.rows.push_back({"test", 0.5, "deterministic", {robust, 2 * robust, 0, 0}, 0.3});
    r.rows.push_back({"test", 1.0, "deterministic", {99, 99, 0, 0}, 0.9});
    return r;
  };
  const auto rows = compare_runs({run("robusttraj-seed0", 2, 4), run("clean-seed0", 1, 10), run("clean-seed1", 3, 20)},
                                 0.5, "deterministic");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].regime == "clean");
  CHECK(rows[0].runs == 2);
  CHECK(rows[0].ade == doctest::Approx(2.0));
  CHECK(rows[0].robust_ade == doctest::Approx(15.0));
  CHECK(rows[1].regime == "robusttraj");
  CHECK(rows[1].drift == doctest::Approx(0.3));
  const std::string csv = report_csv(rows);
  CHECK(csv.rfind(std::string(kReportCsvHeader) + "\n", 0) == 0);
}
