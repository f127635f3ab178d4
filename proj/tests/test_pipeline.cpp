#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "fixtures.hpp"
#include "headlens/error.hpp"
#include "headlens/pipeline.hpp"

using namespace headlens;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

std::vector<std::string> pointers(const std::vector<Diagnostic>& d) {
  std::vector<std::string> out;
  for (const auto& x : d) out.push_back(x.pointer);
  return out;
}

bool has(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("a well-formed config validates cleanly") {
  const auto dir = fixtures::scratch("pipe_valid");
  CHECK(validate_config_file(fixtures::tiny_experiment(dir)).empty());
}

TEST_CASE("validation errors point at the offending value") {
  const auto dir = fixtures::scratch("pipe_diag");
  const auto path = fixtures::tiny_experiment(dir);
  json j = read_json(path);
  j["k_grid"] = {0, 3, 99};
  j["alpha_grid"] = {1.0, std::numeric_limits<double>::quiet_NaN()};
  j["layers"] = {0, 2};
  j["formats"] = {"MC", "XX"};
  j["exclude_datasets"] = {"antonym/OE_L2"};
  j["surprise"] = 1;
  j.erase("seed");
  const auto p = pointers(validate_config(j, dir));
  CHECK(has(p, "/k_grid/0"));
  CHECK(!has(p, "/k_grid/1"));
  CHECK(has(p, "/k_grid/2"));
  CHECK(has(p, "/alpha_grid/1"));
  CHECK(has(p, "/layers/1"));
  CHECK(has(p, "/formats/1"));
  CHECK(has(p, "/formats"));  // OE_EN missing
  CHECK(has(p, "/exclude_datasets/0"));
  CHECK(has(p, "/surprise"));
  CHECK(has(p, "/seed"));
}

TEST_CASE("dataset checks catch unknown concepts and thin pair files") {
  const auto dir = fixtures::scratch("pipe_datasets");
  const auto path = fixtures::tiny_experiment(dir);
  json j = read_json(path);
  j["datasets"]["sarcasm"] = "x.json";
  j["shots"]["OE_EN"] = 100000;
  const auto p = pointers(validate_config(j, dir));
  CHECK(has(p, "/datasets/sarcasm"));
  CHECK(has(p, "/shots/OE_EN"));
  j = read_json(path);
  j["datasets"].erase("translation");
  CHECK(has(pointers(validate_config(j, dir)), "/datasets"));
}

TEST_CASE("overrides edit the config before validation") {
  json j = {{"n_prompts", 3}, {"shots", {{"MC", 3}}}};
  apply_override(j, "n_prompts=5");
  apply_override(j, "/shots/MC=2");
  apply_override(j, "output_dir=out/x");
  CHECK(j["n_prompts"] == 5);
  CHECK(j["shots"]["MC"] == 2);
  CHECK(j["output_dir"] == "out/x");
  CHECK_THROWS_AS(apply_override(j, "novalue"), Error);

  const auto dir = fixtures::scratch("pipe_override");
  const auto path = fixtures::tiny_experiment(dir);
  const auto msg = error_of([&] { load_config(path, {"k_grid=[0]"}); });
  CHECK(msg.find("/k_grid/0") != std::string::npos);
}

TEST_CASE("config hash ignores the output directory but tracks inputs") {
  const auto dir = fixtures::scratch("pipe_hash");
  const auto path = fixtures::tiny_experiment(dir);
  const auto base = config_hash(load_config(path));
  CHECK(base.size() == 16);
  CHECK(config_hash(load_config(path)) == base);
  CHECK(config_hash(load_config(path, {"output_dir=elsewhere"})) == base);
  CHECK(config_hash(load_config(path, {"seed=6"})) != base);
  CHECK(config_hash(load_config(path, {}, {"antonym/MC"})) != base);
  // Key order and layer order carry no meaning.
  CHECK(config_hash(load_config(path, {"layers=[1,0]"})) == base);
  // Model weights are part of the hash.
  random_model(fixtures::small_shape(), 4).save(dir / "model");
  CHECK(config_hash(load_config(path)) != base);
}

TEST_CASE("a stage names the missing upstream stage") {
  const auto dir = fixtures::scratch("pipe_upstream");
  const auto cfg = load_config(fixtures::tiny_experiment(dir));
  const auto msg = error_of([&] { run_stage(cfg, Stage::aie); });
  CHECK(msg.find("capture") != std::string::npos);
  CHECK(error_of([&] { run_stage(cfg, Stage::select); }).find("'aie'") != std::string::npos);
}

TEST_CASE("stages are cached until their inputs or outputs change") {
  const auto dir = fixtures::scratch("pipe_cache");
  const auto cfg = load_config(fixtures::tiny_experiment(dir));
  CHECK(run_stage(cfg, Stage::capture));
  CHECK(!run_stage(cfg, Stage::capture));
  const auto sd = stage_dir(cfg, Stage::capture);
  CHECK(sd == dir / "runs" / config_hash(cfg) / "capture");
  const auto manifest = read_json(sd / "manifest.json");
  CHECK(manifest["stage"] == "capture");
  CHECK(manifest["config_hash"] == config_hash(cfg));
  CHECK(manifest.contains("created"));

  // A file the manifest does not list is ignored.
  { std::ofstream(sd / "notes.txt") << "scratch"; }
  CHECK(!run_stage(cfg, Stage::capture));
  // A damaged output forces a recompute that restores it byte for byte.
  const auto listed = manifest["outputs"].begin().key();
  const auto before = read_file(sd / listed);
  { std::ofstream(sd / listed, std::ios::app) << "x"; }
  CHECK(run_stage(cfg, Stage::capture));
  CHECK(read_file(sd / listed) == before);
  CHECK(run_stage(cfg, Stage::capture, RunOptions{.force = true}));
}

TEST_CASE("a full run is reproducible, records exclusions and is thread-count independent") {
  const auto dir = fixtures::scratch("pipe_full");
  const auto path = fixtures::tiny_experiment(dir);
  const auto a = load_config(path, {"output_dir=a"}, {"antonym/MC"});
  const auto b = load_config(path, {"output_dir=b"}, {"antonym/MC"});
  run_pipeline(a);
  run_pipeline(b, RunOptions{.jobs = 3});
  const auto ra = run_dir(a), rb = run_dir(b);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(ra)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), ra);
    REQUIRE(fs::exists(rb / rel));
    if (rel.filename() == "manifest.json") {
      auto ja = read_json(e.path()), jb = read_json(rb / rel);
      ja.erase("created");
      jb.erase("created");
      CHECK(ja == jb);
    } else {
      CHECK_MESSAGE(read_file(e.path()) == read_file(rb / rel), rel.string());
    }
    ++compared;
  }
  CHECK(compared > 50);
  const auto aie_manifest = read_json(stage_dir(a, Stage::aie) / "manifest.json");
  CHECK(aie_manifest["provenance"]["excluded_datasets"] == json::array({"antonym/MC"}));
  const auto best = read_json(stage_dir(a, Stage::steer) / "best.json");
  CHECK((best["k"] == 1 || best["k"] == 2));
  CHECK(fs::exists(stage_dir(a, Stage::report) / "heatmaps" / "aie_heads.svg"));
}

TEST_CASE("records round-trip through the binary store") {
  const auto dir = fixtures::scratch("pipe_records");
  Rng rng(1);
  std::vector<ActivationRecord> recs;
  for (int i = 0; i < 3; ++i) recs.emplace_back("p" + std::to_string(i), 2, 2, 4, fixtures::gaussian(rng, 16));
  save_records(dir / "r", recs);
  const auto back = load_records(dir / "r");
  REQUIRE(back.size() == 3);
  CHECK(back[2].prompt_id() == "p2");
  CHECK(std::equal(back[1].all_heads().begin(), back[1].all_heads().end(), recs[1].all_heads().begin()));
}

TEST_CASE("stage names parse and list their upstream") {
  for (Stage s : kStages) CHECK(parse_stage(to_string(s)) == s);
  CHECK_THROWS_AS(parse_stage("nope"), Error);
  CHECK(upstream(Stage::capture).empty());
  const auto up = upstream(Stage::select);
  CHECK(std::find(up.begin(), up.end(), Stage::aie) != up.end());
}
