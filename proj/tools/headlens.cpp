#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "headlens/pipeline.hpp"
#include "headlens/report.hpp"
#include "headlens/toy.hpp"

namespace fs = std::filesystem;
using namespace headlens;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::vector<std::string> exclude;
  int jobs = 1;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool validate_only = false) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--stage-override", c.overrides, "override a config key: key=value (repeatable)");
  cmd->add_option("--exclude-dataset", c.exclude, "leave a dataset (concept/FORMAT) out of AIE (repeatable)");
  if (!validate_only) {
    cmd->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_flag("--force", c.force, "recompute even when cached artifacts match");
  }
}

RunOptions options(const Common& c) {
  RunOptions o;
  o.jobs = c.jobs;
  o.force = c.force;
  o.log = [](const std::string& s) { std::cerr << s << "\n"; };
  return o;
}

int validate(const Common& c) {
  nlohmann::json j = nlohmann::json::parse(read_file(c.config));
  for (const auto& o : c.overrides) apply_override(j, o);
  if (!c.exclude.empty()) {
    if (!j.contains("exclude_datasets") || !j["exclude_datasets"].is_array())
      j["exclude_datasets"] = nlohmann::json::array();
    for (const auto& e : c.exclude) j["exclude_datasets"].push_back(e);
  }
  const fs::path path(c.config);
  const auto diags = validate_config(j, path.has_parent_path() ? path.parent_path() : fs::path("."));
  for (const auto& d : diags) std::cout << (d.pointer.empty() ? "/" : d.pointer) << ": " << d.message << "\n";
  if (!diags.empty()) return 1;
  const auto cfg = parse_config(j, path.has_parent_path() ? path.parent_path() : fs::path("."));
  std::cout << "ok " << config_hash(cfg) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"headlens: locate function-vector and concept-vector heads, then steer with them"};
  app.require_subcommand(1);

  Common common;
  auto* v = app.add_subcommand("validate", "check a config; prints one line per problem");
  add_common(v, common, true);

  std::vector<std::pair<Stage, CLI::App*>> stages;
  for (Stage s : kStages) {
    auto* cmd = app.add_subcommand(to_string(s), "run the " + to_string(s) + " stage");
    add_common(cmd, common);
    stages.emplace_back(s, cmd);
  }
  auto* all = app.add_subcommand("pipeline", "run every stage in order");
  add_common(all, common);

  std::string toy_out, concepts_dir = "data/concepts", translation = "data/translation_fr.json";
  std::uint64_t toy_seed = 7;
  auto* toy = app.add_subcommand("build-toy", "write the planted 4-layer model");
  toy->add_option("--out", toy_out, "output model directory")->required();
  toy->add_option("--concepts", concepts_dir, "directory of concept pair files")->check(CLI::ExistingDirectory);
  toy->add_option("--translation", translation, "translation table")->check(CLI::ExistingFile);
  toy->add_option("--seed", toy_seed, "seed for word identities and concept-head maps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (v->parsed()) return validate(common);
    if (toy->parsed()) {
      std::vector<ConceptPairs> pairs;
      for (const auto& id : kConcepts) {
        const fs::path p = fs::path(concepts_dir) / (id + ".json");
        if (fs::exists(p)) pairs.push_back(load_concept_pairs(p));
      }
      auto planted = planted_model(pairs, load_translation_table(translation), toy_seed);
      planted.model.save(toy_out);
      std::cout << "wrote " << toy_out << " (designated head " << planted.layout.fv_head.str() << ")\n";
      return 0;
    }
    const auto cfg = load_config(common.config, common.overrides, common.exclude);
    if (all->parsed()) {
      run_pipeline(cfg, options(common));
      std::cout << run_dir(cfg).string() << "\n";
      return 0;
    }
    for (const auto& [s, cmd] : stages)
      if (cmd->parsed()) {
        run_stage(cfg, s, options(common));
        std::cout << stage_dir(cfg, s).string() << "\n";
      }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
