#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headlens/runtime.hpp"
#include "headlens/tasks.hpp"

namespace headlens {

enum class Stage { capture, aie, rsa, select, vectors, steer, report };
inline constexpr std::array<Stage, 7> kStages = {Stage::capture, Stage::aie,   Stage::rsa,   Stage::select,
                                                 Stage::vectors, Stage::steer, Stage::report};
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);
/// Stages whose artifacts `s` reads.
std::vector<Stage> upstream(Stage s);

struct ExperimentConfig {
  std::filesystem::path base_dir;  // relative paths resolve against this (the config's directory)
  std::string model;
  std::map<std::string, std::string> datasets;  // concept id -> pair file
  std::string translation_table;
  std::vector<Format> formats;
  int n_prompts = 0;
  std::map<Format, int> shots;
  std::uint64_t seed = 0;
  std::vector<int> k_grid;
  std::vector<double> alpha_grid;
  std::vector<int> layers;
  std::vector<std::string> exclude_datasets;
  std::string output_dir;
  int ambiguous_prompts = 0;
  std::map<Format, std::vector<std::string>> format_markers;
  int histogram_bins = 20;

  std::filesystem::path resolve(const std::string& p) const;
  /// Canonical JSON (sorted keys, sorted lists where order carries no meaning).
  nlohmann::json to_json() const;
};

struct Diagnostic {
  std::string pointer;  // JSON pointer into the config, e.g. /k_grid/0
  std::string message;
};

/// Schema and cross-field checks. File references are checked relative to
/// `base_dir`; checks needing the model (head counts, layer range) run when
/// the model manifest is readable.
std::vector<Diagnostic> validate_config(const nlohmann::json& config, const std::filesystem::path& base_dir);
std::vector<Diagnostic> validate_config_file(const std::filesystem::path& path);

/// `key=value`: key is a JSON pointer ("/n_prompts") or a plain top-level
/// key; value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Reads, overrides, appends exclusions, validates (throwing with every
/// diagnostic) and parses.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                             const std::vector<std::string>& exclude = {});
ExperimentConfig parse_config(const nlohmann::json& config, const std::filesystem::path& base_dir);

/// 16 hex digits over the canonical config and the contents of every file it
/// references (model directory, pair files, translation table). The output
/// directory is not part of the hash.
std::string config_hash(const ExperimentConfig& cfg);

std::filesystem::path run_dir(const ExperimentConfig& cfg);
std::filesystem::path stage_dir(const ExperimentConfig& cfg, Stage s);

struct RunOptions {
  int jobs = 1;
  bool force = false;  // recompute even when the cached manifest matches
  std::function<void(const std::string&)> log;
};

/// Runs one stage. Skips work when the stage manifest records the same
/// inputs and every listed output is intact, unless `force`. Throws naming
/// the stage to run first when an upstream artifact is missing.
/// Returns true when the stage was recomputed.
bool run_stage(const ExperimentConfig& cfg, Stage stage, const RunOptions& options = {});
void run_pipeline(const ExperimentConfig& cfg, const RunOptions& options = {});

/// Last-token records as raw little-endian f32 plus a JSON index.
void save_records(const std::filesystem::path& stem, const std::vector<ActivationRecord>& records);
std::vector<ActivationRecord> load_records(const std::filesystem::path& stem);

}  // namespace headlens
