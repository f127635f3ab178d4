#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headlens/report.hpp"
#include "headlens/rng.hpp"
#include "headlens/toy.hpp"

namespace fixtures {

inline std::filesystem::path data_dir() { return HEADLENS_DATA_DIR; }

inline headlens::ModelConfig small_shape(int layers = 2, int d = 32, int heads = 4) {
  headlens::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_head = d / heads;
  c.d_mlp = 2 * d;
  c.max_seq_len = 512;
  return c;
}

/// Fresh directory under the system temp dir, emptied first.
inline std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("headlens_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::vector<float> gaussian(headlens::Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

/// A random two-layer model plus a small config over antonym and
/// translation; returns the config path.
inline std::filesystem::path tiny_experiment(const std::filesystem::path& dir) {
  headlens::random_model(small_shape(), 3).save(dir / "model");
  nlohmann::json j = {
      {"model", "model"},
      {"datasets",
       {{"antonym", (data_dir() / "concepts/antonym.json").string()},
        {"translation", (data_dir() / "concepts/translation.json").string()}}},
      {"translation_table", (data_dir() / "translation_fr.json").string()},
      {"formats", {"OE_EN", "MC"}},
      {"n_prompts", 3},
      {"shots", {{"OE_EN", 2}, {"MC", 2}}},
      {"seed", 5},
      {"k_grid", {1, 2}},
      {"alpha_grid", {1.0}},
      {"layers", {0, 1}},
      {"output_dir", "runs"},
      {"ambiguous_prompts", 2},
      {"format_markers", {{"MC", {"("}}}},
  };
  const auto path = dir / "config.json";
  headlens::write_file_atomic(path, j.dump(1));
  return path;
}

}  // namespace fixtures
