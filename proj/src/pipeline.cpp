#include "headlens/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "headlens/patching.hpp"
#include "headlens/report.hpp"
#include "headlens/rng.hpp"
#include "headlens/rsa.hpp"
#include "headlens/scores.hpp"
#include "headlens/steering.hpp"
#include "headlens/vectors.hpp"

namespace headlens {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Stage s) {
  static const char* names[] = {"capture", "aie", "rsa", "select", "vectors", "steer", "report"};
  return names[static_cast<int>(s)];
}

Stage parse_stage(const std::string& s) {
  for (Stage st : kStages)
    if (to_string(st) == s) return st;
  throw Error("unknown stage '" + s + "'");
}

std::vector<Stage> upstream(Stage s) {
  switch (s) {
    case Stage::capture: return {};
    case Stage::aie: return {Stage::capture};
    case Stage::rsa: return {Stage::capture};
    case Stage::select: return {Stage::aie, Stage::rsa};
    case Stage::vectors: return {Stage::capture, Stage::aie, Stage::rsa, Stage::select};
    case Stage::steer: return {Stage::capture, Stage::vectors};
    case Stage::report: return {Stage::aie, Stage::rsa, Stage::select, Stage::vectors, Stage::steer};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Config

fs::path ExperimentConfig::resolve(const std::string& p) const {
  fs::path path(p);
  return (path.is_absolute() ? path : base_dir / path).lexically_normal();
}

json ExperimentConfig::to_json() const {
  json j;
  j["model"] = model;
  j["datasets"] = datasets;
  j["translation_table"] = translation_table;
  auto fmts = formats;
  std::sort(fmts.begin(), fmts.end());
  j["formats"] = json::array();
  for (Format f : fmts) j["formats"].push_back(to_string(f));
  j["n_prompts"] = n_prompts;
  j["shots"] = json::object();
  for (const auto& [f, n] : shots) j["shots"][to_string(f)] = n;
  j["seed"] = seed;
  j["k_grid"] = k_grid;
  j["alpha_grid"] = alpha_grid;
  j["layers"] = layers;
  auto ex = exclude_datasets;
  std::sort(ex.begin(), ex.end());
  ex.erase(std::unique(ex.begin(), ex.end()), ex.end());
  j["exclude_datasets"] = ex;
  j["output_dir"] = output_dir;
  j["ambiguous_prompts"] = ambiguous_prompts;
  j["format_markers"] = json::object();
  for (const auto& [f, m] : format_markers) j["format_markers"][to_string(f)] = m;
  j["histogram_bins"] = histogram_bins;
  return j;
}

namespace {

const std::set<std::string> kKnownKeys = {"model",    "datasets",         "translation_table", "formats",
                                          "n_prompts", "shots",           "seed",              "k_grid",
                                          "alpha_grid", "layers",         "exclude_datasets",  "output_dir",
                                          "ambiguous_prompts", "format_markers", "histogram_bins"};

std::string ptr(const std::string& key) { return "/" + key; }
std::string ptr(const std::string& key, std::size_t i) { return "/" + key + "/" + std::to_string(i); }
std::string ptr(const std::string& key, const std::string& sub) {
  // JSON pointer escaping of the member name.
  std::string s;
  for (char c : sub) s += c == '~' ? "~0" : c == '/' ? "~1" : std::string(1, c);
  return "/" + key + "/" + s;
}

bool is_int(const json& v) { return v.is_number_integer() || v.is_number_unsigned(); }

std::optional<Format> try_format(const std::string& s) {
  try {
    return parse_format(s);
  } catch (const Error&) {
    return std::nullopt;
  }
}

/// Reads a model's config from its manifest without loading weights.
std::optional<ModelConfig> peek_model(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) return std::nullopt;
  try {
    json m = json::parse(in);
    const json& c = m.at("config");
    ModelConfig cfg;
    cfg.n_layers = c.at("n_layers");
    cfg.n_heads = c.at("n_heads");
    return cfg;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

int default_shots_for(const json& j, Format f) {
  const std::string key = to_string(f);
  if (j.contains("shots") && j["shots"].is_object() && j["shots"].contains(key) && is_int(j["shots"][key]))
    return j["shots"][key].get<int>();
  return default_shots(f);
}

}  // namespace

std::vector<Diagnostic> validate_config(const json& j, const fs::path& base_dir) {
  std::vector<Diagnostic> d;
  auto err = [&](std::string p, std::string m) { d.push_back({std::move(p), std::move(m)}); };
  if (!j.is_object()) {
    err("", "config must be a JSON object");
    return d;
  }
  for (const auto& [k, v] : j.items())
    if (!kKnownKeys.count(k)) err(ptr(k), "unknown key");
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  auto need = [&](const char* key) {
    if (!j.contains(key)) {
      err(ptr(key), "missing required key");
      return false;
    }
    return true;
  };
  auto positive_int = [&](const char* key, int min, bool required) -> std::optional<int> {
    if (!j.contains(key)) {
      if (required) err(ptr(key), "missing required key");
      return std::nullopt;
    }
    if (!is_int(j[key]) || j[key].get<long long>() < min) {
      err(ptr(key), "must be an integer >= " + std::to_string(min));
      return std::nullopt;
    }
    return j[key].get<int>();
  };

  // model
  std::optional<ModelConfig> mcfg;
  if (need("model")) {
    if (!j["model"].is_string()) err("/model", "must be a path string");
    else if (!fs::exists(resolve(j["model"]) / "manifest.json"))
      err("/model", "no model manifest at " + resolve(j["model"]).string());
    else if (!(mcfg = peek_model(resolve(j["model"])))) err("/model", "unreadable model manifest");
  }
  // formats
  std::vector<Format> formats;
  if (need("formats")) {
    if (!j["formats"].is_array() || j["formats"].empty()) err("/formats", "must be a non-empty array");
    else
      for (std::size_t i = 0; i < j["formats"].size(); ++i) {
        const auto& v = j["formats"][i];
        auto f = v.is_string() ? try_format(v) : std::nullopt;
        if (!f) err(ptr("formats", i), "unknown format (expected OE_EN, OE_L2 or MC)");
        else if (std::find(formats.begin(), formats.end(), *f) != formats.end()) err(ptr("formats", i), "duplicate format");
        else formats.push_back(*f);
      }
    if (!formats.empty() && std::find(formats.begin(), formats.end(), Format::OE_EN) == formats.end())
      err("/formats", "OE_EN is required (it is the in-distribution steering format)");
  }
  // shots
  if (j.contains("shots")) {
    if (!j["shots"].is_object()) err("/shots", "must be an object of format -> count");
    else
      for (const auto& [k, v] : j["shots"].items()) {
        if (!try_format(k)) err(ptr("shots", k), "unknown format");
        else if (!is_int(v) || v.get<long long>() < 1) err(ptr("shots", k), "must be an integer >= 1");
      }
  }
  const auto n_prompts = positive_int("n_prompts", 3, true);
  positive_int("ambiguous_prompts", 1, false);
  positive_int("histogram_bins", 1, false);
  if (need("seed") && !(is_int(j["seed"]) && (j["seed"].is_number_unsigned() || j["seed"].get<long long>() >= 0)))
    err("/seed", "must be a non-negative integer");
  if (need("output_dir") && !j["output_dir"].is_string()) err("/output_dir", "must be a path string");

  // translation table
  std::optional<TranslationTable> table;
  if (need("translation_table")) {
    if (!j["translation_table"].is_string()) err("/translation_table", "must be a path string");
    else {
      try {
        table = load_translation_table(resolve(j["translation_table"]));
      } catch (const std::exception& e) {
        err("/translation_table", e.what());
      }
    }
  }
  // datasets and cross-field checks
  std::map<std::string, ConceptPairs> pairs;
  if (need("datasets")) {
    if (!j["datasets"].is_object() || j["datasets"].empty()) err("/datasets", "must be a non-empty object");
    else
      for (const auto& [concept_id, v] : j["datasets"].items()) {
        const std::string p = ptr("datasets", concept_id);
        if (!is_known_concept(concept_id)) {
          err(p, "unknown concept");
          continue;
        }
        if (!v.is_string()) {
          err(p, "must be a path string");
          continue;
        }
        try {
          auto cp = load_concept_pairs(resolve(v));
          if (cp.concept_id != concept_id) err(p, "file declares concept '" + cp.concept_id + "'");
          else pairs.emplace(concept_id, std::move(cp));
        } catch (const std::exception& e) {
          err(p, e.what());
        }
      }
    if (j["datasets"].is_object()) {
      if (j["datasets"].size() < 2) err("/datasets", "at least two concepts are needed for corruption");
      if (!j["datasets"].contains("translation"))
        err("/datasets", "the translation concept is required for ambiguous prompts");
      bool primary = false;
      for (const auto& [k, v] : j["datasets"].items()) primary |= k != "translation";
      if (!primary) err("/datasets", "at least one concept other than translation is required");
    }
  }
  for (const auto& [concept_id, cp] : pairs) {
    for (Format f : formats) {
      const int shots = default_shots_for(j, f);
      const std::string where = j.contains("shots") && j["shots"].is_object() && j["shots"].contains(to_string(f))
                                    ? ptr("shots", to_string(f))
                                    : ptr("datasets", concept_id);
      std::size_t available = cp.pairs.size();
      if (f == Format::OE_L2 && table) available = localize_pairs(cp, *table).pairs.size();
      if (available < static_cast<std::size_t>(shots) + 1)
        err(where, concept_id + " has " + std::to_string(available) + " usable pairs for " + to_string(f) +
                       ", needs shots + 1 = " + std::to_string(shots + 1));
      if (f == Format::MC) {
        std::set<std::string> outs;
        for (const auto& p : cp.pairs) outs.insert(p.output);
        if (outs.size() < 4) err(ptr("datasets", concept_id), "MC needs at least 4 distinct outputs");
      }
    }
    // Distractor pool must cover the demonstrations.
    std::vector<ConceptPairs> all;
    for (const auto& [k, v] : pairs) all.push_back(v);
    const auto pool = distractor_pool(all, concept_id);
    for (Format f : formats) {
      const int shots = default_shots_for(j, f);
      if (pool.size() < static_cast<std::size_t>(shots) + 1 && pairs.size() >= 2)
        err(ptr("datasets", concept_id), "distractor pool too small for " + to_string(f));
    }
  }
  (void)n_prompts;

  // grids
  if (need("k_grid")) {
    if (!j["k_grid"].is_array() || j["k_grid"].empty()) err("/k_grid", "must be a non-empty array");
    else
      for (std::size_t i = 0; i < j["k_grid"].size(); ++i) {
        const auto& v = j["k_grid"][i];
        if (!is_int(v) || v.get<long long>() < 1) err(ptr("k_grid", i), "K must be an integer >= 1");
        else if (mcfg && v.get<long long>() > mcfg->n_layers * mcfg->n_heads)
          err(ptr("k_grid", i), "K exceeds the model's " + std::to_string(mcfg->n_layers * mcfg->n_heads) + " heads");
      }
  }
  if (need("alpha_grid")) {
    if (!j["alpha_grid"].is_array() || j["alpha_grid"].empty()) err("/alpha_grid", "must be a non-empty array");
    else
      for (std::size_t i = 0; i < j["alpha_grid"].size(); ++i) {
        const auto& v = j["alpha_grid"][i];
        if (!v.is_number() || !std::isfinite(v.get<double>())) err(ptr("alpha_grid", i), "alpha must be a finite number");
      }
  }
  if (need("layers")) {
    if (!j["layers"].is_array() || j["layers"].empty()) err("/layers", "must be a non-empty array");
    else
      for (std::size_t i = 0; i < j["layers"].size(); ++i) {
        const auto& v = j["layers"][i];
        if (!is_int(v) || v.get<long long>() < 0) err(ptr("layers", i), "layer must be an integer >= 0");
        else if (mcfg && v.get<long long>() >= mcfg->n_layers)
          err(ptr("layers", i), "layer out of range for a " + std::to_string(mcfg->n_layers) + "-layer model");
      }
  }
  if (j.contains("exclude_datasets")) {
    if (!j["exclude_datasets"].is_array()) err("/exclude_datasets", "must be an array of dataset ids");
    else
      for (std::size_t i = 0; i < j["exclude_datasets"].size(); ++i) {
        const auto& v = j["exclude_datasets"][i];
        bool ok = false;
        if (v.is_string() && j.contains("datasets") && j["datasets"].is_object()) {
          const std::string s = v;
          const auto slash = s.find('/');
          if (slash != std::string::npos) {
            auto f = try_format(s.substr(slash + 1));
            ok = f && j["datasets"].contains(s.substr(0, slash)) &&
                 std::find(formats.begin(), formats.end(), *f) != formats.end();
          }
        }
        if (!ok) err(ptr("exclude_datasets", i), "not a configured dataset id (concept/FORMAT)");
      }
  }
  if (j.contains("format_markers")) {
    if (!j["format_markers"].is_object()) err("/format_markers", "must be an object of format -> token list");
    else
      for (const auto& [k, v] : j["format_markers"].items()) {
        if (!try_format(k)) err(ptr("format_markers", k), "unknown format");
        else if (!v.is_array()) err(ptr("format_markers", k), "must be an array of strings");
        else
          for (std::size_t i = 0; i < v.size(); ++i)
            if (!v[i].is_string() || v[i].get<std::string>().empty())
              err(ptr("format_markers", k) + "/" + std::to_string(i), "must be a non-empty string");
      }
  }
  return d;
}

std::vector<Diagnostic> validate_config_file(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    return {{"", std::string("invalid JSON: ") + e.what()}};
  }
  return validate_config(j, path.parent_path());
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error("override '" + assignment + "' is not key=value");
  std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  if (key[0] != '/') key = "/" + key;
  try {
    config[json::json_pointer(key)] = value;
  } catch (const json::exception& e) {
    throw Error("override '" + assignment + "': " + e.what());
  }
}

ExperimentConfig parse_config(const json& j, const fs::path& base_dir) {
  ExperimentConfig c;
  c.base_dir = base_dir;
  c.model = j.at("model");
  for (const auto& [k, v] : j.at("datasets").items()) c.datasets[k] = v;
  c.translation_table = j.at("translation_table");
  for (const auto& f : j.at("formats")) c.formats.push_back(parse_format(f));
  std::sort(c.formats.begin(), c.formats.end());
  c.n_prompts = j.at("n_prompts");
  for (Format f : c.formats) c.shots[f] = default_shots_for(j, f);
  c.seed = j.at("seed").get<std::uint64_t>();
  c.k_grid = j.at("k_grid").get<std::vector<int>>();
  c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
  c.layers = j.at("layers").get<std::vector<int>>();
  std::sort(c.layers.begin(), c.layers.end());
  c.layers.erase(std::unique(c.layers.begin(), c.layers.end()), c.layers.end());
  if (j.contains("exclude_datasets")) c.exclude_datasets = j["exclude_datasets"].get<std::vector<std::string>>();
  std::sort(c.exclude_datasets.begin(), c.exclude_datasets.end());
  c.exclude_datasets.erase(std::unique(c.exclude_datasets.begin(), c.exclude_datasets.end()),
                           c.exclude_datasets.end());
  c.output_dir = j.at("output_dir");
  c.ambiguous_prompts = j.value("ambiguous_prompts", 10);
  if (j.contains("format_markers"))
    for (const auto& [k, v] : j["format_markers"].items())
      c.format_markers[parse_format(k)] = v.get<std::vector<std::string>>();
  c.histogram_bins = j.value("histogram_bins", 20);
  return c;
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides,
                             const std::vector<std::string>& exclude) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(path.string() + ": invalid JSON: " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  if (!exclude.empty()) {
    if (!j.contains("exclude_datasets") || !j["exclude_datasets"].is_array()) j["exclude_datasets"] = json::array();
    for (const auto& e : exclude) j["exclude_datasets"].push_back(e);
  }
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  const auto diags = validate_config(j, base);
  if (!diags.empty()) {
    std::string msg = path.string() + ": invalid config";
    for (const auto& d : diags) msg += "\n  " + (d.pointer.empty() ? std::string("/") : d.pointer) + ": " + d.message;
    throw Error(msg);
  }
  return parse_config(j, base);
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = cfg.to_json();
  j.erase("output_dir");
  std::uint64_t h = fnv1a64(j.dump());
  // Contents of every referenced input, in a fixed order.
  const fs::path model_dir = cfg.resolve(cfg.model);
  for (const char* name : {"manifest.json", "weights.bin", "vocab.json"}) {
    h = fnv1a64(name, h);
    h = fnv1a64(read_file(model_dir / name), h);
  }
  for (const auto& [concept_id, p] : cfg.datasets) {
    h = fnv1a64(concept_id, h);
    h = fnv1a64(read_file(cfg.resolve(p)), h);
  }
  h = fnv1a64(read_file(cfg.resolve(cfg.translation_table)), h);
  return hex64(h);
}

fs::path run_dir(const ExperimentConfig& cfg) { return cfg.resolve(cfg.output_dir) / config_hash(cfg); }
fs::path stage_dir(const ExperimentConfig& cfg, Stage s) { return run_dir(cfg) / to_string(s); }

// ---------------------------------------------------------------------------
// Records

void save_records(const fs::path& stem, const std::vector<ActivationRecord>& records) {
  json index;
  index["prompt_ids"] = json::array();
  std::string blob;
  int L = 0, H = 0, d = 0;
  for (const auto& r : records) {
    if (index["prompt_ids"].empty()) L = r.n_layers(), H = r.n_heads(), d = r.d_model();
    if (r.n_layers() != L || r.n_heads() != H || r.d_model() != d) throw Error("save_records: records differ in shape");
    index["prompt_ids"].push_back(r.prompt_id());
    auto x = r.all_heads();
    blob.append(reinterpret_cast<const char*>(x.data()), x.size() * sizeof(float));
  }
  index["n_layers"] = L;
  index["n_heads"] = H;
  index["d_model"] = d;
  index["dtype"] = "f32";
  write_file_atomic(stem.string() + ".f32", blob);
  write_file_atomic(stem.string() + ".json", index.dump(1) + "\n");
}

std::vector<ActivationRecord> load_records(const fs::path& stem) {
  const json index = json::parse(read_file(stem.string() + ".json"));
  const std::string blob = read_file(stem.string() + ".f32");
  const int L = index.at("n_layers"), H = index.at("n_heads"), d = index.at("d_model");
  const std::size_t per = static_cast<std::size_t>(L) * H * d;
  const auto& ids = index.at("prompt_ids");
  if (blob.size() != ids.size() * per * sizeof(float))
    throw Error(stem.string() + ".f32: size does not match its index");
  std::vector<ActivationRecord> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::vector<float> v(per);
    std::memcpy(v.data(), blob.data() + i * per * sizeof(float), per * sizeof(float));
    out.emplace_back(ids[i].get<std::string>(), L, H, d, std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

std::string file_key(const std::string& dataset_id) {
  std::string s = dataset_id;
  const auto slash = s.find('/');
  if (slash != std::string::npos) s.replace(slash, 1, "__");
  return s;
}

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Collects a stage's outputs in a scratch directory, then swaps it in.
class StageWriter {
 public:
  StageWriter(fs::path final_dir) : final_(std::move(final_dir)), dir_(final_.string() + ".partial") {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void write(const std::string& rel, const std::string& content) {
    write_file_atomic(dir_ / rel, content);
    outputs_[rel] = hex64(fnv1a64(content));
  }
  void write_records(const std::string& rel_stem, const std::vector<ActivationRecord>& records) {
    save_records(dir_ / rel_stem, records);
    for (const char* ext : {".f32", ".json"})
      outputs_[rel_stem + ext] = hex64(fnv1a64(read_file(dir_ / (rel_stem + ext))));
  }
  json& provenance() { return provenance_; }
  void commit(Stage stage, const std::string& hash, const std::string& inputs_digest) {
    json m;
    m["stage"] = to_string(stage);
    m["config_hash"] = hash;
    m["created"] = now_utc();
    m["inputs_digest"] = inputs_digest;
    m["outputs"] = outputs_;
    m["provenance"] = provenance_;
    write_file_atomic(dir_ / "manifest.json", m.dump(1) + "\n");
    fs::remove_all(final_);
    fs::rename(dir_, final_);
  }

 private:
  fs::path final_, dir_;
  std::map<std::string, std::string> outputs_;
  json provenance_ = json::object();
};

json read_manifest(const fs::path& dir) { return json::parse(read_file(dir / "manifest.json")); }

/// Digest of a finished stage's outputs (timestamps excluded).
std::string outputs_digest(const json& manifest) { return hex64(fnv1a64(manifest.at("outputs").dump())); }

bool manifest_intact(const fs::path& dir, const std::string& inputs_digest) {
  if (!fs::exists(dir / "manifest.json")) return false;
  try {
    const json m = read_manifest(dir);
    if (m.value("inputs_digest", "") != inputs_digest) return false;
    for (const auto& [rel, h] : m.at("outputs").items()) {
      const fs::path p = dir / rel;
      if (!fs::exists(p) || hex64(fnv1a64(read_file(p))) != h.get<std::string>()) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

std::vector<std::string> dataset_ids(const ExperimentConfig& cfg) {
  std::vector<std::string> ids;
  for (const auto& [concept_id, p] : cfg.datasets)
    for (Format f : cfg.formats) ids.push_back(dataset_id(concept_id, f));
  return ids;
}

std::vector<std::string> primary_concepts(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& [concept_id, p] : cfg.datasets)
    if (concept_id != "translation") out.push_back(concept_id);
  return out;
}

struct Context {
  const ExperimentConfig& cfg;
  const RunOptions& opts;
  std::string hash;
  std::optional<Model> model;
  std::vector<ConceptPairs> pairs;  // sorted by concept id
  TranslationTable table;

  fs::path dir(Stage s) const { return run_dir(cfg) / to_string(s); }
  void log(const std::string& s) const {
    if (opts.log) opts.log(s);
  }
};

struct PromptRow {
  std::string prompt_id;
  std::string text;
  std::string gold;
  std::string concept_id;
  Format format = Format::OE_EN;
  std::string competitor;
  std::string zero_shot_text;
};

std::vector<PromptRow> read_prompts(const fs::path& path) {
  std::vector<PromptRow> rows;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    PromptRow r;
    r.prompt_id = j.at("prompt_id");
    r.text = j.at("text");
    r.gold = j.at("gold");
    const json& m = j.at("metadata");
    r.concept_id = m.at("concept_id");
    r.format = parse_format(m.at("format"));
    r.competitor = m.value("competitor", "");
    r.zero_shot_text = m.value("zero_shot_text", "");
    rows.push_back(std::move(r));
  }
  return rows;
}

json prompt_json(const PromptSpec& s, const std::string& text, bool corrupted) {
  json demos = json::array();
  for (const auto& d : s.demos) demos.push_back({{"input", d.input}, {"output", d.output}});
  json meta = {{"concept_id", s.concept_id}, {"format", to_string(s.format)}, {"corrupted", corrupted},
               {"demos", demos},           {"query", s.query.input}};
  if (s.format == Format::MC) {
    meta["options"] = s.query.options;
    meta["answer_index"] = s.query.answer_index;
  }
  return {{"prompt_id", s.prompt_id}, {"text", text}, {"gold", s.gold()}, {"metadata", meta}};
}

void require_upstream(const Context& ctx, Stage s) {
  for (Stage u : upstream(s))
    if (!fs::exists(ctx.dir(u) / "manifest.json"))
      throw Error("stage '" + to_string(s) + "' needs the '" + to_string(u) + "' artifacts in " +
                  ctx.dir(u).string() + "; run `headlens " + to_string(u) + "` first");
}

// --- capture --------------------------------------------------------------

void stage_capture(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  std::vector<ConceptPairs> localized;
  for (const auto& cp : ctx.pairs) localized.push_back(localize_pairs(cp, ctx.table));
  json datasets = json::array();
  const Tokenizer& tok = ctx.model->tokenizer();
  for (std::size_t c = 0; c < ctx.pairs.size(); ++c) {
    const auto& cp = ctx.pairs[c];
    for (Format f : cfg.formats) {
      const std::string id = dataset_id(cp.concept_id, f);
      const ConceptPairs& src = f == Format::OE_L2 ? localized[c] : cp;
      const auto pool = distractor_pool(f == Format::OE_L2 ? localized : ctx.pairs, cp.concept_id);
      auto specs = build_dataset(src, f, cfg.n_prompts, cfg.shots.at(f), child_seed(cfg.seed, "capture/" + id));
      std::vector<ActivationRecord> records(specs.size());
      std::vector<std::string> clean_lines(specs.size()), corrupt_lines(specs.size());
      std::map<std::pair<std::string, std::string>, int> pair_use;
      for (const auto& s : specs)
        for (const auto& d : s.demos) ++pair_use[{d.input, d.output}];
      for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        const std::string text = render_prompt(s);
        const auto tokens = tok.encode(text);
        gold_token(tok, s.gold());
        auto r = ctx.model->forward(tokens, {.capture_heads = true});
        const auto& rec = *r.record;
        records[i] = ActivationRecord(s.prompt_id, rec.n_layers(), rec.n_heads(), rec.d_model(),
                                      std::vector<float>(rec.all_heads().begin(), rec.all_heads().end()));
        const PromptSpec bad = corrupt_prompt(s, pool, child_seed(cfg.seed, "corrupt/" + s.prompt_id));
        clean_lines[i] = prompt_json(s, text, false).dump();
        corrupt_lines[i] = prompt_json(bad, render_prompt(bad), true).dump();
      }
      std::string clean, corrupt;
      for (std::size_t i = 0; i < specs.size(); ++i) {
        clean += clean_lines[i] + "\n";
        corrupt += corrupt_lines[i] + "\n";
      }
      const std::string key = file_key(id);
      w.write("prompts/" + key + ".jsonl", clean);
      w.write("corrupted/" + key + ".jsonl", corrupt);
      w.write_records("records/" + key, records);
      int reused = 0;
      for (const auto& [p, n] : pair_use) reused += n > 1;
      datasets.push_back({{"dataset_id", id},
                          {"n_prompts", specs.size()},
                          {"shots", cfg.shots.at(f)},
                          {"available_pairs", src.pairs.size()},
                          {"pairs_reused_across_prompts", reused}});
      ctx.log("  captured " + id);
    }
  }
  // Ambiguous prompts: primary concept demonstrations interleaved with translation.
  const ConceptPairs* translation = nullptr;
  for (const auto& cp : ctx.pairs)
    if (cp.concept_id == "translation") translation = &cp;
  for (const auto& cp : ctx.pairs) {
    if (cp.concept_id == "translation") continue;
    const auto specs = build_ambiguous_dataset(cp, *translation, ctx.table, cfg.ambiguous_prompts,
                                               child_seed(cfg.seed, "ambiguous/" + cp.concept_id));
    std::string lines;
    for (const auto& s : specs) {
      const PromptSpec p = s.as_prompt();
      json j = prompt_json(p, render_prompt(p), false);
      j["gold"] = s.gold;
      j["metadata"]["competitor"] = s.competitor;
      j["metadata"]["secondary_concept_id"] = s.secondary_concept_id;
      j["metadata"]["zero_shot_text"] = render_prompt(zero_shot(s));
      lines += j.dump() + "\n";
    }
    w.write("ambiguous/" + cp.concept_id + ".jsonl", lines);
  }
  json filters = json::object();
  for (const auto& cp : ctx.pairs)
    filters[cp.concept_id] = {{"total", cp.report.total},
                              {"dropped_underscore_or_digit", cp.report.dropped_underscore_or_digit},
                              {"dropped_spaces", cp.report.dropped_spaces},
                              {"dropped_duplicate", cp.report.dropped_duplicate},
                              {"lowercased", cp.report.lowercased},
                              {"kept", cp.report.kept()}};
  w.write("datasets.json", json({{"datasets", datasets}, {"filters", filters}}).dump(1) + "\n");
}

std::map<std::string, std::vector<ActivationRecord>> load_all_records(const Context& ctx) {
  std::map<std::string, std::vector<ActivationRecord>> out;
  for (const auto& id : dataset_ids(ctx.cfg)) out[id] = load_records(ctx.dir(Stage::capture) / "records" / file_key(id));
  return out;
}

std::vector<CorruptedPrompt> load_corrupted(const Context& ctx, const std::string& id) {
  std::vector<CorruptedPrompt> out;
  const Tokenizer& tok = ctx.model->tokenizer();
  for (const auto& r : read_prompts(ctx.dir(Stage::capture) / "corrupted" / (file_key(id) + ".jsonl")))
    out.push_back({r.prompt_id, tok.encode(r.text), gold_token(tok, r.gold)});
  return out;
}

/// All records concept-major, then format, then prompt id, with metadata.
void flatten(const ExperimentConfig& cfg, const std::map<std::string, std::vector<ActivationRecord>>& by_ds,
             std::vector<ActivationRecord>& records, std::vector<PromptMeta>& meta) {
  for (const auto& [concept_id, p] : cfg.datasets)
    for (Format f : cfg.formats) {
      auto rs = by_ds.at(dataset_id(concept_id, f));
      std::sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) { return a.prompt_id() < b.prompt_id(); });
      for (auto& r : rs) {
        meta.push_back({r.prompt_id(), concept_id, f});
        records.push_back(std::move(r));
      }
    }
}

void write_table(StageWriter& w, const std::string& stem, const ScoreTable& t) {
  w.write(stem + ".csv", t.to_csv());
  w.write(stem + ".json", t.to_json());
}

std::string layer_means_csv(const ScoreTable& t) {
  std::string s = "layer,mean_score\n";
  const auto m = t.layer_means();
  for (std::size_t l = 0; l < m.size(); ++l) s += std::to_string(l) + "," + format_double(m[l]) + "\n";
  return s;
}

// --- aie --------------------------------------------------------------------

void stage_aie(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  const auto by_ds = load_all_records(ctx);
  std::vector<DatasetRecords> dr;
  for (const auto& [id, recs] : by_ds) dr.push_back({id, recs});
  const auto cache = MeanActivationCache::build(ctx.model->config(), dr);
  std::vector<PatchingDataset> pds;
  std::map<std::string, std::vector<CorruptedPrompt>> corrupted;
  for (const auto& id : dataset_ids(cfg)) {
    corrupted[id] = load_corrupted(ctx, id);
    pds.push_back({id, id, corrupted[id]});
  }
  const std::set<std::string> exclude(cfg.exclude_datasets.begin(), cfg.exclude_datasets.end());
  const auto res = aie(*ctx.model, pds, cache, exclude, ctx.opts.jobs);
  write_table(w, "aie", res.overall);
  w.write("aie_histogram.csv", histogram_csv(res.overall.histogram(cfg.histogram_bins)));
  w.write("aie_layer_means.csv", layer_means_csv(res.overall));
  for (const auto& [id, t] : res.per_dataset) write_table(w, "per_dataset/" + file_key(id), t);
  ctx.log("  AIE done");

  std::string top = "source,target,rank,layer,head,score\n";
  for (Format s : cfg.formats)
    for (Format t : cfg.formats) {
      if (s == t) continue;
      const auto x = cross_format_aie(*ctx.model, s, t, corrupted, cache, exclude, ctx.opts.jobs);
      write_table(w, "cross_format/" + to_string(s) + "_to_" + to_string(t), x.table);
      const auto ranked = x.table.top_k(std::min(5, x.table.size()));
      for (std::size_t r = 0; r < ranked.size(); ++r)
        top += to_string(s) + "," + to_string(t) + "," + std::to_string(r + 1) + "," +
               std::to_string(ranked[r].layer) + "," + std::to_string(ranked[r].head) + "," +
               format_double(x.table.get(ranked[r]).value_or(NAN)) + "\n";
      ctx.log("  cross-format " + to_string(s) + " -> " + to_string(t));
    }
  w.write("cross_format_top5.csv", top);
  w.provenance()["excluded_datasets"] = res.excluded;
  w.provenance()["datasets"] = dataset_ids(cfg);
}

// --- rsa --------------------------------------------------------------------

void stage_rsa(Context& ctx, StageWriter& w) {
  std::vector<ActivationRecord> records;
  std::vector<PromptMeta> meta;
  flatten(ctx.cfg, load_all_records(ctx), records, meta);
  const auto t = concept_rsa_all_heads(records, meta, ctx.opts.jobs);
  write_table(w, "concept_rsa", t.concept_rsa);
  write_table(w, "question_type_rsa", t.question_type_rsa);
  w.write("concept_rsa_histogram.csv", histogram_csv(t.concept_rsa.histogram(ctx.cfg.histogram_bins)));
  w.write("concept_rsa_layer_means.csv", layer_means_csv(t.concept_rsa));
  std::vector<std::string> labels;
  for (const auto& m : meta) labels.push_back(m.prompt_id);
  w.write("design/concept.csv", build_design_matrix(meta, Attribute::by_concept).to_csv(labels));
  w.write("design/question_type.csv", build_design_matrix(meta, Attribute::by_question_type).to_csv(labels));
  w.provenance()["n_prompts"] = records.size();
}

// --- select -----------------------------------------------------------------

ScoreTable read_table(const fs::path& p) { return ScoreTable::from_json(read_file(p)); }

void stage_select(Context& ctx, StageWriter& w) {
  const auto aie_t = read_table(ctx.dir(Stage::aie) / "aie.json");
  const auto rsa_t = read_table(ctx.dir(Stage::rsa) / "concept_rsa.json");
  json sel = json::array();
  std::vector<OverlapResult> rows;
  auto heads_json = [](const std::vector<HeadLocator>& hs) {
    json a = json::array();
    for (const auto& h : hs) a.push_back({h.layer, h.head});
    return a;
  };
  for (int k : ctx.cfg.k_grid) {
    const auto fv = select_heads(aie_t, Method::FV, k);
    const auto cv = select_heads(rsa_t, Method::CV, k);
    sel.push_back({{"k", k}, {"FV", heads_json(fv.heads)}, {"CV", heads_json(cv.heads)}});
    rows.push_back(head_overlap(fv, cv, aie_t.size()));
  }
  w.write("selections.json", json({{"selections", sel}}).dump(1) + "\n");
  w.write("overlap.csv", overlap_csv(rows));
}

HeadSelection read_selection(const Context& ctx, Method m, int k) {
  const json j = json::parse(read_file(ctx.dir(Stage::select) / "selections.json"));
  for (const auto& s : j.at("selections"))
    if (s.at("k") == k) {
      HeadSelection h{m, k, {}};
      for (const auto& p : s.at(to_string(m))) h.heads.push_back({p[0].get<int>(), p[1].get<int>()});
      return h;
    }
  throw Error("no selection for K=" + std::to_string(k) + "; rerun `headlens select`");
}

// --- vectors ----------------------------------------------------------------

std::string vector_key(Method m, int k) { return to_string(m) + "_K" + std::to_string(k); }

void stage_vectors(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  const auto by_ds = load_all_records(ctx);
  std::string sim_summary = "method,k,within_concept_cross_format,within_format_cross_concept\n";
  for (Method m : {Method::FV, Method::CV})
    for (int k : cfg.k_grid) {
      const auto sel = read_selection(ctx, m, k);
      std::vector<std::vector<float>> vs;
      std::vector<PromptMeta> labels;
      for (const auto& [concept_id, p] : cfg.datasets)
        for (Format f : cfg.formats) {
          const auto v = steering_vector(by_ds.at(dataset_id(concept_id, f)), sel, concept_id, f);
          const std::string stem = "vectors/" + vector_key(m, k) + "/" + file_key(dataset_id(concept_id, f));
          w.write(stem + ".f32", std::string(reinterpret_cast<const char*>(v.values.data()),
                                             v.values.size() * sizeof(float)));
          w.write(stem + ".json", v.provenance_json() + "\n");
          vs.push_back(v.values);
          labels.push_back({dataset_id(concept_id, f), concept_id, f});
        }
      const auto rep = vector_similarity_report(vs, labels);
      std::vector<std::string> names;
      for (const auto& l : labels) names.push_back(l.prompt_id);
      w.write("similarity/" + vector_key(m, k) + ".csv", rep.matrix.to_csv(names));
      sim_summary += to_string(m) + "," + std::to_string(k) + "," + format_double(rep.within_concept_cross_format) +
                     "," + format_double(rep.within_format_cross_concept) + "\n";
    }
  w.write("similarity_summary.csv", sim_summary);

  // Summed-vector RSA of each ranking at every K.
  std::vector<ActivationRecord> records;
  std::vector<PromptMeta> meta;
  flatten(cfg, by_ds, records, meta);
  const auto aie_t = read_table(ctx.dir(Stage::aie) / "aie.json");
  const auto rsa_t = read_table(ctx.dir(Stage::rsa) / "concept_rsa.json");
  const auto rows = compare_vector_rsa(records, meta, aie_t, rsa_t, cfg.k_grid);
  std::string csv = "method,k,concept_rsa,question_type_rsa,within_question_type,across_question_type\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  std::vector<std::string> ids;
  for (const auto& m : meta) ids.push_back(m.prompt_id);
  for (const auto& r : rows) {
    csv += r.method + "," + std::to_string(r.k) + "," + opt(r.concept_rsa) + "," + opt(r.question_type_rsa) + "," +
           format_double(r.within_question_type) + "," + format_double(r.across_question_type) + "\n";
    w.write("rsm/" + r.method + "_K" + std::to_string(r.k) + ".csv", r.rsm.to_csv(ids));
  }
  w.write("vector_rsa.csv", csv);
}

SteeringVector read_vector(const Context& ctx, Method m, int k, const std::string& concept_id, Format f) {
  const std::string stem = "vectors/" + vector_key(m, k) + "/" + file_key(dataset_id(concept_id, f));
  const std::string blob = read_file(ctx.dir(Stage::vectors) / (stem + ".f32"));
  const json prov = json::parse(read_file(ctx.dir(Stage::vectors) / (stem + ".json")));
  SteeringVector v;
  v.values.resize(blob.size() / sizeof(float));
  std::memcpy(v.values.data(), blob.data(), v.values.size() * sizeof(float));
  v.method = m;
  v.k = k;
  v.concept_id = concept_id;
  v.format = f;
  v.n_prompts = prov.at("n_prompts");
  for (const auto& h : prov.at("heads")) v.heads.push_back({h[0].get<int>(), h[1].get<int>()});
  return v;
}

// --- steer ------------------------------------------------------------------

json outcome_json(const InterventionOutcome& o) {
  auto deltas = [](const std::vector<TokenDelta>& ds) {
    json a = json::array();
    for (const auto& d : ds) a.push_back({{"token", d.token}, {"text", d.text}, {"delta", d.delta}});
    return a;
  };
  json j = {{"prompt_id", o.prompt_id},   {"layer", o.layer},       {"alpha", o.alpha},
            {"vector", o.vector_label},   {"p_before", o.p_before}, {"p_after", o.p_after},
            {"delta_p", o.delta_p},       {"top1_correct", o.top1_correct},
            {"marker_deltas", deltas(o.marker_deltas)}, {"top_deltas", deltas(o.top_deltas)},
            {"delta_sum", o.delta_sum}};
  j["competitor_delta"] = o.competitor_delta ? json(*o.competitor_delta) : json(nullptr);
  return j;
}

std::string summary_rows(const std::string& concept_id, Method m, Format f,
                         const std::vector<InterventionOutcome>& outcomes) {
  std::string s;
  for (const auto& l : summarize_by_layer(outcomes))
    s += concept_id + "," + to_string(m) + "," + to_string(f) + "," + std::to_string(l.layer) + "," +
         format_double(l.mean_delta_p) + "," + format_double(l.top1_accuracy) + "\n";
  return s;
}

void stage_steer(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  const Tokenizer& tok = ctx.model->tokenizer();
  SweepOptions opts;
  opts.jobs = ctx.opts.jobs;
  std::set<int> markers;
  for (const auto& [f, ms] : cfg.format_markers)
    for (const auto& m : ms) markers.insert(tok.first_token(m));
  opts.markers.assign(markers.begin(), markers.end());

  auto load_prompts = [&](const std::string& concept_id, bool zero) {
    std::vector<SteerPrompt> out;
    for (const auto& r : read_prompts(ctx.dir(Stage::capture) / "ambiguous" / (concept_id + ".jsonl")))
      out.push_back({r.prompt_id, tok.encode(zero ? r.zero_shot_text : r.text), gold_token(tok, r.gold),
                     r.competitor.empty() ? std::nullopt : std::optional<int>(gold_token(tok, r.competitor))});
    return out;
  };

  // Search on the antonym prompts, or the first primary concept when absent.
  const auto primaries = primary_concepts(cfg);
  const std::string search_concept =
      cfg.datasets.count("antonym") ? std::string("antonym") : primaries.front();
  const auto search_prompts = load_prompts(search_concept, false);
  const auto result = hyperparameter_search(cfg.k_grid, cfg.alpha_grid, [&](int k, double alpha) {
    double total = 0.0;
    int n = 0;
    for (Method m : {Method::FV, Method::CV})
      for (Format f : cfg.formats) {
        const auto v = read_vector(ctx, m, k, search_concept, f);
        total += max_layer_effect(steer_sweep(*ctx.model, search_prompts, v, cfg.layers, alpha, opts));
        ++n;
      }
    return total / n;
  });
  std::string grid = "k,alpha,effect\n";
  for (const auto& c : result.grid)
    grid += std::to_string(c.k) + "," + format_double(c.alpha) + "," + format_double(c.effect) + "\n";
  w.write("search_grid.csv", grid);
  w.write("best.json", json({{"concept_id", search_concept},
                             {"k", result.best_k},
                             {"alpha", result.best_alpha},
                             {"effect", result.best_effect}})
                               .dump(1) +
                           "\n");
  ctx.log("  search: K=" + std::to_string(result.best_k) + " alpha=" + format_double(result.best_alpha));

  const int k = result.best_k;
  const double alpha = result.best_alpha;
  const std::string header = "concept,method,format,layer,mean_delta_p,top1_acc\n";
  std::string summary = header, zsummary = header;
  std::string kl = "concept,method,id_format,ood_format,mean_kl,layers,fewer_layers\n";
  for (const auto& concept_id : primaries) {
    const auto prompts = load_prompts(concept_id, false);
    const auto zprompts = load_prompts(concept_id, true);
    for (Method m : {Method::FV, Method::CV}) {
      std::map<Format, SteeringVector> vecs;
      std::vector<InterventionOutcome> id_outcomes;
      for (Format f : cfg.formats) {
        vecs.emplace(f, read_vector(ctx, m, k, concept_id, f));
        const auto outs = steer_sweep(*ctx.model, prompts, vecs.at(f), cfg.layers, alpha, opts);
        const auto zouts = zero_shot_sweep(*ctx.model, zprompts, vecs.at(f), cfg.layers, alpha, opts);
        const std::string stem = to_string(m) + "/" + concept_id + "__" + to_string(f) + ".jsonl";
        std::string lines, zlines;
        for (const auto& o : outs) lines += outcome_json(o).dump() + "\n";
        for (const auto& o : zouts) zlines += outcome_json(o).dump() + "\n";
        w.write("outcomes/" + stem, lines);
        w.write("zero_shot/" + stem, zlines);
        summary += summary_rows(concept_id, m, f, outs);
        zsummary += summary_rows(concept_id, m, f, zouts);
        if (f == Format::OE_EN) id_outcomes = outs;
      }
      for (Format f : cfg.formats) {
        if (f == Format::OE_EN) continue;
        const auto c = kl_consistency(*ctx.model, prompts, vecs.at(Format::OE_EN), vecs.at(f), id_outcomes, alpha,
                                      ctx.opts.jobs);
        std::string layers;
        for (std::size_t i = 0; i < c.layers.size(); ++i) layers += (i ? ";" : "") + std::to_string(c.layers[i]);
        kl += concept_id + "," + to_string(m) + "," + to_string(c.id_format) + "," + to_string(c.ood_format) + "," +
              format_double(c.mean_kl) + "," + layers + "," + (c.fewer_layers ? "true" : "false") + "\n";
      }
    }
    ctx.log("  steered " + concept_id);
  }
  w.write("summary.csv", summary);
  w.write("zero_shot_summary.csv", zsummary);
  w.write("kl_summary.csv", kl);
  w.provenance()["k"] = k;
  w.provenance()["alpha"] = alpha;
  w.provenance()["markers"] = opts.markers;
}

// --- report -----------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& p) {
  CsvTable t;
  std::istringstream in(read_file(p));
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (first) t.header = cells, first = false;
    else t.rows.push_back(cells);
  }
  return t;
}

Heatmap head_heatmap(const ScoreTable& t, const std::string& title, double lo, double hi) {
  Heatmap h;
  h.title = title;
  h.lo = lo;
  h.hi = hi;
  for (int l = 0; l < t.n_layers(); ++l) h.row_labels.push_back("L" + std::to_string(l));
  for (int k = 0; k < t.n_heads(); ++k) h.col_labels.push_back("H" + std::to_string(k));
  for (int l = 0; l < t.n_layers(); ++l)
    for (int k = 0; k < t.n_heads(); ++k) h.values.push_back(t.get({l, k}).value_or(NAN));
  return h;
}

void stage_report(Context& ctx, StageWriter& w) {
  const auto& cfg = ctx.cfg;
  w.write("overlap.csv", read_file(ctx.dir(Stage::select) / "overlap.csv"));
  const auto aie_t = read_table(ctx.dir(Stage::aie) / "aie.json");
  const auto rsa_t = read_table(ctx.dir(Stage::rsa) / "concept_rsa.json");
  double amax = 0.0;
  for (const auto& v : aie_t.values())
    if (v) amax = std::max(amax, std::abs(*v));
  w.write("heatmaps/aie_heads.svg", svg_heatmap(head_heatmap(aie_t, "AIE per head", -amax, amax)));
  w.write("heatmaps/concept_rsa_heads.svg", svg_heatmap(head_heatmap(rsa_t, "Concept-RSA per head", -1, 1)));

  const json best = json::parse(read_file(ctx.dir(Stage::steer) / "best.json"));
  const int k = best.at("k");
  for (Method m : {Method::FV, Method::CV}) {
    const auto t = read_csv(ctx.dir(Stage::vectors) / "similarity" / (vector_key(m, k) + ".csv"));
    Heatmap h;
    h.title = to_string(m) + " steering-vector cosine similarity, K=" + std::to_string(k);
    for (std::size_t c = 1; c < t.header.size(); ++c) h.col_labels.push_back(t.header[c]);
    for (const auto& row : t.rows) {
      h.row_labels.push_back(row[0]);
      for (std::size_t c = 1; c < row.size(); ++c) h.values.push_back(std::stod(row[c]));
    }
    w.write("heatmaps/similarity_" + vector_key(m, k) + ".svg", svg_heatmap(h));
  }

  // Layer curves: mean over concepts of the per-layer mean ΔP.
  std::string curves = "method,format,layer,mean_delta_p,zero_shot_mean_delta_p\n";
  const auto steer_t = read_csv(ctx.dir(Stage::steer) / "summary.csv");
  const auto zero_t = read_csv(ctx.dir(Stage::steer) / "zero_shot_summary.csv");
  auto collect = [](const CsvTable& t) {
    std::map<std::tuple<std::string, std::string, int>, std::pair<double, int>> acc;
    for (const auto& r : t.rows) {
      auto& a = acc[{r[1], r[2], std::stoi(r[3])}];
      a.first += std::stod(r[4]);
      a.second += 1;
    }
    return acc;
  };
  const auto acc = collect(steer_t), zacc = collect(zero_t);
  std::map<std::string, LineChart> charts;
  for (const auto& [key, v] : acc) {
    const auto& [method, format, layer] = key;
    const double mean = v.first / v.second;
    const auto z = zacc.find(key);
    const double zmean = z == zacc.end() ? NAN : z->second.first / z->second.second;
    curves += method + "," + format + "," + std::to_string(layer) + "," + format_double(mean) + "," +
              format_double(zmean) + "\n";
    auto& chart = charts[method];
    chart.title = method + " steering on ambiguous prompts (K=" + std::to_string(k) + ")";
    chart.x_label = "layer";
    chart.y_label = "mean delta P";
    auto it = std::find_if(chart.series.begin(), chart.series.end(), [&](const Series& s) { return s.name == format; });
    if (it == chart.series.end()) {
      chart.series.push_back({format, {}, {}});
      it = std::prev(chart.series.end());
    }
    it->x.push_back(layer);
    it->y.push_back(mean);
  }
  w.write("layer_curves.csv", curves);
  for (const auto& [method, chart] : charts) w.write("layer_curves_" + method + ".svg", svg_line_chart(chart));

  json summary;
  summary["config_hash"] = ctx.hash;
  json top = json::array();
  for (const auto& h : aie_t.top_k(std::min(5, aie_t.size()))) top.push_back(h.str());
  summary["top_aie_heads"] = top;
  json topc = json::array();
  for (const auto& h : rsa_t.top_k(std::min(5, rsa_t.size()))) topc.push_back(h.str());
  summary["top_concept_rsa_heads"] = topc;
  summary["best"] = best;
  summary["formats"] = cfg.to_json()["formats"];
  w.write("summary.json", summary.dump(1) + "\n");
}

std::string stage_inputs_digest(const Context& ctx, Stage s) {
  std::uint64_t h = fnv1a64(ctx.hash);
  h = fnv1a64(to_string(s), h);
  for (Stage u : upstream(s)) h = fnv1a64(outputs_digest(read_manifest(ctx.dir(u))), h);
  return hex64(h);
}

std::vector<ConceptPairs> load_pairs(const ExperimentConfig& cfg) {
  std::vector<ConceptPairs> out;
  for (const auto& [concept_id, p] : cfg.datasets) out.push_back(load_concept_pairs(cfg.resolve(p)));
  return out;
}

}  // namespace

bool run_stage(const ExperimentConfig& cfg, Stage stage, const RunOptions& options) {
  Context ctx{cfg, options, config_hash(cfg), {}, {}, {}};
  require_upstream(ctx, stage);
  const std::string digest = stage_inputs_digest(ctx, stage);
  if (!options.force && manifest_intact(ctx.dir(stage), digest)) {
    ctx.log(to_string(stage) + ": cached (" + ctx.dir(stage).string() + ")");
    return false;
  }
  ctx.log(to_string(stage) + ": running");
  if (stage != Stage::select && stage != Stage::report) ctx.model.emplace(Model::load(cfg.resolve(cfg.model)));
  ctx.pairs = load_pairs(cfg);
  ctx.table = load_translation_table(cfg.resolve(cfg.translation_table));
  StageWriter w(ctx.dir(stage));
  switch (stage) {
    case Stage::capture: stage_capture(ctx, w); break;
    case Stage::aie: stage_aie(ctx, w); break;
    case Stage::rsa: stage_rsa(ctx, w); break;
    case Stage::select: stage_select(ctx, w); break;
    case Stage::vectors: stage_vectors(ctx, w); break;
    case Stage::steer: stage_steer(ctx, w); break;
    case Stage::report: stage_report(ctx, w); break;
  }
  w.provenance()["config"] = [&] {
    json c = cfg.to_json();
    c.erase("output_dir");
    return c;
  }();
  w.commit(stage, ctx.hash, digest);
  ctx.log(to_string(stage) + ": wrote " + ctx.dir(stage).string());
  return true;
}

void run_pipeline(const ExperimentConfig& cfg, const RunOptions& options) {
  for (Stage s : kStages) run_stage(cfg, s, options);
}

}  // namespace headlens
