#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "headlens/runtime.hpp"
#include "headlens/scores.hpp"
#include "headlens/tasks.hpp"

namespace headlens {

/// Clean-run captures of one (concept, format) dataset.
struct DatasetRecords {
  std::string dataset_id;
  std::vector<ActivationRecord> records;
};

/// Per dataset and head, the mean last-token output over the dataset's clean
/// prompts. Immutable once built.
class MeanActivationCache {
 public:
  MeanActivationCache() = default;
  static MeanActivationCache build(const ModelConfig& cfg, const std::vector<DatasetRecords>& datasets);

  bool contains(const std::string& dataset_id) const { return entries_.count(dataset_id) > 0; }
  std::span<const float> mean(const std::string& dataset_id, HeadLocator h) const;
  std::size_t count(const std::string& dataset_id) const;
  std::vector<std::string> dataset_ids() const;

 private:
  struct Entry {
    std::size_t count = 0;
    std::vector<float> means;  // [layer][head][d_model]
  };
  ModelConfig cfg_;
  std::map<std::string, Entry> entries_;
};

/// Tokenized corrupted prompt plus the token whose probability is measured.
struct CorruptedPrompt {
  std::string prompt_id;
  std::vector<int> tokens;
  int gold = -1;
};

/// Corrupted prompts scored against the clean means of `mean_source`
/// (the dataset itself, or another format's dataset for cross-format mode).
struct PatchingDataset {
  std::string dataset_id;
  std::string mean_source;
  std::vector<CorruptedPrompt> prompts;
};

/// f(p~ | head := mean)[gold] - f(p~)[gold].
double cie(const Model& model, const CorruptedPrompt& prompt, HeadLocator head,
           std::span<const float> mean);

/// CIE of every head on one prompt, flat [layer * n_heads + head]. The prefix
/// is computed once and each head re-evaluates only the final position.
std::vector<double> cie_all_heads(const Model& model, const CorruptedPrompt& prompt,
                                  const MeanActivationCache& cache, const std::string& mean_source);

struct AieResult {
  ScoreTable overall;
  std::map<std::string, ScoreTable> per_dataset;
  std::vector<std::string> excluded;
};

/// Mean CIE over prompts within each dataset, then the unweighted mean over
/// datasets (visited in sorted id order, so input order does not matter).
AieResult aie(const Model& model, const std::vector<PatchingDataset>& datasets,
              const MeanActivationCache& cache, const std::set<std::string>& exclude = {},
              int jobs = 1);

struct CrossFormatResult {
  Format source = Format::OE_EN;
  Format target = Format::OE_EN;
  ScoreTable table;
};

/// AIE when each concept's corrupted `target`-format prompts are patched with
/// the clean means of the same concept's `source`-format dataset.
/// `corrupted` is keyed by dataset id.
CrossFormatResult cross_format_aie(const Model& model, Format source, Format target,
                                   const std::map<std::string, std::vector<CorruptedPrompt>>& corrupted,
                                   const MeanActivationCache& cache,
                                   const std::set<std::string>& exclude = {}, int jobs = 1);

}  // namespace headlens
