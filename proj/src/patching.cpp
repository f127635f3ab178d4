#include "headlens/patching.hpp"

#include <algorithm>
#include <numeric>

#include "headlens/parallel.hpp"

namespace headlens {

MeanActivationCache MeanActivationCache::build(const ModelConfig& cfg,
                                               const std::vector<DatasetRecords>& datasets) {
  MeanActivationCache cache;
  cache.cfg_ = cfg;
  const std::size_t width = static_cast<std::size_t>(cfg.total_heads()) * cfg.d_model;
  for (const auto& ds : datasets) {
    if (ds.records.empty()) throw Error("mean cache: dataset '" + ds.dataset_id + "' is empty");
    if (cache.entries_.count(ds.dataset_id))
      throw Error("mean cache: dataset '" + ds.dataset_id + "' given twice");
    // Summing in prompt-id order makes the mean independent of input order.
    std::vector<std::size_t> order(ds.records.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return ds.records[a].prompt_id() < ds.records[b].prompt_id();
    });
    std::vector<double> sum(width, 0.0);
    for (std::size_t i : order) {
      const auto& r = ds.records[i];
      if (r.n_layers() != cfg.n_layers || r.n_heads() != cfg.n_heads || r.d_model() != cfg.d_model)
        throw Error("mean cache: record '" + r.prompt_id() + "' does not match the model shape");
      auto v = r.all_heads();
      for (std::size_t k = 0; k < width; ++k) sum[k] += v[k];
    }
    Entry e;
    e.count = ds.records.size();
    e.means.resize(width);
    for (std::size_t k = 0; k < width; ++k) e.means[k] = static_cast<float>(sum[k] / e.count);
    cache.entries_.emplace(ds.dataset_id, std::move(e));
  }
  return cache;
}

std::span<const float> MeanActivationCache::mean(const std::string& dataset_id, HeadLocator h) const {
  auto it = entries_.find(dataset_id);
  if (it == entries_.end()) throw Error("mean cache has no dataset '" + dataset_id + "'");
  check_head(cfg_, h);
  const std::size_t d = cfg_.d_model;
  return std::span<const float>(it->second.means).subspan(head_index(cfg_, h) * d, d);
}

std::size_t MeanActivationCache::count(const std::string& dataset_id) const {
  auto it = entries_.find(dataset_id);
  if (it == entries_.end()) throw Error("mean cache has no dataset '" + dataset_id + "'");
  return it->second.count;
}

std::vector<std::string> MeanActivationCache::dataset_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, e] : entries_) ids.push_back(id);
  return ids;
}

namespace {

void check_gold(const Model& model, const CorruptedPrompt& p) {
  if (p.gold < 0 || p.gold >= model.config().vocab_size)
    throw Error("prompt '" + p.prompt_id + "': gold token is absent from the vocabulary");
}

}  // namespace

double cie(const Model& model, const CorruptedPrompt& prompt, HeadLocator head,
           std::span<const float> mean) {
  check_gold(model, prompt);
  const Trace tr = model.trace(prompt.tokens, false);
  HookSet hooks;
  hooks.patches.push_back({head, std::vector<float>(mean.begin(), mean.end())});
  const ForwardResult patched = model.resume(tr, hooks);
  return static_cast<double>(patched.probs[prompt.gold]) -
         static_cast<double>(tr.base().probs[prompt.gold]);
}

std::vector<double> cie_all_heads(const Model& model, const CorruptedPrompt& prompt,
                                  const MeanActivationCache& cache, const std::string& mean_source) {
  check_gold(model, prompt);
  const auto& cfg = model.config();
  const Trace tr = model.trace(prompt.tokens, false);
  const double before = tr.base().probs[prompt.gold];
  std::vector<double> out(cfg.total_heads());
  HookSet hooks;
  hooks.patches.resize(1);
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int j = 0; j < cfg.n_heads; ++j) {
      const HeadLocator h{l, j};
      auto m = cache.mean(mean_source, h);
      hooks.patches[0] = {h, std::vector<float>(m.begin(), m.end())};
      out[head_index(cfg, h)] = model.resume(tr, hooks).probs[prompt.gold] - before;
    }
  return out;
}

AieResult aie(const Model& model, const std::vector<PatchingDataset>& datasets,
              const MeanActivationCache& cache, const std::set<std::string>& exclude, int jobs) {
  const auto& cfg = model.config();
  std::vector<const PatchingDataset*> used;
  AieResult result;
  for (const auto& ds : datasets) {
    if (exclude.count(ds.dataset_id)) {
      result.excluded.push_back(ds.dataset_id);
      continue;
    }
    if (ds.prompts.empty()) throw Error("aie: dataset '" + ds.dataset_id + "' has no corrupted prompts");
    if (!cache.contains(ds.mean_source))
      throw Error("aie: no clean means for '" + ds.mean_source + "'");
    used.push_back(&ds);
  }
  std::sort(used.begin(), used.end(),
            [](auto* a, auto* b) { return a->dataset_id < b->dataset_id; });
  for (std::size_t i = 1; i < used.size(); ++i)
    if (used[i]->dataset_id == used[i - 1]->dataset_id)
      throw Error("aie: dataset '" + used[i]->dataset_id + "' given twice");
  std::sort(result.excluded.begin(), result.excluded.end());
  if (used.empty()) throw Error("aie: every dataset is excluded");

  struct Job {
    const PatchingDataset* ds;
    const CorruptedPrompt* prompt;
  };
  std::vector<Job> work;
  for (auto* ds : used)
    for (const auto& p : ds->prompts) work.push_back({ds, &p});
  std::vector<std::vector<double>> cies(work.size());
  parallel_for(work.size(), jobs, [&](std::size_t i) {
    cies[i] = cie_all_heads(model, *work[i].prompt, cache, work[i].ds->mean_source);
  });

  const std::size_t n_heads = cfg.total_heads();
  std::vector<double> total(n_heads, 0.0);
  std::size_t w = 0;
  for (auto* ds : used) {
    std::vector<double> sum(n_heads, 0.0);
    for (std::size_t p = 0; p < ds->prompts.size(); ++p, ++w)
      for (std::size_t k = 0; k < n_heads; ++k) sum[k] += cies[w][k];
    ScoreTable t(cfg.n_layers, cfg.n_heads, Metric::AIE, ds->dataset_id);
    for (int l = 0; l < cfg.n_layers; ++l)
      for (int j = 0; j < cfg.n_heads; ++j) {
        const double mean = sum[head_index(cfg, {l, j})] / ds->prompts.size();
        t.set({l, j}, mean);
        total[head_index(cfg, {l, j})] += mean;
      }
    result.per_dataset.emplace(ds->dataset_id, std::move(t));
  }
  result.overall = ScoreTable(cfg.n_layers, cfg.n_heads, Metric::AIE, "all");
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int j = 0; j < cfg.n_heads; ++j)
      result.overall.set({l, j}, total[head_index(cfg, {l, j})] / used.size());
  return result;
}

CrossFormatResult cross_format_aie(const Model& model, Format source, Format target,
                                   const std::map<std::string, std::vector<CorruptedPrompt>>& corrupted,
                                   const MeanActivationCache& cache,
                                   const std::set<std::string>& exclude, int jobs) {
  std::vector<PatchingDataset> datasets;
  for (const auto& c : kConcepts) {
    const std::string tgt = dataset_id(c, target);
    const std::string src = dataset_id(c, source);
    auto it = corrupted.find(tgt);
    if (it == corrupted.end() || !cache.contains(src)) continue;
    if (exclude.count(tgt) || exclude.count(src)) continue;
    datasets.push_back({tgt, src, it->second});
  }
  if (datasets.empty())
    throw Error("cross-format patching " + to_string(source) + " -> " + to_string(target) +
                ": no concept has both datasets");
  CrossFormatResult r;
  r.source = source;
  r.target = target;
  r.table = aie(model, datasets, cache, {}, jobs).overall;
  r.table.set_scope(to_string(source) + "->" + to_string(target));
  return r;
}

}  // namespace headlens
