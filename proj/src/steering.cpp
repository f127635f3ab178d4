#include "headlens/steering.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "headlens/parallel.hpp"

namespace headlens {

namespace {

void check_sweep(const Model& model, const SteeringVector& vector, const std::vector<int>& layers,
                 double alpha) {
  const auto& cfg = model.config();
  if (static_cast<int>(vector.values.size()) != cfg.d_model)
    throw Error("steering vector " + vector.label() + " has " + std::to_string(vector.values.size()) +
                " entries, model width is " + std::to_string(cfg.d_model));
  for (float v : vector.values)
    if (!std::isfinite(v)) throw Error("steering vector " + vector.label() + " has non-finite entries");
  if (!std::isfinite(alpha)) throw Error("steering strength is not finite");
  for (int l : layers)
    if (l < 0 || l >= cfg.n_layers) throw Error("steering layer " + std::to_string(l) + " out of range");
}

InterventionOutcome measure(const Model& model, const SteerPrompt& p, const ForwardResult& before,
                            const ForwardResult& after, int layer, double alpha, const std::string& label,
                            const SweepOptions& opt) {
  const auto& tok = model.tokenizer();
  InterventionOutcome o;
  o.prompt_id = p.prompt_id;
  o.layer = layer;
  o.alpha = alpha;
  o.vector_label = label;
  o.p_before = before.probs[p.gold];
  o.p_after = after.probs[p.gold];
  o.delta_p = o.p_after - o.p_before;
  const auto top = std::max_element(after.probs.begin(), after.probs.end()) - after.probs.begin();
  o.top1_correct = top == p.gold;
  if (p.competitor)
    o.competitor_delta = static_cast<double>(after.probs[*p.competitor]) - before.probs[*p.competitor];
  for (int m : opt.markers)
    o.marker_deltas.push_back({m, tok.decode(m), static_cast<double>(after.probs[m]) - before.probs[m]});
  const int V = static_cast<int>(after.probs.size());
  std::vector<TokenDelta> all(V);
  for (int i = 0; i < V; ++i) {
    all[i] = {i, {}, static_cast<double>(after.probs[i]) - before.probs[i]};
    o.delta_sum += all[i].delta;
  }
  const int n = std::min(opt.top_tokens, V);
  std::partial_sort(all.begin(), all.begin() + n, all.end(), [](const TokenDelta& a, const TokenDelta& b) {
    if (std::abs(a.delta) != std::abs(b.delta)) return std::abs(a.delta) > std::abs(b.delta);
    return a.token < b.token;
  });
  all.resize(n);
  for (auto& t : all) t.text = tok.decode(t.token);
  o.top_deltas = std::move(all);
  if (opt.keep_distribution) o.post = after.probs;
  return o;
}

}  // namespace

std::vector<InterventionOutcome> steer_sweep(const Model& model, const std::vector<SteerPrompt>& prompts,
                                             const SteeringVector& vector, const std::vector<int>& layers,
                                             double alpha, const SweepOptions& options) {
  check_sweep(model, vector, layers, alpha);
  auto sorted_layers = layers;
  std::sort(sorted_layers.begin(), sorted_layers.end());
  sorted_layers.erase(std::unique(sorted_layers.begin(), sorted_layers.end()), sorted_layers.end());
  for (const auto& p : prompts)
    if (p.gold < 0 || p.gold >= model.config().vocab_size)
      throw Error("prompt '" + p.prompt_id + "': gold token is absent from the vocabulary");

  std::vector<std::vector<InterventionOutcome>> per_prompt(prompts.size());
  parallel_for(prompts.size(), options.jobs, [&](std::size_t i) {
    const Trace tr = model.trace(prompts[i].tokens, false);
    HookSet hooks;
    hooks.injections.push_back({0, vector.values, static_cast<float>(alpha)});
    for (int l : sorted_layers) {
      hooks.injections[0].layer = l;
      const ForwardResult after = model.resume(tr, hooks);
      per_prompt[i].push_back(measure(model, prompts[i], tr.base(), after, l, alpha, vector.label(), options));
    }
  });
  std::vector<InterventionOutcome> out;
  for (auto& v : per_prompt)
    for (auto& o : v) out.push_back(std::move(o));
  return out;
}

std::vector<InterventionOutcome> zero_shot_sweep(const Model& model, const std::vector<SteerPrompt>& prompts,
                                                 const SteeringVector& vector, const std::vector<int>& layers,
                                                 double alpha, const SweepOptions& options) {
  return steer_sweep(model, prompts, vector, layers, alpha, options);
}

std::vector<LayerSummary> summarize_by_layer(const std::vector<InterventionOutcome>& outcomes) {
  struct Acc {
    double dp = 0.0, top1 = 0.0, comp = 0.0;
    std::size_t n = 0, n_comp = 0;
  };
  std::map<int, Acc> acc;
  for (const auto& o : outcomes) {
    auto& a = acc[o.layer];
    a.dp += o.delta_p;
    a.top1 += o.top1_correct ? 1.0 : 0.0;
    if (o.competitor_delta) {
      a.comp += *o.competitor_delta;
      ++a.n_comp;
    }
    ++a.n;
  }
  std::vector<LayerSummary> out;
  for (const auto& [layer, a] : acc) {
    LayerSummary s;
    s.layer = layer;
    s.n = a.n;
    s.mean_delta_p = a.dp / a.n;
    s.top1_accuracy = a.top1 / a.n;
    if (a.n_comp) s.mean_competitor_delta = a.comp / a.n_comp;
    out.push_back(s);
  }
  return out;
}

double max_layer_effect(const std::vector<InterventionOutcome>& outcomes) {
  const auto layers = summarize_by_layer(outcomes);
  if (layers.empty()) throw Error("max_layer_effect: no outcomes");
  double best = -INFINITY;
  for (const auto& l : layers) best = std::max(best, l.mean_delta_p);
  return best;
}

namespace {

template <class T>
double kl_impl(std::span<const T> p, std::span<const T> q) {
  if (p.size() != q.size()) throw Error("kl: distributions differ in length");
  constexpr double floor = 1e-12;
  // Each term a log(a/b) - a + b is >= 0 and the extra -a + b terms cancel for
  // normalized inputs, so float32 distributions that sum to 1 only up to
  // rounding cannot produce a negative total.
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = std::max(static_cast<double>(p[i]), floor);
    const double b = std::max(static_cast<double>(q[i]), floor);
    s += std::max(0.0, a * std::log(a / b) - a + b);
  }
  return s;
}

}  // namespace

double kl_divergence(std::span<const float> p, std::span<const float> q) { return kl_impl(p, q); }
double kl_divergence(std::span<const double> p, std::span<const double> q) { return kl_impl(p, q); }

ConsistencyScore kl_consistency(const Model& model, const std::vector<SteerPrompt>& prompts,
                                const SteeringVector& id_vector, const SteeringVector& ood_vector,
                                const std::vector<InterventionOutcome>& id_outcomes, double alpha,
                                int jobs) {
  if (id_vector.method != ood_vector.method || id_vector.k != ood_vector.k ||
      id_vector.concept_id != ood_vector.concept_id)
    throw Error("kl consistency: " + id_vector.label() + " and " + ood_vector.label() +
                " differ in method, K or concept");
  if (prompts.empty()) throw Error("kl consistency: no prompts");
  auto layers = summarize_by_layer(id_outcomes);
  if (layers.empty()) throw Error("kl consistency: no ID outcomes to choose layers from");
  std::stable_sort(layers.begin(), layers.end(), [](const LayerSummary& a, const LayerSummary& b) {
    return a.mean_delta_p > b.mean_delta_p;
  });
  ConsistencyScore s;
  s.concept_id = id_vector.concept_id;
  s.method = id_vector.method;
  s.id_format = id_vector.format;
  s.ood_format = ood_vector.format;
  s.fewer_layers = layers.size() < 5;
  for (std::size_t i = 0; i < std::min<std::size_t>(5, layers.size()); ++i) s.layers.push_back(layers[i].layer);
  std::sort(s.layers.begin(), s.layers.end());
  check_sweep(model, id_vector, s.layers, alpha);
  check_sweep(model, ood_vector, s.layers, alpha);

  std::vector<double> per_prompt(prompts.size());
  parallel_for(prompts.size(), jobs, [&](std::size_t i) {
    const Trace tr = model.trace(prompts[i].tokens, false);
    double sum = 0.0;
    for (int l : s.layers) {
      HookSet id_hooks, ood_hooks;
      id_hooks.injections.push_back({l, id_vector.values, static_cast<float>(alpha)});
      ood_hooks.injections.push_back({l, ood_vector.values, static_cast<float>(alpha)});
      const auto pid = model.resume(tr, id_hooks).probs;
      const auto pood = model.resume(tr, ood_hooks).probs;
      sum += kl_divergence(std::span<const float>(pood), std::span<const float>(pid));
    }
    per_prompt[i] = sum / s.layers.size();
  });
  double total = 0.0;
  for (double v : per_prompt) total += v;
  s.mean_kl = total / prompts.size();
  return s;
}

SearchResult hyperparameter_search(const std::vector<int>& k_grid, const std::vector<double>& alpha_grid,
                                   const std::function<double(int, double)>& effect) {
  if (k_grid.empty() || alpha_grid.empty()) throw Error("hyperparameter search: empty grid");
  auto ks = k_grid;
  auto as = alpha_grid;
  std::sort(ks.begin(), ks.end());
  std::sort(as.begin(), as.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  as.erase(std::unique(as.begin(), as.end()), as.end());
  SearchResult r;
  bool have = false;
  for (int k : ks)
    for (double a : as) {
      const double e = effect(k, a);
      r.grid.push_back({k, a, e});
      // Strictly greater keeps the earlier (smaller K, then smaller α) cell on ties.
      if (!have || e > r.best_effect) {
        r.best_k = k;
        r.best_alpha = a;
        r.best_effect = e;
        have = true;
      }
    }
  return r;
}

}  // namespace headlens
