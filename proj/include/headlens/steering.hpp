#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headlens/runtime.hpp"
#include "headlens/vectors.hpp"

namespace headlens {

/// A tokenized steering prompt with the tokens whose probabilities are tracked.
struct SteerPrompt {
  std::string prompt_id;
  std::vector<int> tokens;
  int gold = -1;
  std::optional<int> competitor;  // the other concept's answer, if any
};

struct TokenDelta {
  int token = -1;
  std::string text;
  double delta = 0.0;
};

struct InterventionOutcome {
  std::string prompt_id;
  int layer = 0;
  double alpha = 0.0;
  std::string vector_label;
  double p_before = 0.0;
  double p_after = 0.0;
  double delta_p = 0.0;
  bool top1_correct = false;  // after steering
  std::optional<double> competitor_delta;
  std::vector<TokenDelta> marker_deltas;  // config-declared format markers
  std::vector<TokenDelta> top_deltas;     // 10 largest |delta| over the vocabulary
  double delta_sum = 0.0;                 // sum of all deltas; ~0 when both are normalized
  std::vector<float> post;                // steered distribution, kept on request
};

struct SweepOptions {
  std::vector<int> markers;  // token ids reported in marker_deltas
  int top_tokens = 10;
  bool keep_distribution = false;
  int jobs = 1;
};

/// For every (prompt, layer): one unsteered and one steered next-token pass.
/// Outcomes are ordered by prompt then layer.
std::vector<InterventionOutcome> steer_sweep(const Model& model, const std::vector<SteerPrompt>& prompts,
                                             const SteeringVector& vector, const std::vector<int>& layers,
                                             double alpha, const SweepOptions& options = {});

/// Same harness on query-only prompts.
std::vector<InterventionOutcome> zero_shot_sweep(const Model& model, const std::vector<SteerPrompt>& prompts,
                                                 const SteeringVector& vector, const std::vector<int>& layers,
                                                 double alpha, const SweepOptions& options = {});

struct LayerSummary {
  int layer = 0;
  double mean_delta_p = 0.0;
  double top1_accuracy = 0.0;
  std::optional<double> mean_competitor_delta;
  std::size_t n = 0;
};

/// Per-layer means, ascending layer.
std::vector<LayerSummary> summarize_by_layer(const std::vector<InterventionOutcome>& outcomes);

/// max over layers of the mean ΔP.
double max_layer_effect(const std::vector<InterventionOutcome>& outcomes);

/// Σ p log(p/q) with both sides floored at 1e-12, summed as the term-wise
/// non-negative form p log(p/q) - p + q (identical for normalized inputs).
double kl_divergence(std::span<const float> p, std::span<const float> q);
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct ConsistencyScore {
  std::string concept_id;
  Method method = Method::FV;
  Format ood_format = Format::OE_EN;
  Format id_format = Format::OE_EN;
  double mean_kl = 0.0;
  std::vector<int> layers;
  bool fewer_layers = false;  // fewer than five layers were available
};

/// Mean KL(post_OOD || post_ID) over prompts at the five layers with the
/// highest mean ID ΔP (ties: lower layer first).
ConsistencyScore kl_consistency(const Model& model, const std::vector<SteerPrompt>& prompts,
                                const SteeringVector& id_vector, const SteeringVector& ood_vector,
                                const std::vector<InterventionOutcome>& id_outcomes, double alpha,
                                int jobs = 1);

struct GridCell {
  int k = 0;
  double alpha = 0.0;
  double effect = 0.0;
};

struct SearchResult {
  int best_k = 0;
  double best_alpha = 0.0;
  double best_effect = 0.0;
  std::vector<GridCell> grid;
};

/// Evaluates `effect(K, α)` on the full grid and returns the argmax; ties go
/// to the smaller K, then the smaller α.
SearchResult hyperparameter_search(const std::vector<int>& k_grid, const std::vector<double>& alpha_grid,
                                   const std::function<double(int, double)>& effect);

}  // namespace headlens
