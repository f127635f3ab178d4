#pragma once

#include <span>
#include <string>
#include <vector>

#include "headlens/rsa.hpp"
#include "headlens/runtime.hpp"
#include "headlens/scores.hpp"
#include "headlens/tasks.hpp"

namespace headlens {

enum class Method { FV, CV };

std::string to_string(Method m);
Method parse_method(const std::string& s);

struct HeadSelection {
  Method method = Method::FV;
  int k = 0;
  std::vector<HeadLocator> heads;  // ranking order
};

/// Top-K heads of `scores` (AIE for FV, Concept-RSA for CV).
HeadSelection select_heads(const ScoreTable& scores, Method method, int k);

/// Sum of the selected heads' outputs on one prompt, accumulated in (layer,
/// head) order.
std::vector<float> per_prompt_vector(const ActivationRecord& record, const HeadSelection& selection);

struct SteeringVector {
  std::vector<float> values;
  Method method = Method::FV;
  int k = 0;
  std::string concept_id;
  Format format = Format::OE_EN;
  std::size_t n_prompts = 0;
  std::vector<HeadLocator> heads;

  std::string label() const;  // e.g. "FV/K3/antonym/OE_EN"
  std::string provenance_json() const;
};

/// Per head, the mean output over the extraction prompts; then the sum over
/// the selected heads.
SteeringVector steering_vector(std::span<const ActivationRecord> records, const HeadSelection& selection,
                               const std::string& concept_id, Format format);

/// Pr[X >= x] for X ~ Hypergeometric(population n, k marked, k drawn).
double hypergeom_tail(int n, int k, int x);

struct OverlapResult {
  int n_total = 0;
  int k = 0;
  int overlap = 0;
  double p_value = 1.0;
  bool significant = false;  // p < 0.05
};

OverlapResult head_overlap(const HeadSelection& a, const HeadSelection& b, int n_total);

std::string overlap_csv(const std::vector<OverlapResult>& rows);

struct SimilarityReport {
  std::vector<std::string> labels;
  SquareMatrix matrix;
  double within_concept_cross_format = 0.0;
  double within_format_cross_concept = 0.0;
};

/// Cosine matrix over vectors plus the two group means (ordered pairs i != k
/// with the same concept and different formats, and vice versa).
SimilarityReport vector_similarity_report(const std::vector<std::vector<float>>& vectors,
                                          const std::vector<PromptMeta>& meta);

}  // namespace headlens
