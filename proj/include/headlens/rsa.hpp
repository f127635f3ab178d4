#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headlens/runtime.hpp"
#include "headlens/scores.hpp"
#include "headlens/tasks.hpp"

namespace headlens {

/// Dense symmetric n x n matrix of doubles (row-major).
class SquareMatrix {
 public:
  SquareMatrix() = default;
  explicit SquareMatrix(int n, double fill = 0.0) : n_(n), v_(static_cast<std::size_t>(n) * n, fill) {}

  int n() const { return n_; }
  double& operator()(int i, int k) { return v_[static_cast<std::size_t>(i) * n_ + k]; }
  double operator()(int i, int k) const { return v_[static_cast<std::size_t>(i) * n_ + k]; }
  const std::vector<double>& data() const { return v_; }

  /// Entries (i, k) with k < i, row by row.
  std::vector<double> lower_triangle() const;
  /// Header row of labels, then one labelled row per prompt.
  std::string to_csv(const std::vector<std::string>& labels) const;

 private:
  int n_ = 0;
  std::vector<double> v_;
};

struct PromptMeta {
  std::string prompt_id;
  std::string concept_id;
  Format format = Format::OE_EN;
};

enum class Attribute { by_concept, by_question_type };

/// Cosine similarity between rows of `vectors`; throws on a zero-norm row.
SquareMatrix cosine_matrix(const std::vector<std::vector<double>>& vectors,
                           const std::vector<std::string>& ids);

/// RSM over prompts of the summed outputs of `heads`.
SquareMatrix build_rsm(std::span<const ActivationRecord> records, const std::vector<HeadLocator>& heads);

/// 1 where two prompts share the attribute value. For question_type both
/// open-ended formats share one value.
SquareMatrix build_design_matrix(const std::vector<PromptMeta>& meta, Attribute attribute);

/// Average ranks (1-based), ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson correlation; nullopt when either side has zero variance.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

/// Tie-corrected Spearman correlation of the strictly-lower triangles;
/// nullopt when either triangle is constant.
std::optional<double> spearman_lower_triangle(const SquareMatrix& rsm, const SquareMatrix& dm);

struct RsaTables {
  ScoreTable concept_rsa;
  ScoreTable question_type_rsa;
};

/// Per-head Concept-RSA and QuestionType-RSA. Heads whose output is zero on
/// some prompt, or constant across prompts, score as undefined.
RsaTables concept_rsa_all_heads(std::span<const ActivationRecord> records,
                                const std::vector<PromptMeta>& meta, int jobs = 1);

/// Mean cosine over ordered pairs i != k that share (or, with `same` false,
/// do not share) the attribute value. NaN when no pair qualifies.
double mean_pair_similarity(const SquareMatrix& sim, const std::vector<PromptMeta>& meta,
                            Attribute attribute, bool same);

struct VectorRsaRow {
  std::string method;  // "FV" or "CV"
  int k = 0;
  std::vector<HeadLocator> heads;
  std::optional<double> concept_rsa;
  std::optional<double> question_type_rsa;
  double within_question_type = 0.0;   // mean cosine, pairs sharing question type
  double across_question_type = 0.0;   // mean cosine, pairs differing in question type
  SquareMatrix rsm;
};

/// Summed-vector RSMs for the top-K heads of each ranking, at every K.
std::vector<VectorRsaRow> compare_vector_rsa(std::span<const ActivationRecord> records,
                                             const std::vector<PromptMeta>& meta,
                                             const ScoreTable& fv_scores, const ScoreTable& cv_scores,
                                             const std::vector<int>& k_values);

}  // namespace headlens
