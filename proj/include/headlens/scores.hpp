#pragma once

#include <optional>
#include <string>
#include <vector>

#include "headlens/runtime.hpp"

namespace headlens {

enum class Metric { AIE, ConceptRSA, QuestionTypeRSA };

std::string to_string(Metric m);
Metric parse_metric(const std::string& s);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

/// One scalar per attention head. Undefined scores (e.g. a head with constant
/// output under RSA) rank below every defined score.
class ScoreTable {
 public:
  ScoreTable() = default;
  ScoreTable(int n_layers, int n_heads, Metric metric, std::string scope = {});

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int size() const { return n_layers_ * n_heads_; }
  Metric metric() const { return metric_; }
  const std::string& scope() const { return scope_; }
  void set_scope(std::string s) { scope_ = std::move(s); }

  void set(HeadLocator h, std::optional<double> score);
  std::optional<double> get(HeadLocator h) const;
  const std::vector<std::optional<double>>& values() const { return scores_; }

  /// Score descending, then (layer, head) ascending; undefined scores last.
  std::vector<HeadLocator> ranking() const;
  /// First `k` entries of ranking(); throws when k is outside [0, size()].
  std::vector<HeadLocator> top_k(int k) const;

  /// Mean of defined scores per layer (NaN for a layer without any).
  std::vector<double> layer_means() const;
  /// `bins` equal-width bins spanning the defined scores.
  std::vector<HistogramBin> histogram(int bins) const;

  std::string to_csv() const;  // layer,head,score (empty score = undefined)
  std::string to_json() const;
  static ScoreTable from_json(const std::string& text);

 private:
  void check(HeadLocator h) const;

  int n_layers_ = 0;
  int n_heads_ = 0;
  Metric metric_ = Metric::AIE;
  std::string scope_;
  std::vector<std::optional<double>> scores_;
};

std::string histogram_csv(const std::vector<HistogramBin>& bins);

/// Shortest decimal that round-trips a double; shared by every CSV writer.
std::string format_double(double v);

}  // namespace headlens
