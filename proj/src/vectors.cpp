#include "headlens/vectors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace headlens {

std::string to_string(Method m) { return m == Method::FV ? "FV" : "CV"; }

Method parse_method(const std::string& s) {
  if (s == "FV") return Method::FV;
  if (s == "CV") return Method::CV;
  throw Error("unknown vector method '" + s + "'");
}

HeadSelection select_heads(const ScoreTable& scores, Method method, int k) {
  return HeadSelection{method, k, scores.top_k(k)};
}

namespace {

std::vector<HeadLocator> sorted_heads(const HeadSelection& s) {
  auto h = s.heads;
  std::sort(h.begin(), h.end());
  if (std::adjacent_find(h.begin(), h.end()) != h.end())
    throw Error("head selection lists a head twice");
  return h;
}

void check_record(const ActivationRecord& r, const std::vector<HeadLocator>& heads) {
  for (const auto& h : heads)
    if (h.layer < 0 || h.layer >= r.n_layers() || h.head < 0 || h.head >= r.n_heads())
      throw Error("record '" + r.prompt_id() + "' has no head " + h.str());
}

}  // namespace

std::vector<float> per_prompt_vector(const ActivationRecord& record, const HeadSelection& selection) {
  const auto heads = sorted_heads(selection);
  check_record(record, heads);
  std::vector<double> acc(record.d_model(), 0.0);
  for (const auto& h : heads) {
    auto x = record.head(h);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
  }
  return std::vector<float>(acc.begin(), acc.end());
}

std::string SteeringVector::label() const {
  return to_string(method) + "/K" + std::to_string(k) + "/" + concept_id + "/" + to_string(format);
}

std::string SteeringVector::provenance_json() const {
  nlohmann::json j;
  j["method"] = to_string(method);
  j["k"] = k;
  j["concept_id"] = concept_id;
  j["format_id"] = to_string(format);
  j["n_prompts"] = n_prompts;
  j["d_model"] = values.size();
  nlohmann::json hs = nlohmann::json::array();
  for (const auto& h : heads) hs.push_back({h.layer, h.head});
  j["heads"] = hs;
  return j.dump(1);
}

SteeringVector steering_vector(std::span<const ActivationRecord> records, const HeadSelection& selection,
                               const std::string& concept_id, Format format) {
  if (records.empty()) throw Error("steering vector for " + dataset_id(concept_id, format) + ": no records");
  const auto heads = sorted_heads(selection);
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return records[a].prompt_id() < records[b].prompt_id(); });
  const int d = records[0].d_model();
  std::vector<double> total(d, 0.0);
  for (const auto& h : heads) {
    std::vector<double> mean(d, 0.0);
    for (std::size_t i : order) {
      check_record(records[i], {h});
      if (records[i].d_model() != d) throw Error("steering vector: records differ in d_model");
      auto x = records[i].head(h);
      for (int t = 0; t < d; ++t) mean[t] += x[t];
    }
    for (int t = 0; t < d; ++t) total[t] += mean[t] / records.size();
  }
  SteeringVector v;
  v.values.assign(total.begin(), total.end());
  for (float x : v.values)
    if (!std::isfinite(x)) throw Error("steering vector has non-finite entries");
  v.method = selection.method;
  v.k = selection.k;
  v.concept_id = concept_id;
  v.format = format;
  v.n_prompts = records.size();
  v.heads = selection.heads;
  return v;
}

namespace {

double log_choose(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace

double hypergeom_tail(int n, int k, int x) {
  if (n < 1 || k < 0 || k > n) throw Error("hypergeom_tail: need 0 <= K <= N");
  const int lo = std::max(0, 2 * k - n);
  if (x <= lo) return 1.0;
  if (x > k) return 0.0;
  const double denom = log_choose(n, k);
  // Neumaier-compensated sum of the upper tail.
  double sum = 0.0, comp = 0.0;
  for (int i = x; i <= k; ++i) {
    const double term = std::exp(log_choose(k, i) + log_choose(n - k, k - i) - denom);
    const double t = sum + term;
    comp += std::abs(sum) >= std::abs(term) ? (sum - t) + term : (term - t) + sum;
    sum = t;
  }
  return std::min(1.0, sum + comp);
}

OverlapResult head_overlap(const HeadSelection& a, const HeadSelection& b, int n_total) {
  if (a.heads.size() != b.heads.size() || a.k != b.k)
    throw Error("head overlap: selections differ in K");
  if (static_cast<int>(a.heads.size()) != a.k) throw Error("head overlap: selection size differs from K");
  if (a.k > n_total) throw Error("head overlap: K exceeds the head count");
  std::set<HeadLocator> sa(a.heads.begin(), a.heads.end());
  OverlapResult r;
  r.n_total = n_total;
  r.k = a.k;
  for (const auto& h : b.heads)
    if (h.layer < 0 || h.head < 0) throw Error("head overlap: invalid head " + h.str());
  for (const auto& h : std::set<HeadLocator>(b.heads.begin(), b.heads.end())) r.overlap += sa.count(h);
  r.p_value = hypergeom_tail(n_total, a.k, r.overlap);
  r.significant = r.p_value < 0.05;
  return r;
}

std::string overlap_csv(const std::vector<OverlapResult>& rows) {
  std::ostringstream os;
  os << "K,overlap,p_value,significant\n";
  for (const auto& r : rows)
    os << r.k << ',' << r.overlap << ',' << format_double(r.p_value) << ',' << (r.significant ? "true" : "false")
       << '\n';
  return os.str();
}

SimilarityReport vector_similarity_report(const std::vector<std::vector<float>>& vectors,
                                          const std::vector<PromptMeta>& meta) {
  if (vectors.size() != meta.size()) throw Error("similarity report: vectors and metadata differ in length");
  SimilarityReport r;
  std::vector<std::vector<double>> vs;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    vs.emplace_back(vectors[i].begin(), vectors[i].end());
    r.labels.push_back(meta[i].prompt_id);
  }
  r.matrix = cosine_matrix(vs, r.labels);
  double s1 = 0.0, s2 = 0.0;
  std::size_t n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < meta.size(); ++i)
    for (std::size_t k = 0; k < meta.size(); ++k) {
      if (i == k) continue;
      const bool same_c = meta[i].concept_id == meta[k].concept_id;
      const bool same_f = meta[i].format == meta[k].format;
      if (same_c && !same_f) {
        s1 += r.matrix(i, k);
        ++n1;
      } else if (same_f && !same_c) {
        s2 += r.matrix(i, k);
        ++n2;
      }
    }
  r.within_concept_cross_format = n1 ? s1 / n1 : std::nan("");
  r.within_format_cross_concept = n2 ? s2 / n2 : std::nan("");
  return r;
}

}  // namespace headlens
