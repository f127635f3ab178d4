#include "headlens/rsa.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "headlens/parallel.hpp"

namespace headlens {

std::vector<double> SquareMatrix::lower_triangle() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n_) * (n_ - 1) / 2);
  for (int i = 1; i < n_; ++i)
    for (int k = 0; k < i; ++k) out.push_back((*this)(i, k));
  return out;
}

std::string SquareMatrix::to_csv(const std::vector<std::string>& labels) const {
  if (static_cast<int>(labels.size()) != n_) throw Error("matrix csv: label count does not match");
  std::ostringstream os;
  os << "prompt_id";
  for (const auto& l : labels) os << ',' << l;
  os << '\n';
  for (int i = 0; i < n_; ++i) {
    os << labels[i];
    for (int k = 0; k < n_; ++k) os << ',' << format_double((*this)(i, k));
    os << '\n';
  }
  return os.str();
}

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> summed(const ActivationRecord& r, const std::vector<HeadLocator>& sorted_heads) {
  std::vector<double> v(r.d_model(), 0.0);
  for (const auto& h : sorted_heads) {
    auto x = r.head(h);
    for (int i = 0; i < r.d_model(); ++i) v[i] += x[i];
  }
  return v;
}

/// Lower triangle of the cosine matrix, or nullopt if any vector is zero.
std::optional<std::vector<double>> cosine_lower(const std::vector<std::vector<double>>& vs) {
  const std::size_t n = vs.size();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = norm2(vs[i]);
    if (norms[i] == 0.0) return std::nullopt;
  }
  std::vector<double> out;
  out.reserve(n * (n - 1) / 2);
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k)
      out.push_back(std::clamp(dot(vs[i], vs[k]) / (norms[i] * norms[k]), -1.0, 1.0));
  return out;
}

}  // namespace

SquareMatrix cosine_matrix(const std::vector<std::vector<double>>& vectors,
                           const std::vector<std::string>& ids) {
  const int n = static_cast<int>(vectors.size());
  for (int i = 0; i < n; ++i)
    if (norm2(vectors[i]) == 0.0)
      throw Error("zero-norm vector for prompt '" + (i < static_cast<int>(ids.size()) ? ids[i] : std::to_string(i)) + "'");
  auto lower = *cosine_lower(vectors);
  SquareMatrix m(n);
  std::size_t t = 0;
  for (int i = 0; i < n; ++i) {
    m(i, i) = 1.0;
    for (int k = 0; k < i; ++k) m(i, k) = m(k, i) = lower[t++];
  }
  return m;
}

SquareMatrix build_rsm(std::span<const ActivationRecord> records, const std::vector<HeadLocator>& heads) {
  if (heads.empty()) throw Error("build_rsm: empty head subset");
  if (records.empty()) throw Error("build_rsm: no records");
  auto sorted = heads;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::vector<double>> vs;
  std::vector<std::string> ids;
  for (const auto& r : records) {
    if (r.d_model() != records[0].d_model()) throw Error("build_rsm: records differ in d_model");
    vs.push_back(summed(r, sorted));
    ids.push_back(r.prompt_id());
  }
  return cosine_matrix(vs, ids);
}

SquareMatrix build_design_matrix(const std::vector<PromptMeta>& meta, Attribute attribute) {
  const int n = static_cast<int>(meta.size());
  std::vector<std::string> value(n);
  for (int i = 0; i < n; ++i) {
    if (attribute == Attribute::by_concept) {
      if (meta[i].concept_id.empty())
        throw Error("design matrix: prompt '" + meta[i].prompt_id + "' has no concept");
      value[i] = meta[i].concept_id;
    } else {
      value[i] = question_type(meta[i].format);
    }
  }
  SquareMatrix m(n);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) m(i, k) = value[i] == value[k] ? 1.0 : 0.0;
  return m;
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // positions i..j (0-based) share rank mean(i+1 .. j+1)
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("pearson: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> spearman_lower_triangle(const SquareMatrix& rsm, const SquareMatrix& dm) {
  if (rsm.n() != dm.n()) throw Error("spearman: matrices differ in size");
  if (rsm.n() < 3) throw Error("spearman: need at least 3 prompts");
  const auto a = rsm.lower_triangle();
  const auto b = dm.lower_triangle();
  return pearson(average_ranks(a), average_ranks(b));
}

RsaTables concept_rsa_all_heads(std::span<const ActivationRecord> records,
                                const std::vector<PromptMeta>& meta, int jobs) {
  if (records.size() != meta.size()) throw Error("rsa: records and metadata differ in length");
  if (records.size() < 3) throw Error("rsa: need at least 3 prompts");
  const int L = records[0].n_layers(), H = records[0].n_heads(), d = records[0].d_model();
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].prompt_id() != meta[i].prompt_id)
      throw Error("rsa: record '" + records[i].prompt_id() + "' does not match metadata '" +
                  meta[i].prompt_id + "'");
    if (records[i].n_layers() != L || records[i].n_heads() != H || records[i].d_model() != d)
      throw Error("rsa: records differ in shape");
  }
  const auto concept_ranks = average_ranks(build_design_matrix(meta, Attribute::by_concept).lower_triangle());
  const auto qt_ranks = average_ranks(build_design_matrix(meta, Attribute::by_question_type).lower_triangle());

  std::vector<std::optional<double>> c(static_cast<std::size_t>(L) * H), q(c.size());
  parallel_for(c.size(), jobs, [&](std::size_t idx) {
    const HeadLocator h{static_cast<int>(idx) / H, static_cast<int>(idx) % H};
    std::vector<std::vector<double>> vs;
    vs.reserve(records.size());
    for (const auto& r : records) {
      auto x = r.head(h);
      vs.emplace_back(x.begin(), x.end());
    }
    auto lower = cosine_lower(vs);
    if (!lower) return;
    const auto ranks = average_ranks(*lower);
    c[idx] = pearson(ranks, concept_ranks);
    q[idx] = pearson(ranks, qt_ranks);
  });
  RsaTables out{ScoreTable(L, H, Metric::ConceptRSA, "all"), ScoreTable(L, H, Metric::QuestionTypeRSA, "all")};
  for (std::size_t idx = 0; idx < c.size(); ++idx) {
    const HeadLocator h{static_cast<int>(idx) / H, static_cast<int>(idx) % H};
    out.concept_rsa.set(h, c[idx]);
    out.question_type_rsa.set(h, q[idx]);
  }
  return out;
}

double mean_pair_similarity(const SquareMatrix& sim, const std::vector<PromptMeta>& meta,
                            Attribute attribute, bool same) {
  if (sim.n() != static_cast<int>(meta.size())) throw Error("pair similarity: size mismatch");
  const auto dm = build_design_matrix(meta, attribute);
  double sum = 0.0;
  std::size_t n = 0;
  for (int i = 0; i < sim.n(); ++i)
    for (int k = 0; k < sim.n(); ++k)
      if (i != k && (dm(i, k) == 1.0) == same) {
        sum += sim(i, k);
        ++n;
      }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

std::vector<VectorRsaRow> compare_vector_rsa(std::span<const ActivationRecord> records,
                                             const std::vector<PromptMeta>& meta,
                                             const ScoreTable& fv_scores, const ScoreTable& cv_scores,
                                             const std::vector<int>& k_values) {
  if (records.size() != meta.size()) throw Error("vector rsa: records and metadata differ in length");
  const auto concept_dm = build_design_matrix(meta, Attribute::by_concept);
  const auto qt_dm = build_design_matrix(meta, Attribute::by_question_type);
  std::vector<VectorRsaRow> rows;
  for (int k : k_values) {
    for (const auto* table : {&fv_scores, &cv_scores}) {
      if (k < 1 || k > table->size())
        throw Error("vector rsa: K=" + std::to_string(k) + " exceeds the " +
                    std::to_string(table->size()) + " available heads");
      VectorRsaRow row;
      row.method = table == &fv_scores ? "FV" : "CV";
      row.k = k;
      row.heads = table->top_k(k);
      row.rsm = build_rsm(records, row.heads);
      row.concept_rsa = spearman_lower_triangle(row.rsm, concept_dm);
      row.question_type_rsa = spearman_lower_triangle(row.rsm, qt_dm);
      row.within_question_type = mean_pair_similarity(row.rsm, meta, Attribute::by_question_type, true);
      row.across_question_type = mean_pair_similarity(row.rsm, meta, Attribute::by_question_type, false);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace headlens
