#include "headlens/scores.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

namespace headlens {

std::string to_string(Metric m) {
  switch (m) {
    case Metric::AIE: return "AIE";
    case Metric::ConceptRSA: return "ConceptRSA";
    case Metric::QuestionTypeRSA: return "QuestionTypeRSA";
  }
  return "?";
}

Metric parse_metric(const std::string& s) {
  for (Metric m : {Metric::AIE, Metric::ConceptRSA, Metric::QuestionTypeRSA})
    if (to_string(m) == s) return m;
  throw Error("unknown metric '" + s + "'");
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

ScoreTable::ScoreTable(int n_layers, int n_heads, Metric metric, std::string scope)
    : n_layers_(n_layers),
      n_heads_(n_heads),
      metric_(metric),
      scope_(std::move(scope)),
      scores_(static_cast<std::size_t>(n_layers) * n_heads) {
  if (n_layers < 1 || n_heads < 1) throw Error("score table needs at least one head");
}

void ScoreTable::check(HeadLocator h) const {
  if (h.layer < 0 || h.layer >= n_layers_ || h.head < 0 || h.head >= n_heads_)
    throw Error("score table has no head " + h.str());
}

void ScoreTable::set(HeadLocator h, std::optional<double> score) {
  check(h);
  if (score && std::isnan(*score)) score.reset();
  scores_[static_cast<std::size_t>(h.layer) * n_heads_ + h.head] = score;
}

std::optional<double> ScoreTable::get(HeadLocator h) const {
  check(h);
  return scores_[static_cast<std::size_t>(h.layer) * n_heads_ + h.head];
}

std::vector<HeadLocator> ScoreTable::ranking() const {
  std::vector<HeadLocator> heads;
  heads.reserve(scores_.size());
  for (int l = 0; l < n_layers_; ++l)
    for (int h = 0; h < n_heads_; ++h) heads.push_back({l, h});
  std::stable_sort(heads.begin(), heads.end(), [&](HeadLocator a, HeadLocator b) {
    const auto& sa = scores_[static_cast<std::size_t>(a.layer) * n_heads_ + a.head];
    const auto& sb = scores_[static_cast<std::size_t>(b.layer) * n_heads_ + b.head];
    if (sa.has_value() != sb.has_value()) return sa.has_value();
    if (sa && *sa != *sb) return *sa > *sb;
    return a < b;
  });
  return heads;
}

std::vector<HeadLocator> ScoreTable::top_k(int k) const {
  if (k < 0 || k > size())
    throw Error("top_k: K=" + std::to_string(k) + " outside [0, " + std::to_string(size()) + "]");
  auto r = ranking();
  r.resize(k);
  return r;
}

std::vector<double> ScoreTable::layer_means() const {
  std::vector<double> out(n_layers_, std::numeric_limits<double>::quiet_NaN());
  for (int l = 0; l < n_layers_; ++l) {
    double sum = 0.0;
    int n = 0;
    for (int h = 0; h < n_heads_; ++h)
      if (const auto& s = scores_[static_cast<std::size_t>(l) * n_heads_ + h]) {
        sum += *s;
        ++n;
      }
    if (n) out[l] = sum / n;
  }
  return out;
}

std::vector<HistogramBin> ScoreTable::histogram(int bins) const {
  if (bins < 1) throw Error("histogram needs at least one bin");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : scores_)
    if (s) {
      lo = std::min(lo, *s);
      hi = std::max(hi, *s);
    }
  if (lo > hi) return {};
  if (lo == hi) hi = lo + 1e-12;
  std::vector<HistogramBin> out(bins);
  const double width = (hi - lo) / bins;
  for (int b = 0; b < bins; ++b) {
    out[b].lo = lo + b * width;
    out[b].hi = b + 1 == bins ? hi : lo + (b + 1) * width;
  }
  for (const auto& s : scores_)
    if (s) {
      int b = static_cast<int>((*s - lo) / width);
      out[std::clamp(b, 0, bins - 1)].count++;
    }
  return out;
}

std::string ScoreTable::to_csv() const {
  std::ostringstream os;
  os << "layer,head,score\n";
  for (int l = 0; l < n_layers_; ++l)
    for (int h = 0; h < n_heads_; ++h) {
      os << l << ',' << h << ',';
      if (const auto& s = scores_[static_cast<std::size_t>(l) * n_heads_ + h]) os << format_double(*s);
      os << '\n';
    }
  return os.str();
}

std::string ScoreTable::to_json() const {
  nlohmann::json j;
  j["metric"] = to_string(metric_);
  j["scope"] = scope_;
  j["n_layers"] = n_layers_;
  j["n_heads"] = n_heads_;
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& s : scores_) scores.push_back(s ? nlohmann::json(*s) : nlohmann::json(nullptr));
  j["scores"] = scores;
  return j.dump(1);
}

ScoreTable ScoreTable::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    ScoreTable t(j.at("n_layers").get<int>(), j.at("n_heads").get<int>(),
                 parse_metric(j.at("metric").get<std::string>()), j.value("scope", ""));
    const auto& scores = j.at("scores");
    if (scores.size() != static_cast<std::size_t>(t.size())) throw Error("score table: wrong score count");
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (!scores[i].is_null()) t.scores_[i] = scores[i].get<double>();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("score table json: ") + e.what());
  }
}

std::string histogram_csv(const std::vector<HistogramBin>& bins) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count\n";
  for (const auto& b : bins) os << format_double(b.lo) << ',' << format_double(b.hi) << ',' << b.count << '\n';
  return os.str();
}

}  // namespace headlens
