#include <doctest.h>

#include <boost/math/distributions/hypergeometric.hpp>

#include "fixtures.hpp"
#include "headlens/error.hpp"
#include "headlens/vectors.hpp"

using namespace headlens;

namespace {

ScoreTable ramp(int L, int H) {
  ScoreTable t(L, H, Metric::AIE);
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) t.set({l, h}, l * H + h);
  return t;
}

}  // namespace

TEST_CASE("head selection takes the top of the ranking") {
  const auto s = select_heads(ramp(2, 3), Method::CV, 2);
  CHECK(s.method == Method::CV);
  REQUIRE(s.heads.size() == 2);
  CHECK(s.heads[0] == HeadLocator{1, 2});
  CHECK(s.heads[1] == HeadLocator{1, 1});
  CHECK_THROWS_AS(select_heads(ramp(2, 3), Method::FV, 7), Error);
}

TEST_CASE("steering vector is the per-head mean summed over heads") {
  const int L = 2, H = 2, d = 3;
  std::vector<ActivationRecord> recs;
  for (int p = 0; p < 3; ++p) {
    std::vector<float> v(L * H * d);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i + 10 * p);
    recs.emplace_back("p" + std::to_string(p), L, H, d, v);
  }
  HeadSelection sel{Method::FV, 2, {{1, 0}, {0, 1}}};
  const auto sv = steering_vector(recs, sel, "antonym", Format::MC);
  // head (0,1) mean = [3,4,5] + 10; head (1,0) mean = [6,7,8] + 10.
  CHECK(sv.values == std::vector<float>{29, 31, 33});
  CHECK(sv.n_prompts == 3);
  CHECK(sv.label() == "FV/K2/antonym/MC");
  CHECK(per_prompt_vector(recs[0], sel) == std::vector<float>{9, 11, 13});
  CHECK_THROWS_AS(steering_vector({}, sel, "antonym", Format::MC), Error);
}

TEST_CASE("hypergeometric tail agrees with boost") {
  for (int n : {10, 40, 1024})
    for (int k : {1, 3, 5, std::min(50, n)})
      for (int x = 0; x <= k; ++x) {
        boost::math::hypergeometric_distribution<double> dist(k, k, n);
        const double expect =
            x <= std::max(0, 2 * k - n) ? 1.0 : boost::math::cdf(boost::math::complement(dist, x - 1));
        CHECK(hypergeom_tail(n, k, x) == doctest::Approx(expect).epsilon(1e-9).scale(0));
      }
  CHECK(hypergeom_tail(10, 3, 4) == 0.0);
  CHECK_THROWS_AS(hypergeom_tail(5, 6, 1), Error);
}

TEST_CASE("head overlap reports the shared count and significance") {
  HeadSelection a{Method::FV, 3, {{0, 0}, {0, 1}, {1, 0}}};
  HeadSelection b{Method::CV, 3, {{1, 0}, {0, 0}, {1, 1}}};
  const auto r = head_overlap(a, b, 8);
  CHECK(r.overlap == 2);
  CHECK(r.p_value == doctest::Approx(hypergeom_tail(8, 3, 2)));
  CHECK(r.significant == (r.p_value < 0.05));
  CHECK(overlap_csv({r}).find("K,overlap,p_value") != std::string::npos);
}

TEST_CASE("vector similarity groups split by concept and format") {
  const std::vector<std::vector<float>> v{{1, 0}, {1, 0.1f}, {0, 1}, {0.1f, 1}};
  const std::vector<PromptMeta> meta{{"antonym/OE_EN", "antonym", Format::OE_EN},
                                     {"antonym/MC", "antonym", Format::MC},
                                     {"synonym/OE_EN", "synonym", Format::OE_EN},
                                     {"synonym/MC", "synonym", Format::MC}};
  const auto r = vector_similarity_report(v, meta);
  CHECK(r.within_concept_cross_format > 0.99);
  CHECK(r.within_format_cross_concept < 0.2);
  CHECK(r.labels.size() == 4);
}
