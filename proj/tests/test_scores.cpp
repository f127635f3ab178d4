#include <doctest.h>

#include <cmath>

#include "headlens/error.hpp"
#include "headlens/scores.hpp"

using namespace headlens;

TEST_CASE("ranking sorts by score, breaks ties by position and puts undefined last") {
  ScoreTable t(2, 2, Metric::AIE);
  t.set({0, 0}, 0.5);
  t.set({0, 1}, std::nullopt);
  t.set({1, 0}, 0.5);
  t.set({1, 1}, 0.9);
  const auto r = t.ranking();
  REQUIRE(r.size() == 4);
  CHECK(r[0] == HeadLocator{1, 1});
  CHECK(r[1] == HeadLocator{0, 0});
  CHECK(r[2] == HeadLocator{1, 0});
  CHECK(r[3] == HeadLocator{0, 1});
  CHECK(t.top_k(0).empty());
  CHECK_THROWS_AS(t.top_k(5), Error);
  CHECK_THROWS_AS(t.set({2, 0}, 1.0), Error);
}

TEST_CASE("layer means skip undefined scores") {
  ScoreTable t(2, 2, Metric::ConceptRSA);
  t.set({0, 0}, 1.0);
  t.set({0, 1}, 3.0);
  t.set({1, 0}, std::nullopt);
  t.set({1, 1}, std::nullopt);
  const auto m = t.layer_means();
  CHECK(m[0] == 2.0);
  CHECK(std::isnan(m[1]));
}

TEST_CASE("histogram bins cover every defined score") {
  ScoreTable t(1, 5, Metric::AIE);
  for (int h = 0; h < 5; ++h) t.set({0, h}, h * 0.25);
  const auto bins = t.histogram(2);
  REQUIRE(bins.size() == 2);
  CHECK(bins[0].lo == 0.0);
  CHECK(bins[1].hi == 1.0);
  CHECK(bins[0].count + bins[1].count == 5);
  CHECK(bins[1].count == 3);  // 0.5, 0.75, 1.0 (upper edge inclusive)
}

TEST_CASE("score tables round-trip through JSON exactly") {
  ScoreTable t(2, 3, Metric::QuestionTypeRSA, "all");
  t.set({0, 0}, 0.1);
  t.set({1, 2}, -1.0 / 3.0);
  const auto back = ScoreTable::from_json(t.to_json());
  CHECK(back.values() == t.values());
  CHECK(back.metric() == Metric::QuestionTypeRSA);
  CHECK(back.scope() == "all");
  CHECK(t.to_csv().rfind("layer,head,score\n", 0) == 0);
}

TEST_CASE("doubles print in shortest round-trip form") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
}
