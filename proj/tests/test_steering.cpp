#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "headlens/error.hpp"
#include "headlens/steering.hpp"

using namespace headlens;

namespace {

SteeringVector random_vector(Rng& rng, int d, const std::string& concept_id, Format f, double scale = 1.0) {
  SteeringVector v;
  v.values = fixtures::gaussian(rng, d, scale);
  v.k = 1;
  v.concept_id = concept_id;
  v.format = f;
  v.n_prompts = 1;
  return v;
}

std::vector<SteerPrompt> prompts_for(const Model& m) {
  std::vector<SteerPrompt> out;
  const char* texts[] = {"hot: cold\nbig:", "up: down\nleft:", "day: night\nold:"};
  for (int i = 0; i < 3; ++i)
    out.push_back({"p" + std::to_string(i), m.tokenizer().encode(texts[i]), m.tokenizer().first_token("a"),
                   m.tokenizer().first_token("b")});
  return out;
}

}  // namespace

TEST_CASE("KL matches the closed form and is asymmetric") {
  const std::vector<double> p{0.5, 0.3, 0.2}, q{0.4, 0.4, 0.2};
  const double expect = 0.5 * std::log(0.5 / 0.4) + 0.3 * std::log(0.3 / 0.4);
  CHECK(std::abs(kl_divergence(p, q) - expect) < 1e-12);
  CHECK(kl_divergence(q, p) != doctest::Approx(kl_divergence(p, q)));
  CHECK(kl_divergence(p, p) == 0.0);
  CHECK_THROWS_AS(kl_divergence(p, std::vector<double>{0.5, 0.5}), Error);
}

TEST_CASE("hyperparameter search breaks ties toward smaller K then smaller alpha") {
  const auto flat = hyperparameter_search({10, 1, 5}, {3.0, 1.0}, [](int, double) { return 0.25; });
  CHECK(flat.best_k == 1);
  CHECK(flat.best_alpha == 1.0);
  CHECK(flat.grid.size() == 6);
  const auto peak = hyperparameter_search({1, 3, 5}, {1.0, 3.0, 5.0}, [](int k, double a) {
    return -std::abs(k - 3) - std::abs(a - 5.0);
  });
  CHECK(peak.best_k == 3);
  CHECK(peak.best_alpha == 5.0);
  const auto one = hyperparameter_search({4}, {2.0}, [](int, double) { return -1.0; });
  CHECK(one.best_k == 4);
  CHECK_THROWS_AS(hyperparameter_search({}, {1.0}, [](int, double) { return 0.0; }), Error);
}

TEST_CASE("zero-strength steering leaves every probability unchanged") {
  const Model m = random_model(fixtures::small_shape(), 11);
  Rng rng(2);
  const auto v = random_vector(rng, 32, "antonym", Format::OE_EN);
  const auto out = steer_sweep(m, prompts_for(m), v, {0, 1}, 0.0);
  REQUIRE(out.size() == 6);
  for (const auto& o : out) {
    CHECK(o.delta_p == 0.0);
    CHECK(o.p_after == o.p_before);
  }
}

TEST_CASE("steering outcomes are ordered and their deltas sum to zero") {
  const Model m = random_model(fixtures::small_shape(), 12);
  Rng rng(3);
  const auto v = random_vector(rng, 32, "antonym", Format::OE_EN, 3.0);
  SweepOptions opts;
  opts.markers = {m.tokenizer().first_token("(")};
  const auto out = steer_sweep(m, prompts_for(m), v, {1, 0}, 2.0, opts);
  REQUIRE(out.size() == 6);
  CHECK(out[0].prompt_id == "p0");
  CHECK(out[0].layer == 0);
  CHECK(out[1].layer == 1);
  for (const auto& o : out) {
    CHECK(std::abs(o.delta_sum) < 1e-5);
    CHECK(o.delta_p >= -1.0);
    CHECK(o.delta_p <= 1.0);
    CHECK(o.marker_deltas.size() == 1);
    CHECK(o.top_deltas.size() == 10);
    CHECK(o.competitor_delta.has_value());
  }
  const auto layers = summarize_by_layer(out);
  REQUIRE(layers.size() == 2);
  CHECK(layers[0].n == 3);
  CHECK(max_layer_effect(out) == std::max(layers[0].mean_delta_p, layers[1].mean_delta_p));
}

TEST_CASE("KL consistency is zero when both vectors match") {
  const Model m = random_model(fixtures::small_shape(), 13);
  Rng rng(5);
  auto id = random_vector(rng, 32, "antonym", Format::OE_EN);
  auto ood = id;
  ood.format = Format::MC;
  const auto prompts = prompts_for(m);
  const auto outcomes = steer_sweep(m, prompts, id, {0, 1}, 1.0);
  const auto s = kl_consistency(m, prompts, id, ood, outcomes, 1.0);
  CHECK(std::abs(s.mean_kl) <= 1e-8);
  CHECK(s.fewer_layers);
  CHECK(s.layers == std::vector<int>{0, 1});
  auto other = random_vector(rng, 32, "antonym", Format::MC);
  CHECK(kl_consistency(m, prompts, id, other, outcomes, 1.0).mean_kl > 0.0);
  other.concept_id = "synonym";
  CHECK_THROWS_AS(kl_consistency(m, prompts, id, other, outcomes, 1.0), Error);
}
