#include <doctest.h>

#include <algorithm>
#include <set>

#include "fixtures.hpp"
#include "headlens/error.hpp"
#include "headlens/tasks.hpp"

using namespace headlens;

namespace {

ConceptPairs concept_of(const std::string& id) {
  return load_concept_pairs(fixtures::data_dir() / "concepts" / (id + ".json"));
}

}  // namespace

TEST_CASE("pair filters drop digits, underscores, multiword sides and duplicate inputs") {
  const auto cp = filter_pairs("antonym", {{"Hot", "cold"},
                                           {"big_one", "small"},
                                           {"a2", "b"},
                                           {"ice cream", "heat"},
                                           {"very big deal", "x"},
                                           {"hot", "warm"},
                                           {"up", "down"}});
  CHECK(cp.report.total == 7);
  CHECK(cp.report.dropped_underscore_or_digit == 2);
  CHECK(cp.report.dropped_spaces == 1);
  CHECK(cp.report.dropped_duplicate == 1);
  CHECK(cp.report.kept() == 3);
  REQUIRE(cp.pairs.size() == 3);
  CHECK(cp.pairs[0] == WordPair{"hot", "cold"});
  CHECK(cp.pairs[1] == WordPair{"ice cream", "heat"});
}

TEST_CASE("every concept file loads with enough pairs") {
  for (const auto& id : kConcepts) {
    const auto cp = concept_of(id);
    CHECK(cp.concept_id == id);
    CHECK(cp.pairs.size() >= 10);
  }
}

TEST_CASE("datasets are seeded, distinct within a prompt and never leak the gold") {
  const auto cp = concept_of("antonym");
  for (Format f : kFormats) {
    const auto a = build_dataset(cp, f, 6, default_shots(f), 42);
    const auto b = build_dataset(cp, f, 6, default_shots(f), 42);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(render_prompt(a[i]) == render_prompt(b[i]));
      std::set<std::string> inputs{a[i].query.input};
      for (const auto& d : a[i].demos) {
        inputs.insert(d.input);
        CHECK(d.output != a[i].query.output);
      }
      CHECK(inputs.size() == a[i].demos.size() + 1);
      CHECK(static_cast<int>(a[i].demos.size()) == default_shots(f));
    }
    CHECK(render_prompt(build_dataset(cp, f, 6, default_shots(f), 43)[0]) != render_prompt(a[0]));
  }
}

TEST_CASE("multiple-choice prompts carry four options with the answer letter as gold") {
  const auto cp = concept_of("synonym");
  for (const auto& p : build_dataset(cp, Format::MC, 8, 3, 1)) {
    REQUIRE(p.query.options.size() == 4);
    CHECK(p.query.options[p.query.answer_index] == p.query.output);
    CHECK(std::set<std::string>(p.query.options.begin(), p.query.options.end()).size() == 4);
    CHECK(p.gold() == std::string(1, "abcd"[p.query.answer_index]));
    const auto text = render_prompt(p);
    CHECK(text.substr(text.size() - 11) == "Response: (");
  }
}

TEST_CASE("open-ended prompts end with the answer cue") {
  const auto p = build_dataset(concept_of("antonym"), Format::OE_EN, 1, 2, 3)[0];
  const auto text = render_prompt(p);
  CHECK(text.rfind("Q: " + p.query.input + "\nA: ") == text.size() - p.query.input.size() - 7);
  CHECK(question_type(Format::OE_EN) == question_type(Format::OE_L2));
  CHECK(question_type(Format::OE_EN) != question_type(Format::MC));
}

TEST_CASE("second-language pairs translate both sides, and translation reverses") {
  const auto table = load_translation_table(fixtures::data_dir() / "translation_fr.json");
  const auto ant = concept_of("antonym");
  const auto l2 = localize_pairs(ant, table);
  CHECK(!l2.pairs.empty());
  for (const auto& p : l2.pairs) {
    const auto it = std::find_if(ant.pairs.begin(), ant.pairs.end(),
                                 [&](const WordPair& w) { return table.at(w.input) == p.input; });
    REQUIRE(it != ant.pairs.end());
    CHECK(table.at(it->output) == p.output);
  }
  const auto tr = concept_of("translation");
  const auto rev = localize_pairs(tr, table);
  REQUIRE(!rev.pairs.empty());
  CHECK(std::find(tr.pairs.begin(), tr.pairs.end(), WordPair{rev.pairs[0].output, rev.pairs[0].input}) !=
        tr.pairs.end());
}

TEST_CASE("corruption replaces only demonstration inputs") {
  const auto cp = concept_of("antonym");
  std::vector<ConceptPairs> all;
  for (const auto& id : kConcepts) all.push_back(concept_of(id));
  const auto pool = distractor_pool(all, "antonym");
  CHECK(std::is_sorted(pool.begin(), pool.end()));
  for (Format f : kFormats) {
    const auto p = build_dataset(cp, f, 1, default_shots(f), 8)[0];
    const auto c = corrupt_prompt(p, pool, 2);
    CHECK(c.query == p.query);
    for (std::size_t i = 0; i < p.demos.size(); ++i) {
      CHECK(c.demos[i].output == p.demos[i].output);
      CHECK(c.demos[i].options == p.demos[i].options);
      CHECK(c.demos[i].input != p.demos[i].input);
      CHECK(std::binary_search(pool.begin(), pool.end(), c.demos[i].input));
    }
    CHECK(render_prompt(corrupt_prompt(p, pool, 2)) == render_prompt(c));
  }
  CHECK_THROWS_AS(corrupt_prompt(build_dataset(cp, Format::OE_EN, 1, 5, 1)[0], {"x", "y"}, 1), Error);
}

TEST_CASE("ambiguous prompts hold three primary then two translation demonstrations") {
  const auto table = load_translation_table(fixtures::data_dir() / "translation_fr.json");
  const auto ant = concept_of("antonym"), tr = concept_of("translation");
  const auto amb = build_ambiguous_dataset(ant, tr, table, 5, 4);
  REQUIRE(amb.size() == 5);
  auto in = [](const ConceptPairs& cp, const WordPair& w) {
    return std::find(cp.pairs.begin(), cp.pairs.end(), w) != cp.pairs.end();
  };
  for (const auto& a : amb) {
    REQUIRE(a.demos.size() == 5);
    for (int i = 0; i < 3; ++i) CHECK(in(ant, a.demos[i]));
    for (int i = 3; i < 5; ++i) CHECK(in(tr, a.demos[i]));
    CHECK(!a.competitor.empty());
    CHECK(a.competitor != a.gold);
    const auto z = zero_shot(a);
    CHECK(z.demos.empty());
    CHECK(render_prompt(z) == "Q: " + a.query + "\nA: ");
  }
}
