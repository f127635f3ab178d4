#include <doctest.h>

#include "fixtures.hpp"
#include "headlens/error.hpp"
#include "headlens/patching.hpp"

using namespace headlens;

namespace {

struct Bench {
  Model model = random_model(fixtures::small_shape(), 21);
  std::vector<DatasetRecords> clean;
  std::vector<PatchingDataset> corrupted;
  std::map<std::string, std::vector<CorruptedPrompt>> by_id;

  Bench() {
    const char* words[] = {"hot", "big", "up", "old", "wet", "far"};
    for (const std::string concept_id : {"antonym", "synonym"})
      for (Format f : {Format::OE_EN, Format::MC}) {
        const auto id = dataset_id(concept_id, f);
        DatasetRecords d{id, {}};
        PatchingDataset p{id, id, {}};
        for (int i = 0; i < 3; ++i) {
          const std::string text = concept_id + (f == Format::MC ? " (" : " ") + words[i] + ": " + words[i + 3];
          auto rec = *model.forward(model.tokenizer().encode(text), HookSet{.capture_heads = true}).record;
          d.records.push_back(rec);
          p.prompts.push_back({id + "/" + std::to_string(i), model.tokenizer().encode(text + " x:"),
                               model.tokenizer().first_token(words[i])});
        }
        by_id[id] = p.prompts;
        clean.push_back(std::move(d));
        corrupted.push_back(std::move(p));
      }
  }
};

}  // namespace

TEST_CASE("mean cache averages each head over a dataset") {
  Bench b;
  const auto cache = MeanActivationCache::build(b.model.config(), b.clean);
  const auto& recs = b.clean[0].records;
  const auto mean = cache.mean(b.clean[0].dataset_id, {1, 2});
  for (int i = 0; i < 32; ++i) {
    const double expect = (double(recs[0].head({1, 2})[i]) + recs[1].head({1, 2})[i] + recs[2].head({1, 2})[i]) / 3;
    CHECK(mean[i] == doctest::Approx(expect).epsilon(1e-6));
  }
  CHECK(cache.count(b.clean[0].dataset_id) == 3);
  CHECK_THROWS_AS(cache.mean("nope/OE_EN", {0, 0}), Error);
}

TEST_CASE("single-head CIE matches the all-heads sweep") {
  Bench b;
  const auto cache = MeanActivationCache::build(b.model.config(), b.clean);
  const auto& p = b.corrupted[1].prompts[0];
  const auto all = cie_all_heads(b.model, p, cache, b.corrupted[1].dataset_id);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 4; ++h)
      CHECK(all[l * 4 + h] == cie(b.model, p, {l, h}, cache.mean(b.corrupted[1].dataset_id, {l, h})));
}

TEST_CASE("AIE is the unweighted mean over datasets regardless of input order") {
  Bench b;
  const auto cache = MeanActivationCache::build(b.model.config(), b.clean);
  const auto a = aie(b.model, b.corrupted, cache);
  auto reversed = b.corrupted;
  std::reverse(reversed.begin(), reversed.end());
  CHECK(aie(b.model, reversed, cache, {}, 2).overall.values() == a.overall.values());
  REQUIRE(a.per_dataset.size() == 4);
  double sum = 0;
  for (const auto& [id, t] : a.per_dataset) sum += *t.get({0, 1});
  CHECK(*a.overall.get({0, 1}) == doctest::Approx(sum / 4).epsilon(1e-12));
}

TEST_CASE("excluded datasets are left out of AIE and reported") {
  Bench b;
  const auto cache = MeanActivationCache::build(b.model.config(), b.clean);
  const auto a = aie(b.model, b.corrupted, cache, {"synonym/MC"});
  CHECK(a.excluded == std::vector<std::string>{"synonym/MC"});
  CHECK(a.per_dataset.count("synonym/MC") == 0);
  CHECK(a.per_dataset.size() == 3);
}

TEST_CASE("cross-format AIE patches target prompts with source means") {
  Bench b;
  const auto cache = MeanActivationCache::build(b.model.config(), b.clean);
  const auto x = cross_format_aie(b.model, Format::OE_EN, Format::MC, b.by_id, cache);
  double sum = 0;
  for (const std::string c : {"antonym", "synonym"}) {
    double per = 0;
    for (const auto& p : b.by_id[dataset_id(c, Format::MC)])
      per += cie(b.model, p, {1, 0}, cache.mean(dataset_id(c, Format::OE_EN), {1, 0}));
    sum += per / 3;
  }
  CHECK(*x.table.get({1, 0}) == doctest::Approx(sum / 2).epsilon(1e-12));
  CHECK(x.source == Format::OE_EN);
  CHECK(x.target == Format::MC);
}
