#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "headlens/error.hpp"
#include "headlens/runtime.hpp"
#include "headlens/toy.hpp"

using namespace headlens;

namespace {

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST_CASE("tokenizer uses greedy longest match and maps unknown bytes to unk") {
  Tokenizer tok({"<bos>", "<unk>", "a", "ab", "abc", "b", "c"}, "<bos>", "<unk>");
  CHECK(tok.encode("abcab") == std::vector<int>{0, 4, 3});
  CHECK(tok.encode("abz", false) == std::vector<int>{3, 1});
  CHECK(tok.first_token("cab") == 6);
  CHECK_THROWS_AS(Tokenizer({"a", "a"}), Error);
  Tokenizer strict({"a"});
  CHECK_THROWS_AS(strict.encode("b"), Error);
}

TEST_CASE("model round-trips through save and load") {
  const auto dir = fixtures::scratch("runtime_roundtrip");
  const Model m = random_model(fixtures::small_shape(), 1);
  m.save(dir / "m");
  const Model back = Model::load(dir / "m");
  const auto toks = m.tokenizer().encode("hot: cold\nup:");
  CHECK(m.forward(toks).logits == back.forward(toks).logits);
  CHECK(back.config().n_heads == 4);
}

TEST_CASE("corrupted weights are rejected by checksum") {
  const auto dir = fixtures::scratch("runtime_checksum");
  random_model(fixtures::small_shape(), 1).save(dir);
  {
    std::fstream f(dir / "weights.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(Model::load(dir), Error);
}

TEST_CASE("residual stream equals the sum of its parts") {
  for (auto norm : {NormKind::rmsnorm, NormKind::layernorm})
    for (auto pos : {PositionalKind::learned, PositionalKind::rope}) {
      auto shape = fixtures::small_shape(3);
      shape.norm = norm;
      shape.positional = pos;
      const Model m = random_model(shape, 2);
      const auto toks = m.tokenizer().encode("big: small\nfast:");
      const auto r = m.forward(toks, HookSet{.capture_heads = true, .capture_residuals = true});
      const auto& rec = *r.record;
      for (int l = 0; l < shape.n_layers; ++l) {
        std::vector<double> expect(rec.residual(l).begin(), rec.residual(l).end());
        for (int h = 0; h < shape.n_heads; ++h)
          for (int i = 0; i < shape.d_model; ++i) expect[i] += rec.head({l, h})[i];
        for (int i = 0; i < shape.d_model; ++i) expect[i] += rec.mlp(l)[i];
        for (int i = 0; i < shape.d_model; ++i)
          CHECK(rec.residual(l + 1)[i] == doctest::Approx(expect[i]).epsilon(1e-5));
      }
    }
}

TEST_CASE("resume from a trace is bit-identical to a full hooked pass") {
  const Model m = random_model(fixtures::small_shape(), 4);
  const auto toks = m.tokenizer().encode("cat: cats\ndog:");
  const auto tr = m.trace(toks);
  CHECK(tr.base().logits == m.forward(toks).logits);
  Rng rng(9);
  HookSet hooks;
  hooks.patches.push_back({{1, 2}, fixtures::gaussian(rng, 32)});
  hooks.injections.push_back({0, fixtures::gaussian(rng, 32), 2.5f});
  CHECK(m.resume(tr, hooks).logits == m.forward(toks, hooks).logits);
}

TEST_CASE("self-patching and zero-alpha injection change nothing") {
  const Model m = random_model(fixtures::small_shape(), 5);
  const auto toks = m.tokenizer().encode("one: two\nthree:");
  const auto clean = m.forward(toks, HookSet{.capture_heads = true});
  const auto& rec = *clean.record;
  const std::vector<float> own(rec.head({1, 3}).begin(), rec.head({1, 3}).end());
  CHECK(max_abs_diff(m.forward_with_patch(toks, {{{1, 3}, own}}), clean.probs) == 0.0);
  Rng rng(1);
  CHECK(max_abs_diff(m.forward_with_injection(toks, 1, fixtures::gaussian(rng, 32), 0.0f), clean.probs) == 0.0);
}

TEST_CASE("hooks are validated") {
  const Model m = random_model(fixtures::small_shape(), 6);
  const auto toks = m.tokenizer().encode("a:");
  HookSet bad_len;
  bad_len.patches.push_back({{0, 0}, std::vector<float>(3)});
  CHECK_THROWS_AS(m.forward(toks, bad_len), Error);
  HookSet bad_head;
  bad_head.patches.push_back({{5, 0}, std::vector<float>(32)});
  CHECK_THROWS_AS(m.forward(toks, bad_head), Error);
  HookSet bad_layer;
  bad_layer.injections.push_back({2, std::vector<float>(32), 1.0f});
  CHECK_THROWS_AS(m.forward(toks, bad_layer), Error);
  HookSet bad_alpha;
  bad_alpha.injections.push_back({0, std::vector<float>(32), NAN});
  CHECK_THROWS_AS(m.forward(toks, bad_alpha), Error);
  CHECK_THROWS_AS(m.forward(std::vector<int>{}), Error);
}

TEST_CASE("probabilities are normalized") {
  const Model m = random_model(fixtures::small_shape(), 7);
  const auto r = m.forward(m.tokenizer().encode("hello"));
  double s = 0;
  for (float p : r.probs) s += p;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
}
