#include "headlens/toy.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "headlens/rng.hpp"

namespace headlens {

Tokenizer char_tokenizer() {
  std::vector<std::string> tokens = {"<bos>", "<unk>", "\n"};
  for (char c = 0x20; c < 0x7f; ++c) tokens.emplace_back(1, c);
  return Tokenizer(std::move(tokens), "<bos>", "<unk>");
}

Model random_model(ModelConfig shape, std::uint64_t seed) {
  Tokenizer tok = char_tokenizer();
  shape.vocab_size = tok.size();
  shape.validate();
  Rng rng(seed);
  WeightMap w;
  for (const auto& spec : tensor_layout(shape)) {
    std::size_t n = 1;
    for (int s : spec.shape) n *= s;
    std::vector<float> v(n);
    const bool is_norm = spec.name.find("ln") != std::string::npos;
    const bool is_bias = spec.name.find(".b_") != std::string::npos || spec.name.ends_with(".bias");
    const double fan_in = spec.shape.size() == 2 ? spec.shape[1] : 1;
    for (auto& x : v) {
      if (is_norm && !is_bias) x = static_cast<float>(1.0 + 0.1 * rng.normal());
      else if (is_bias) x = static_cast<float>(0.02 * rng.normal());
      else if (spec.name == "tok_embed" || spec.name == "pos_embed") x = static_cast<float>(rng.normal());
      else x = static_cast<float>(rng.normal() / std::sqrt(fan_in));
    }
    w.emplace(spec.name, std::move(v));
  }
  return Model::from_weights(shape, std::move(w), std::move(tok));
}

// ---------------------------------------------------------------------------
// Planted model.
//
// Residual features (one block of dimensions each):
//   token identity and flags written by the embedding, a recency coordinate
//   written by the position embedding, and subspaces written by specific
//   heads and the layer-2 MLP. RMSNorm uses a large epsilon with a matching
//   gain, so every norm is the identity to within ~1e-5 and the wiring below
//   can be reasoned about linearly.
//
//   L0H0  previous-marker head: each token attends to the most recent
//         structural token and copies whether it was a question marker or
//         which option marker it was.
//   L1H0  gather head: most recent question word -> its input-concept
//         membership and language ("pair" subspace).
//   L1H1  fetch head: same pattern, copies the word identity (query slot).
//   L1H3-7 concept heads: attend to output words, write their output-concept
//         membership through a fixed random map; read by nothing.
//   L2H0  designated head: at the final token attends to demonstration
//         terminators and writes the concept of the pairs it finds plus a
//         format code.
//   L2H1-4 helpers: the designated head scaled down.
//   L2 MLP one unit per (concept, query word): fires on task + query match
//         and writes the answer identity into the answer subspace.
//   L3H0  option head: matches the answer identity against option words and
//         copies that option's letter.

namespace {

constexpr int kLayers = 4;
constexpr int kHeads = 8;
constexpr int kDHead = 48;
constexpr int kD = kHeads * kDHead;
constexpr int kW = 44;  // word identity width
constexpr int kC = 7;   // concepts
constexpr int kCv = 12;
constexpr int kMaxSeq = 256;
constexpr float kEps = 1e4f;
constexpr float kPosScale = 1.0f / 16.0f;  // position feature = j / 16

struct Dims {
  int next = 0;
  int take(int n) {
    int s = next;
    next += n;
    return s;
  }
  int konst = take(1), pos = take(1), word = take(1), qmark = take(1), term = take(1), end = take(1),
      mc = take(1), optmark = take(4), bos = take(1), en = take(1), l2 = take(1), id = take(kW),
      inmem = take(kC), outmem = take(kC), prevq = take(1), prevopt = take(4), pair_in = take(kC),
      pair_lang = take(2), qid = take(kW), task = take(kC), format = take(3), scratch = take(kW),
      cv = take(kCv), letter_out = take(4);
};

// Mechanism constants; see the comment block above.
constexpr float kPrevStruct = 60.0f, kPrevRecency = 15.0f;     // per token
constexpr float kGatherFlag = 100.0f, kGatherRecency = 3.0f;
constexpr float kFvTerm = 30.0f, kFvRecency = 0.15f;
constexpr float kFormatGain = 2.0f;
constexpr float kLangCopy = 3.0f;
constexpr float kCvOut = 8.0f, kCvNoise = 0.3f;
constexpr float kCvRecency[5] = {0.0f, 0.05f, 0.1f, 0.2f, 0.3f};
constexpr float kHelperScale[4] = {0.04f, 0.03f, 0.02f, 0.015f};
constexpr float kMatch = 3.0f, kPairBias = 0.25f, kThreshold = 3.2f;
constexpr float kOptQuery = 20.0f, kOptRecency = 0.5f, kOptEnd = 5.0f;
constexpr float kWordLogit = 20.0f, kLetterLogit = 30.0f, kLetterBias = 0.0f;

class Wiring {
 public:
  Wiring(const ModelConfig& cfg) : cfg_(cfg) {
    for (const auto& spec : tensor_layout(cfg)) {
      std::size_t n = 1;
      for (int s : spec.shape) n *= s;
      w_[spec.name].assign(n, 0.0f);
    }
  }
  std::vector<float>& operator[](const std::string& name) { return w_.at(name); }

  // Attention pieces: head dimension `i` of head (l, h).
  void q(int l, int h, int i, int feat, float v) { attn(l, "wq", h, i, feat) += v * std::sqrt(float(kDHead)); }
  void k(int l, int h, int i, int feat, float v) { attn(l, "wk", h, i, feat) += v; }
  void v(int l, int h, int i, int feat, float v) { attn(l, "wv", h, i, feat) += v; }
  void o(int l, int h, int i, int feat, float v) {
    w_.at(blk(l) + "attn.wo")[static_cast<std::size_t>(feat) * kD + h * kDHead + i] += v;
  }
  /// Copies feature `from` through head dim `i` into feature `to`.
  void copy(int l, int h, int i, int from, int to, float gain) {
    v(l, h, i, from, 1.0f);
    o(l, h, i, to, gain);
  }

  WeightMap take() { return std::move(w_); }

 private:
  static std::string blk(int l) { return "blocks." + std::to_string(l) + "."; }
  float& attn(int l, const char* m, int h, int i, int feat) {
    return w_.at(blk(l) + "attn." + m)[static_cast<std::size_t>(h * kDHead + i) * kD + feat];
  }
  ModelConfig cfg_;
  WeightMap w_;
};

/// Unit vectors, exactly orthogonal to every earlier word that shares a group.
std::map<std::string, std::vector<float>> identities(const std::vector<std::string>& words,
                                                     const std::vector<std::set<std::string>>& groups,
                                                     Rng& rng) {
  std::map<std::string, std::set<std::string>> neighbours;
  for (const auto& g : groups)
    for (const auto& a : g)
      for (const auto& b : g)
        if (a != b) neighbours[a].insert(b);
  std::map<std::string, std::vector<double>> out;
  for (const auto& w : words) {
    std::vector<double> v(kW);
    for (auto& x : v) x = rng.normal();
    // Gram-Schmidt against already-placed neighbours (twice for stability).
    std::vector<const std::vector<double>*> basis;
    for (const auto& n : neighbours[w]) {
      auto it = out.find(n);
      if (it != out.end()) basis.push_back(&it->second);
    }
    // Neighbours are orthonormal among themselves only within a group, so
    // orthonormalize the neighbour set first.
    std::vector<std::vector<double>> ortho;
    for (auto* b : basis) {
      std::vector<double> u = *b;
      for (int pass = 0; pass < 2; ++pass)
        for (const auto& e : ortho) {
          double d = 0;
          for (int i = 0; i < kW; ++i) d += u[i] * e[i];
          for (int i = 0; i < kW; ++i) u[i] -= d * e[i];
        }
      double n = 0;
      for (double x : u) n += x * x;
      if (n > 1e-10) {
        for (auto& x : u) x /= std::sqrt(n);
        ortho.push_back(std::move(u));
      }
      if (static_cast<int>(ortho.size()) >= kW - 1) break;
    }
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& e : ortho) {
        double d = 0;
        for (int i = 0; i < kW; ++i) d += v[i] * e[i];
        for (int i = 0; i < kW; ++i) v[i] -= d * e[i];
      }
    double n = 0;
    for (double x : v) n += x * x;
    for (auto& x : v) x /= std::sqrt(n);
    out.emplace(w, std::move(v));
  }
  std::map<std::string, std::vector<float>> f;
  for (auto& [w, v] : out) f.emplace(w, std::vector<float>(v.begin(), v.end()));
  return f;
}

}  // namespace

PlantedModel planted_model(const std::vector<ConceptPairs>& concepts, const TranslationTable& table,
                           std::uint64_t seed) {
  Rng rng(seed);
  const Dims D;
  if (D.next > kD) throw Error("planted model: feature layout exceeds the residual width");

  auto concept_index = [&](const std::string& id) {
    for (int c = 0; c < kC; ++c)
      if (kConcepts[c] == id) return c;
    throw Error("planted model: unknown concept '" + id + "'");
  };

  // --- words and their memberships -------------------------------------
  struct WordInfo {
    bool en = false, l2 = false;
    std::array<float, kC> in{}, out{};
  };
  std::map<std::string, WordInfo> words;
  std::vector<std::set<std::string>> groups;
  struct Unit {
    int concept_idx;
    std::string query, answer;
    bool operator<(const Unit& o) const {
      return std::tie(concept_idx, query, answer) < std::tie(o.concept_idx, o.query, o.answer);
    }
  };
  std::set<Unit> units;
  bool have_translation = false;
  for (const auto& cp : concepts) {
    const int c = concept_index(cp.concept_id);
    have_translation |= cp.concept_id == "translation";
    const ConceptPairs l2 = localize_pairs(cp, table);
    for (const auto* set : {&cp, &l2}) {
      const bool is_l2 = set == &l2;
      std::set<std::string> ins, outs;
      for (const auto& p : set->pairs) {
        // The reversed translation concept has second-language inputs and
        // English outputs.
        const bool in_l2 = is_l2;
        const bool out_l2 = cp.concept_id == "translation" ? !is_l2 : is_l2;
        auto& wi = words[p.input];
        (in_l2 ? wi.l2 : wi.en) = true;
        wi.in[c] = 1.0f;
        auto& wo = words[p.output];
        (out_l2 ? wo.l2 : wo.en) = true;
        wo.out[c] = 1.0f;
        ins.insert(p.input);
        outs.insert(p.output);
        units.insert({c, p.input, p.output});
      }
      groups.push_back(ins);
      groups.push_back(outs);
    }
  }
  // Translation units for every English input, so mixed prompts can be
  // answered by translating the query.
  if (have_translation) {
    const int tr = concept_index("translation");
    std::vector<std::string> en_inputs;
    for (const auto& cp : concepts)
      for (const auto& p : cp.pairs) en_inputs.push_back(p.input);
    for (const auto& q : en_inputs) {
      auto it = table.find(q);
      if (it == table.end()) continue;
      words[q].en = true;
      words[it->second].l2 = true;
      units.insert({tr, q, it->second});
    }
  }

  // --- vocabulary ---------------------------------------------------------
  const std::vector<std::string> structural = {"Q: ",   "\nA: ",  "\n\n",  "Instruction: Q: ", " A: ?\n",
                                               "(a) ",  "\n(b) ", "\n(c) ", "\n(d) ",           "\nResponse: (",
                                               ")\n\n"};
  std::vector<std::string> vocab = {"<bos>", "<unk>"};
  std::set<std::string> seen(vocab.begin(), vocab.end());
  for (const auto& s : structural)
    if (seen.insert(s).second) vocab.push_back(s);
  const Tokenizer chars = char_tokenizer();
  for (const auto& t : chars.tokens())
    if (seen.insert(t).second) vocab.push_back(t);
  std::vector<std::string> word_list;
  for (const auto& [w, info] : words)
    if (seen.insert(w).second) {
      vocab.push_back(w);
      word_list.push_back(w);
    }
  const auto ids = identities(word_list, groups, rng);

  ModelConfig cfg;
  cfg.n_layers = kLayers;
  cfg.n_heads = kHeads;
  cfg.d_model = kD;
  cfg.d_head = kDHead;
  cfg.d_mlp = static_cast<int>(units.size());
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.max_seq_len = kMaxSeq;
  cfg.norm_epsilon = kEps;
  cfg.norm = NormKind::rmsnorm;
  cfg.positional = PositionalKind::learned;
  cfg.activation = Activation::relu;
  cfg.tie_embeddings = false;

  Wiring W(cfg);
  const float gain = std::sqrt(kEps);
  for (int l = 0; l < kLayers; ++l) {
    std::fill(W["blocks." + std::to_string(l) + ".ln1.weight"].begin(),
              W["blocks." + std::to_string(l) + ".ln1.weight"].end(), gain);
    std::fill(W["blocks." + std::to_string(l) + ".ln2.weight"].begin(),
              W["blocks." + std::to_string(l) + ".ln2.weight"].end(), gain);
  }
  std::fill(W["ln_f.weight"].begin(), W["ln_f.weight"].end(), gain);

  // --- embeddings -----------------------------------------------------------
  auto& emb = W["tok_embed"];
  auto put = [&](int tok, int feat, float v) { emb[static_cast<std::size_t>(tok) * kD + feat] = v; };
  for (int t = 0; t < cfg.vocab_size; ++t) {
    const std::string& s = vocab[t];
    put(t, D.konst, 1.0f);
    if (s == "<bos>") put(t, D.bos, 1.0f);
    if (s == "Q: " || s == "Instruction: Q: ") put(t, D.qmark, 1.0f);
    if (s == "\n\n" || s == ")\n\n") put(t, D.term, 1.0f);
    if (s == "\nA: " || s == "\nResponse: (") put(t, D.end, 1.0f);
    if (s == "Instruction: Q: " || s == " A: ?\n" || s == "\nResponse: (" || s == ")\n\n" || s == "(a) " ||
        s == "\n(b) " || s == "\n(c) " || s == "\n(d) ")
      put(t, D.mc, 1.0f);
    const char* opts[4] = {"(a) ", "\n(b) ", "\n(c) ", "\n(d) "};
    for (int i = 0; i < 4; ++i)
      if (s == opts[i]) put(t, D.optmark + i, 1.0f);
    auto it = words.find(s);
    if (it != words.end()) {
      put(t, D.word, 1.0f);
      if (it->second.en) put(t, D.en, 1.0f);
      if (it->second.l2) put(t, D.l2, 1.0f);
      for (int c = 0; c < kC; ++c) {
        put(t, D.inmem + c, it->second.in[c]);
        put(t, D.outmem + c, it->second.out[c]);
      }
      const auto& e = ids.at(s);
      for (int i = 0; i < kW; ++i) put(t, D.id + i, e[i]);
    }
  }
  auto& pos = W["pos_embed"];
  for (int j = 0; j < kMaxSeq; ++j) pos[static_cast<std::size_t>(j) * kD + D.pos] = j * kPosScale;
  const float per_token = 1.0f / kPosScale;  // key weight on `pos` for a slope of 1 per token

  PlantedLayout layout;

  // --- L0H0: previous structural token --------------------------------------
  W.q(0, 0, 0, D.konst, 1.0f);
  W.k(0, 0, 0, D.konst, kPrevStruct);
  W.k(0, 0, 0, D.word, -kPrevStruct);
  W.q(0, 0, 1, D.konst, 1.0f);
  W.k(0, 0, 1, D.pos, kPrevRecency * per_token);
  W.copy(0, 0, 0, D.qmark, D.prevq, 1.0f);
  for (int i = 0; i < 4; ++i) W.copy(0, 0, 1 + i, D.optmark + i, D.prevopt + i, 1.0f);
  layout.support_heads.push_back({0, 0});

  // --- L1H0 gather, L1H1 fetch: most recent question word --------------------
  for (int h : {0, 1}) {
    W.q(1, h, 0, D.konst, 1.0f);
    W.k(1, h, 0, D.prevq, kGatherFlag);
    W.k(1, h, 0, D.word, kGatherFlag);  // the question marker itself also carries prevq
    W.q(1, h, 1, D.konst, 1.0f);
    W.k(1, h, 1, D.pos, kGatherRecency * per_token);
  }
  // Value dims may reuse the query/key dims: the three projections are separate.
  for (int c = 0; c < kC; ++c) W.copy(1, 0, c, D.inmem + c, D.pair_in + c, 1.0f);
  W.copy(1, 0, kC, D.en, D.pair_lang, kLangCopy);
  W.copy(1, 0, kC + 1, D.l2, D.pair_lang + 1, kLangCopy);
  for (int i = 0; i < kW; ++i) W.copy(1, 1, i, D.id + i, D.qid + i, 1.0f);
  layout.support_heads.push_back({1, 0});
  layout.support_heads.push_back({1, 1});

  // --- L1H3..7: concept heads --------------------------------------------
  for (int n = 0; n < 5; ++n) {
    const int h = 3 + n;
    W.q(1, h, 0, D.konst, 1.0f);
    for (int c = 0; c < kC; ++c) W.k(1, h, 0, D.outmem + c, kCvOut);
    W.q(1, h, 1, D.konst, 1.0f);
    W.k(1, h, 1, D.pos, kCvRecency[n] * per_token);
    for (int i = 0; i < kCv; ++i) {
      for (int c = 0; c < kC; ++c) W.v(1, h, i, D.outmem + c, static_cast<float>(rng.normal()));
      for (int t = 0; t < kW; ++t) W.v(1, h, i, D.id + t, static_cast<float>(kCvNoise * rng.normal() / std::sqrt(kW)));
      W.o(1, h, i, D.cv + i, 1.0f);
    }
    layout.cv_heads.push_back({1, h});
  }

  // --- L2H0 designated head and L2H1..4 helpers --------------------------
  for (int n = 0; n < 5; ++n) {
    const float s = n == 0 ? 1.0f : kHelperScale[n - 1];
    W.q(2, n, 0, D.konst, 1.0f);
    W.k(2, n, 0, D.term, kFvTerm);
    W.q(2, n, 1, D.konst, 1.0f);
    W.k(2, n, 1, D.pos, kFvRecency * per_token);
    for (int c = 0; c < kC; ++c) W.copy(2, n, c, D.pair_in + c, D.task + c, s);
    W.copy(2, n, kC, D.pair_lang, D.format, s * kFormatGain / kLangCopy);
    W.copy(2, n, kC + 1, D.pair_lang + 1, D.format + 1, s * kFormatGain / kLangCopy);
    W.copy(2, n, kC + 2, D.mc, D.format + 2, s * kFormatGain);
    if (n == 0) layout.fv_head = {2, 0};
    else layout.helper_heads.push_back({2, n});
  }

  // --- L2 MLP lookup units --------------------------------------------------
  {
    auto& w_in = W["blocks.2.mlp.w_in"];
    auto& b_in = W["blocks.2.mlp.b_in"];
    auto& w_out = W["blocks.2.mlp.w_out"];
    int u = 0;
    for (const auto& unit : units) {
      const auto& eq = ids.at(unit.query);
      const auto& ey = ids.at(unit.answer);
      float* row = &w_in[static_cast<std::size_t>(u) * kD];
      for (int i = 0; i < kW; ++i) row[D.qid + i] = kMatch * eq[i];
      row[D.task + unit.concept_idx] = 1.0f;
      row[D.pair_in + unit.concept_idx] = kPairBias;
      b_in[u] = -kThreshold;
      for (int i = 0; i < kW; ++i) w_out[static_cast<std::size_t>(D.scratch + i) * cfg.d_mlp + u] = ey[i];
      ++u;
    }
  }

  // --- L3H0 option head -------------------------------------------------------
  for (int i = 0; i < kW; ++i) {
    W.q(3, 0, i, D.scratch + i, kOptQuery);
    W.k(3, 0, i, D.id + i, 1.0f);
  }
  W.q(3, 0, kW, D.konst, 1.0f);
  W.k(3, 0, kW, D.pos, kOptRecency * per_token);
  W.q(3, 0, kW + 1, D.konst, 1.0f);
  W.k(3, 0, kW + 1, D.end, kOptEnd);
  for (int i = 0; i < 4; ++i) W.copy(3, 0, i, D.prevopt + i, D.letter_out + i, 1.0f);
  layout.support_heads.push_back({3, 0});

  // --- unembedding ----------------------------------------------------------
  auto& head = W["lm_head"];
  for (int t = 0; t < cfg.vocab_size; ++t) {
    float* row = &head[static_cast<std::size_t>(t) * kD];
    const std::string& s = vocab[t];
    if (auto it = ids.find(s); it != ids.end())
      for (int i = 0; i < kW; ++i) row[D.scratch + i] = kWordLogit * it->second[i];
    if (s.size() == 1 && s[0] >= 'a' && s[0] <= 'd') {
      row[D.letter_out + (s[0] - 'a')] = kLetterLogit;
      row[D.konst] = kLetterBias;
    }
  }

  PlantedModel out{Model::from_weights(cfg, W.take(), Tokenizer(vocab, "<bos>", "<unk>")), layout};
  return out;
}

}  // namespace headlens
