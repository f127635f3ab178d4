#include "headlens/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "headlens/tokenizer.hpp"

namespace headlens {

namespace {

using json = nlohmann::json;

bool has_underscore_or_digit(const std::string& s) {
  return std::any_of(s.begin(), s.end(),
                     [](unsigned char c) { return c == '_' || std::isdigit(c); });
}

std::string ascii_lower(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::string numbered(const std::string& prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", i);
  return prefix + "/" + buf;
}

const char kLetters[] = {'a', 'b', 'c', 'd'};

}  // namespace

bool is_known_concept(const std::string& id) {
  return std::find(kConcepts.begin(), kConcepts.end(), id) != kConcepts.end();
}

std::string to_string(Format f) {
  switch (f) {
    case Format::OE_EN: return "OE_EN";
    case Format::OE_L2: return "OE_L2";
    case Format::MC: return "MC";
  }
  return "?";
}

Format parse_format(const std::string& s) {
  for (Format f : kFormats)
    if (to_string(f) == s) return f;
  throw Error("unknown format '" + s + "' (expected OE_EN, OE_L2 or MC)");
}

std::string question_type(Format f) { return f == Format::MC ? "multiple_choice" : "open_ended"; }

std::string dataset_id(const std::string& concept_id, Format f) {
  return concept_id + "/" + to_string(f);
}

ConceptPairs filter_pairs(std::string concept_id, const std::vector<WordPair>& raw) {
  ConceptPairs out;
  out.concept_id = std::move(concept_id);
  out.report.total = raw.size();
  std::set<std::string> seen;
  for (const auto& p : raw) {
    if (has_underscore_or_digit(p.input) || has_underscore_or_digit(p.output)) {
      ++out.report.dropped_underscore_or_digit;
      continue;
    }
    if (std::count(p.input.begin(), p.input.end(), ' ') > 1 ||
        std::count(p.output.begin(), p.output.end(), ' ') > 1) {
      ++out.report.dropped_spaces;
      continue;
    }
    WordPair lower{ascii_lower(p.input), ascii_lower(p.output)};
    if (!(lower == p)) ++out.report.lowercased;
    if (!seen.insert(lower.input).second) {
      ++out.report.dropped_duplicate;
      continue;
    }
    out.pairs.push_back(std::move(lower));
  }
  if (out.pairs.empty()) throw Error("concept '" + out.concept_id + "': no pairs left after filtering");
  return out;
}

ConceptPairs load_concept_pairs(const std::filesystem::path& path) {
  const json j = read_json(path);
  if (!j.is_object() || !j.contains("concept") || !j["concept"].is_string() || !j.contains("pairs") ||
      !j["pairs"].is_array())
    throw Error(path.string() + ": expected {\"concept\": string, \"pairs\": [...]}");
  std::vector<WordPair> raw;
  for (std::size_t i = 0; i < j["pairs"].size(); ++i) {
    const auto& r = j["pairs"][i];
    if (!r.is_object() || !r.contains("input") || !r.contains("output") || !r["input"].is_string() ||
        !r["output"].is_string())
      throw Error(path.string() + ": malformed record at /pairs/" + std::to_string(i));
    raw.push_back({r["input"].get<std::string>(), r["output"].get<std::string>()});
    if (raw.back().input.empty() || raw.back().output.empty())
      throw Error(path.string() + ": empty word at /pairs/" + std::to_string(i));
  }
  return filter_pairs(j["concept"].get<std::string>(), raw);
}

TranslationTable load_translation_table(const std::filesystem::path& path) {
  const json j = read_json(path);
  if (!j.is_object()) throw Error(path.string() + ": expected an object {word: translation}");
  TranslationTable t;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw Error(path.string() + ": translation of '" + k + "' is not a string");
    t.emplace(k, v.get<std::string>());
  }
  return t;
}

ConceptPairs localize_pairs(const ConceptPairs& pairs, const TranslationTable& table) {
  std::vector<WordPair> raw;
  for (const auto& p : pairs.pairs) {
    if (pairs.concept_id == "translation") {
      raw.push_back({p.output, p.input});
      continue;
    }
    auto x = table.find(p.input);
    auto y = table.find(p.output);
    if (x == table.end() || y == table.end()) continue;
    raw.push_back({x->second, y->second});
  }
  if (raw.empty())
    throw Error("concept '" + pairs.concept_id + "': translation table covers none of its pairs");
  return filter_pairs(pairs.concept_id, raw);
}

std::string PromptSpec::gold() const {
  if (format == Format::MC) {
    if (query.answer_index < 0 || query.answer_index > 3)
      throw Error("prompt '" + prompt_id + "': MC query has no answer index");
    return std::string(1, kLetters[query.answer_index]);
  }
  return query.output;
}

namespace {

void attach_options(Example& ex, const std::vector<std::string>& outputs, Rng& rng) {
  std::vector<std::string> others;
  for (const auto& o : outputs)
    if (o != ex.output) others.push_back(o);
  if (others.size() < 3) throw Error("multiple choice needs at least 4 distinct outputs");
  auto pick = rng.sample(others.size(), 3);
  ex.options.clear();
  for (auto i : pick) ex.options.push_back(others[i]);
  ex.answer_index = static_cast<int>(rng.below(4));
  ex.options.insert(ex.options.begin() + ex.answer_index, ex.output);
}

}  // namespace

std::vector<PromptSpec> build_dataset(const ConceptPairs& pairs, Format format, int n_prompts,
                                      int shots, std::uint64_t seed) {
  if (n_prompts < 1) throw Error("build_dataset: n_prompts must be >= 1");
  if (shots < 0) throw Error("build_dataset: shots must be >= 0");
  const auto& P = pairs.pairs;
  std::vector<std::string> outputs;
  {
    std::set<std::string> uniq;
    for (const auto& p : P)
      if (uniq.insert(p.output).second) outputs.push_back(p.output);
  }
  // Every query needs `shots` partners whose output differs from its gold.
  for (std::size_t q = 0; q < P.size(); ++q) {
    std::size_t ok = 0;
    for (std::size_t j = 0; j < P.size(); ++j)
      if (j != q && P[j].output != P[q].output) ++ok;
    if (ok < static_cast<std::size_t>(shots))
      throw Error("concept '" + pairs.concept_id + "': insufficient pairs for " +
                  std::to_string(shots) + "-shot prompts (" + std::to_string(P.size()) + " pairs)");
  }

  Rng rng(seed);
  std::vector<PromptSpec> out;
  out.reserve(n_prompts);
  for (int i = 0; i < n_prompts; ++i) {
    PromptSpec spec;
    spec.prompt_id = numbered(dataset_id(pairs.concept_id, format), i);
    spec.concept_id = pairs.concept_id;
    spec.format = format;
    const std::size_t q = rng.below(P.size());
    std::vector<std::size_t> cand;
    for (std::size_t j = 0; j < P.size(); ++j)
      if (j != q && P[j].output != P[q].output) cand.push_back(j);
    for (auto k : rng.sample(cand.size(), shots))
      spec.demos.push_back(Example{P[cand[k]].input, P[cand[k]].output, {}, -1});
    spec.query = Example{P[q].input, P[q].output, {}, -1};
    if (format == Format::MC) {
      for (auto& d : spec.demos) attach_options(d, outputs, rng);
      attach_options(spec.query, outputs, rng);
    }
    out.push_back(std::move(spec));
  }
  return out;
}

std::string render_prompt(const PromptSpec& spec) {
  std::string text;
  if (spec.format == Format::MC) {
    auto block = [&](const Example& ex, bool final) {
      if (ex.options.size() != 4 || ex.answer_index < 0 || ex.answer_index > 3)
        throw Error("prompt '" + spec.prompt_id + "': MC example needs 4 options and an answer");
      text += "Instruction: Q: " + ex.input + " A: ?\n";
      for (int i = 0; i < 4; ++i) text += std::string("(") + kLetters[i] + ") " + ex.options[i] + "\n";
      text += "Response: (";
      if (!final) text += std::string(1, kLetters[ex.answer_index]) + ")\n\n";
    };
    for (const auto& d : spec.demos) block(d, false);
    block(spec.query, true);
  } else {
    for (const auto& d : spec.demos) text += "Q: " + d.input + "\nA: " + d.output + "\n\n";
    text += "Q: " + spec.query.input + "\nA: ";
  }
  return text;
}

PromptSpec corrupt_prompt(const PromptSpec& spec, const std::vector<std::string>& pool,
                          std::uint64_t seed) {
  if (spec.demos.empty()) return spec;
  std::vector<std::string> usable;
  for (const auto& w : pool) {
    bool clash = w == spec.query.input;
    for (const auto& d : spec.demos) clash = clash || w == d.input;
    if (!clash) usable.push_back(w);
  }
  if (usable.size() < spec.demos.size())
    throw Error("corrupt_prompt: distractor pool has " + std::to_string(usable.size()) +
                " usable words, need " + std::to_string(spec.demos.size()));
  Rng rng(seed);
  auto pick = rng.sample(usable.size(), spec.demos.size());
  PromptSpec out = spec;
  for (std::size_t i = 0; i < out.demos.size(); ++i) out.demos[i].input = usable[pick[i]];
  return out;
}

std::vector<std::string> distractor_pool(const std::vector<ConceptPairs>& all,
                                         const std::string& concept_id) {
  std::set<std::string> own, words;
  for (const auto& c : all)
    for (const auto& p : c.pairs) (c.concept_id == concept_id ? own : words).insert(p.input);
  std::vector<std::string> out;
  for (const auto& w : words)
    if (!own.count(w)) out.push_back(w);
  return out;
}

PromptSpec AmbiguousPromptSpec::as_prompt() const {
  PromptSpec spec;
  spec.prompt_id = prompt_id;
  spec.concept_id = primary_concept_id;
  spec.format = Format::OE_EN;
  for (const auto& d : demos) spec.demos.push_back(Example{d.input, d.output, {}, -1});
  spec.query = Example{query, gold, {}, -1};
  return spec;
}

PromptSpec zero_shot(const AmbiguousPromptSpec& spec) {
  PromptSpec out = spec.as_prompt();
  out.prompt_id += "/zero_shot";
  out.demos.clear();
  return out;
}

std::vector<AmbiguousPromptSpec> build_ambiguous_dataset(const ConceptPairs& primary,
                                                         const ConceptPairs& translation,
                                                         const TranslationTable& table, int n_prompts,
                                                         std::uint64_t seed) {
  if (n_prompts < 1) throw Error("build_ambiguous_dataset: n_prompts must be >= 1");
  auto translate = [&](const std::string& w) -> std::optional<std::string> {
    for (const auto& p : translation.pairs)
      if (p.input == w) return p.output;
    auto it = table.find(w);
    if (it != table.end()) return it->second;
    return std::nullopt;
  };
  struct Candidate {
    std::size_t index;
    std::string competitor;
  };
  std::vector<Candidate> queries;
  for (std::size_t i = 0; i < primary.pairs.size(); ++i) {
    auto t = translate(primary.pairs[i].input);
    if (t && *t != primary.pairs[i].output) queries.push_back({i, *t});
  }
  if (queries.empty())
    throw Error("concept '" + primary.concept_id + "': uncoverable queries, no input has a translation");

  Rng rng(seed);
  std::vector<AmbiguousPromptSpec> out;
  for (int n = 0; n < n_prompts; ++n) {
    const Candidate& c = queries[rng.below(queries.size())];
    const WordPair& qp = primary.pairs[c.index];
    AmbiguousPromptSpec spec;
    spec.prompt_id = numbered(primary.concept_id + "/ambiguous", n);
    spec.primary_concept_id = primary.concept_id;
    spec.query = qp.input;
    spec.gold = qp.output;
    spec.competitor = c.competitor;

    std::vector<std::size_t> prim;
    for (std::size_t j = 0; j < primary.pairs.size(); ++j)
      if (j != c.index && primary.pairs[j].output != qp.output) prim.push_back(j);
    std::vector<std::size_t> sec;
    for (std::size_t j = 0; j < translation.pairs.size(); ++j)
      if (translation.pairs[j].input != qp.input && translation.pairs[j].output != c.competitor)
        sec.push_back(j);
    if (prim.size() < 3 || sec.size() < 2)
      throw Error("concept '" + primary.concept_id + "': insufficient pairs for ambiguous prompts");
    for (auto k : rng.sample(prim.size(), 3)) spec.demos.push_back(primary.pairs[prim[k]]);
    for (auto k : rng.sample(sec.size(), 2)) spec.demos.push_back(translation.pairs[sec[k]]);
    out.push_back(std::move(spec));
  }
  return out;
}

int gold_token(const Tokenizer& tok, const std::string& gold) {
  const int id = tok.first_token(gold);
  if (tok.unk() && id == *tok.unk()) throw Error("gold '" + gold + "' is absent from the vocabulary");
  return id;
}

}  // namespace headlens
