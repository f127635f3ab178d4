#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "headlens/error.hpp"
#include "headlens/rng.hpp"

namespace headlens {

class Tokenizer;

inline const std::array<std::string, 7> kConcepts = {
    "antonym", "categorical", "causal", "synonym", "translation", "present_past", "singular_plural"};

bool is_known_concept(const std::string& id);

enum class Format { OE_EN, OE_L2, MC };

std::string to_string(Format f);
Format parse_format(const std::string& s);
inline constexpr std::array<Format, 3> kFormats = {Format::OE_EN, Format::OE_L2, Format::MC};
/// "open_ended" for both OE formats, "multiple_choice" for MC.
std::string question_type(Format f);

struct WordPair {
  std::string input;
  std::string output;
  bool operator==(const WordPair&) const = default;
};

struct FilterReport {
  std::size_t total = 0;
  std::size_t dropped_underscore_or_digit = 0;
  std::size_t dropped_spaces = 0;
  std::size_t dropped_duplicate = 0;
  std::size_t lowercased = 0;
  std::size_t kept() const {
    return total - dropped_underscore_or_digit - dropped_spaces - dropped_duplicate;
  }
};

struct ConceptPairs {
  std::string concept_id;
  std::vector<WordPair> pairs;
  FilterReport report;
};

/// Applies the pair filters (no underscores or digits, at most one space per
/// side, lowercase, unique inputs keeping the first occurrence).
ConceptPairs filter_pairs(std::string concept_id, const std::vector<WordPair>& raw);

/// Reads `{concept, pairs: [{input, output}]}` and filters it.
ConceptPairs load_concept_pairs(const std::filesystem::path& path);

using TranslationTable = std::map<std::string, std::string>;
TranslationTable load_translation_table(const std::filesystem::path& path);

/// Second-language version of a concept: both sides translated through the
/// table; pairs with an untranslatable side are dropped. For the translation
/// concept itself the pair is reversed (second language -> English).
ConceptPairs localize_pairs(const ConceptPairs& pairs, const TranslationTable& table);

/// One demonstration or query. `options`/`answer_index` are set for MC only.
struct Example {
  std::string input;
  std::string output;
  std::vector<std::string> options;
  int answer_index = -1;
  bool operator==(const Example&) const = default;
};

struct PromptSpec {
  std::string prompt_id;
  std::string concept_id;
  Format format = Format::OE_EN;
  std::vector<Example> demos;
  Example query;

  /// What the model should emit next: the output word, or the option letter for MC.
  std::string gold() const;
};

std::string dataset_id(const std::string& concept_id, Format f);

inline int default_shots(Format f) { return f == Format::MC ? 3 : 5; }

/// Samples `n_prompts` prompts; demonstrations and query are distinct pairs
/// within a prompt, demo outputs never equal the gold. MC options are three
/// other outputs of the same concept plus the answer at a random position.
std::vector<PromptSpec> build_dataset(const ConceptPairs& pairs, Format format, int n_prompts,
                                      int shots, std::uint64_t seed);

std::string render_prompt(const PromptSpec& spec);

/// Replaces every demonstration input with a distinct pool word, leaving
/// outputs, options and query untouched.
PromptSpec corrupt_prompt(const PromptSpec& spec, const std::vector<std::string>& pool,
                          std::uint64_t seed);

/// Inputs of every concept other than `concept_id`, deduplicated and sorted.
std::vector<std::string> distractor_pool(const std::vector<ConceptPairs>& all,
                                         const std::string& concept_id);

struct AmbiguousPromptSpec {
  std::string prompt_id;
  std::string primary_concept_id;
  std::string secondary_concept_id = "translation";
  std::vector<WordPair> demos;  // 3 primary, then 2 secondary
  std::string query;
  std::string gold;        // primary answer
  std::string competitor;  // secondary (translation) answer for the query

  PromptSpec as_prompt() const;
};

/// Interleaves 3 primary demonstrations with 2 translation demonstrations.
/// The competitor answer is the query's translation from `translation`, or
/// from `table` when the pairs do not contain it.
std::vector<AmbiguousPromptSpec> build_ambiguous_dataset(const ConceptPairs& primary,
                                                         const ConceptPairs& translation,
                                                         const TranslationTable& table, int n_prompts,
                                                         std::uint64_t seed);

/// Query-only prompt for zero-shot steering.
PromptSpec zero_shot(const AmbiguousPromptSpec& spec);

/// First tokenizer token of the gold string; throws when it maps to unk.
int gold_token(const Tokenizer& tok, const std::string& gold);

}  // namespace headlens
