#pragma once

#include <cstdint>
#include <vector>

#include "headlens/runtime.hpp"
#include "headlens/tasks.hpp"

namespace headlens {

/// Printable ASCII plus newline, with "<bos>" and "<unk>".
Tokenizer char_tokenizer();

/// Gaussian-initialized model over char_tokenizer(); `shape.vocab_size` is
/// replaced by the tokenizer size.
Model random_model(ModelConfig shape, std::uint64_t seed);

/// Which heads of the planted model carry which mechanism.
struct PlantedLayout {
  HeadLocator fv_head;                    // reads the demonstration pairing, writes the task
  std::vector<HeadLocator> helper_heads;  // weak copies of fv_head
  std::vector<HeadLocator> cv_heads;      // format-invariant concept signal, causally unused
  std::vector<HeadLocator> support_heads; // routing: previous marker, query fetch, option letter
};

struct PlantedModel {
  Model model;
  PlantedLayout layout;
};

/// Hand-wired 4-layer model that solves the concept tasks in all three
/// formats through one designated head. Vocabulary covers every word of
/// `concepts`, their second-language forms and the translations of all inputs.
PlantedModel planted_model(const std::vector<ConceptPairs>& concepts, const TranslationTable& table,
                           std::uint64_t seed);

}  // namespace headlens
