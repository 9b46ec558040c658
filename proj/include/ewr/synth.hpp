#pragma once

#include <cstdint>
#include <vector>

#include "ewr/dataset.hpp"

namespace ewr::synth {

// Synthetic grounded-dialogue corpus over a closed 64-word vocabulary.
// Knowledge is a set of subject/relation/object fact strings; responses are
// either extractive (the fact copied contiguously) or abstractive (the fact
// words scattered between fillers). A configurable fraction of responses has
// the object swapped for a "lure" word that never occurs in any knowledge or
// context, so the lexical hallucination rate is exact ground truth.
struct CorpusConfig {
  int n_examples = 500;
  double corruption_rate = 0.3;     // fraction of hallucinated responses
  double abstractive_fraction = 0.5;
  double two_fact_fraction = 0.5;   // knowledge with a distractor fact
  std::uint64_t seed = 0;
};

std::vector<data::TextExample> generate(const CorpusConfig& config);

// The fixed vocabulary the generator draws from (specials first).
const std::vector<std::string>& vocabulary_words();
data::Vocab make_vocab();

// Knowledge and response roles swapped (channel-model training data).
std::vector<data::TextExample> swap_roles(
    const std::vector<data::TextExample>& dataset);

// Knowledge blanked out (knowledge-free fluency-LM training data).
std::vector<data::TextExample> strip_knowledge(
    const std::vector<data::TextExample>& dataset);

}  // namespace ewr::synth
