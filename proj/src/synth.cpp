#include "ewr/synth.hpp"

#include <algorithm>
#include <cmath>

#include "ewr/error.hpp"
#include "ewr/rng.hpp"
#include "ewr/text.hpp"

namespace ewr::synth {

namespace {

const std::vector<std::string> kControls = {"<entailed>", "<non-entailed>",
                                            "<lo>", "<med>", "<hi>"};

// All filler words are in the metrics stopword list, so content tokens in a
// response are exactly the fact words.
const std::vector<std::string> kFillers = {
    "the", "a",     "is",   "it",   "and", "so",  "well", "oh",
    "yes", "really", "about", "tell", "me",  "what", "did",  "does"};

const std::vector<std::string> kRelations = {"likes", "owns",   "fears", "knows",
                                             "sees",  "builds", "sells", "finds"};

const std::vector<std::string> kEntities = {
    "arlo", "bria", "cass", "dino", "elda", "finn", "gala", "hugo", "ines",
    "jora", "kane", "lira", "milo", "nova", "opal", "pike", "quil", "rosa",
    "sage", "tilda", "ursa", "vero", "wilf", "xeno", "yuri", "zara", "nimb"};

// Never appear in knowledge or context; corrupted responses draw their
// objects here.
const std::vector<std::string> kLures = {"grim", "hexa", "vund", "sable"};

struct Fact {
  std::string subj, rel, obj;
  std::string render() const { return subj + " " + rel + " " + obj; }
};

Fact sample_fact(Rng& rng) {
  Fact f;
  f.subj = kEntities[rng.uniform_int(kEntities.size())];
  f.rel = kRelations[rng.uniform_int(kRelations.size())];
  do {
    f.obj = kEntities[rng.uniform_int(kEntities.size())];
  } while (f.obj == f.subj);
  return f;
}

std::string render_context(Rng& rng, const Fact& f) {
  switch (rng.uniform_int(3)) {
    case 0:
      return "tell me about " + f.subj;
    case 1:
      return "well what about " + f.subj;
    default:
      return "tell me what " + f.subj + " does";
  }
}

// Extractive: the fact copied as one contiguous span.
std::string render_extractive(Rng& rng, const Fact& f) {
  switch (rng.uniform_int(2)) {
    case 0:
      return "well " + f.subj + " " + f.rel + " " + f.obj;
    default:
      return f.subj + " " + f.rel + " " + f.obj + " really";
  }
}

// Abstractive: the same fact words with fillers between them, so every
// extractive fragment has length one.
std::string render_abstractive(Rng& rng, const Fact& f) {
  switch (rng.uniform_int(2)) {
    case 0:
      return f.obj + " yes and " + f.subj + " so " + f.rel;
    default:
      return "well " + f.obj + " is what " + f.subj + " did " + f.rel;
  }
}

}  // namespace

const std::vector<std::string>& vocabulary_words() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w = {"<pad>", "<bos>", "<eos>", "<sep>"};
    w.insert(w.end(), kControls.begin(), kControls.end());
    w.insert(w.end(), kFillers.begin(), kFillers.end());
    w.insert(w.end(), kRelations.begin(), kRelations.end());
    w.insert(w.end(), kEntities.begin(), kEntities.end());
    w.insert(w.end(), kLures.begin(), kLures.end());
    return w;
  }();
  return words;
}

data::Vocab make_vocab() { return data::Vocab::from_words(vocabulary_words()); }

std::vector<data::TextExample> generate(const CorpusConfig& config) {
  if (config.n_examples < 1)
    fail(ErrorKind::invalid_config, "corpus needs at least one example");
  if (config.corruption_rate < 0.0 || config.corruption_rate > 1.0 ||
      config.abstractive_fraction < 0.0 || config.abstractive_fraction > 1.0 ||
      config.two_fact_fraction < 0.0 || config.two_fact_fraction > 1.0)
    fail(ErrorKind::invalid_config, "corpus fractions must be in [0, 1]");

  Rng rng(config.seed);
  std::size_t n = static_cast<std::size_t>(config.n_examples);

  // exact corruption count, assigned to shuffled positions
  std::size_t n_corrupt = static_cast<std::size_t>(
      std::llround(config.corruption_rate * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<bool> corrupt(n, false);
  for (std::size_t i = 0; i < n_corrupt; ++i) corrupt[order[i]] = true;

  std::vector<data::TextExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Fact fact = sample_fact(rng);
    data::TextExample ex;
    ex.context = {render_context(rng, fact)};
    ex.knowledge = {fact.render()};
    if (rng.uniform() < config.two_fact_fraction) {
      Fact distractor = sample_fact(rng);
      while (distractor.subj == fact.subj) distractor = sample_fact(rng);
      ex.knowledge.push_back(distractor.render());
    }

    bool abstractive = rng.uniform() < config.abstractive_fraction;
    Fact spoken = fact;
    std::size_t swapped = 0;
    if (corrupt[i]) {
      spoken.obj = kLures[rng.uniform_int(kLures.size())];
      swapped = 1;
    }
    ex.response = abstractive ? render_abstractive(rng, spoken)
                              : render_extractive(rng, spoken);

    ex.meta["hallucinated"] = corrupt[i];
    ex.meta["style"] = abstractive ? "abstractive" : "extractive";
    ex.meta["content_tokens"] = 3;
    ex.meta["swapped_tokens"] = swapped;
    ex.meta["facts"] = ex.knowledge.size();
    ex.meta["subject"] = fact.subj;
    ex.meta["relation"] = fact.rel;
    ex.meta["gold_object"] = fact.obj;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<data::TextExample> swap_roles(
    const std::vector<data::TextExample>& dataset) {
  std::vector<data::TextExample> out;
  out.reserve(dataset.size());
  for (const auto& ex : dataset) {
    data::TextExample swapped;
    swapped.context = ex.context;
    swapped.knowledge = {ex.response};
    swapped.response = text::join(data::knowledge_tokens(ex));
    swapped.meta["augmentation"] = "role_swap";
    out.push_back(std::move(swapped));
  }
  return out;
}

std::vector<data::TextExample> strip_knowledge(
    const std::vector<data::TextExample>& dataset) {
  std::vector<data::TextExample> out;
  out.reserve(dataset.size());
  for (const auto& ex : dataset) {
    data::TextExample stripped = ex;
    stripped.knowledge.clear();
    stripped.meta["augmentation"] = "knowledge_free";
    out.push_back(std::move(stripped));
  }
  return out;
}

}  // namespace ewr::synth
