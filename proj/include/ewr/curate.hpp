#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ewr/dataset.hpp"

namespace ewr::curate {

// One extractive fragment: a response span that also appears contiguously in
// the knowledge.
struct Fragment {
  std::size_t response_pos = 0;
  std::size_t knowledge_pos = 0;
  std::vector<std::string> tokens;
};

struct FragmentStats {
  std::vector<Fragment> fragments;
  double coverage = 0.0;  // (1/|response|) * sum |fragment|
  double density = 0.0;   // (1/|response|) * sum |fragment|^2
};

// Greedy shared-fragment extraction: at each response position take the
// longest knowledge match starting there (earliest knowledge offset on ties),
// emit it and skip past it, else advance one token.
FragmentStats extractive_fragments(const std::vector<std::string>& response,
                                   const std::vector<std::string>& knowledge);

FragmentStats fragment_stats(const data::TextExample& ex);

struct DensityBuckets {
  std::vector<std::size_t> low, medium, high;  // indices into the dataset
};

// Splits at the 1/3 and 2/3 order statistics of density; stable order breaks
// ties, bucket sizes differ by at most one (low gets the first remainder).
DensityBuckets bucket_by_density(const std::vector<data::TextExample>& dataset);

// Low-density bucket filtered to coverage >= threshold. Emits a warning on an
// empty result rather than failing.
std::vector<std::size_t> select_abstractive_expert(
    const std::vector<data::TextExample>& dataset, double coverage_threshold);

// Faithfulness-expert selection via the entailment proxy: keeps examples with
// token_f1(response, knowledge) >= threshold.
std::vector<std::size_t> select_entailed_expert(
    const std::vector<data::TextExample>& dataset, double f1_threshold);

struct SwapRecord {
  std::size_t index = 0;
  std::size_t donor = 0;
};

// Anti-expert construction: every example keeps its context and response but
// takes the knowledge of a uniformly sampled *different* example. Donor
// indices are recorded in provenance and in each example's meta.
std::vector<data::TextExample> knowledge_swap(
    const std::vector<data::TextExample>& dataset, std::uint64_t seed,
    std::vector<SwapRecord>* provenance = nullptr);

inline constexpr const char* kEntailedToken = "<entailed>";
inline constexpr const char* kNonEntailedToken = "<non-entailed>";
inline constexpr const char* kOverlapLowToken = "<lo>";
inline constexpr const char* kOverlapMedToken = "<med>";
inline constexpr const char* kOverlapHighToken = "<hi>";

// Control-token annotation: an entailment token from the token-F1 proxy
// (f1 >= threshold => <entailed>) and an overlap token from tercile binning
// of coverage over this dataset. Every example ends up with exactly two.
void assign_control_tokens(std::vector<data::TextExample>& dataset,
                           double f1_entailment_threshold = 0.5);

std::vector<data::TextExample> take(const std::vector<data::TextExample>& dataset,
                                    const std::vector<std::size_t>& indices);

}  // namespace ewr::curate
