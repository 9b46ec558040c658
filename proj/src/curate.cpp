#include "ewr/curate.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

#include "ewr/error.hpp"
#include "ewr/metrics.hpp"
#include "ewr/rng.hpp"

namespace ewr::curate {

FragmentStats extractive_fragments(const std::vector<std::string>& response,
                                   const std::vector<std::string>& knowledge) {
  if (response.empty())
    fail(ErrorKind::empty_dataset, "extractive_fragments: empty response");

  FragmentStats stats;
  std::size_t i = 0;
  while (i < response.size()) {
    std::size_t best_len = 0, best_pos = 0;
    for (std::size_t j = 0; j < knowledge.size(); ++j) {
      std::size_t len = 0;
      while (i + len < response.size() && j + len < knowledge.size() &&
             response[i + len] == knowledge[j + len])
        ++len;
      if (len > best_len) {  // earliest knowledge offset wins ties
        best_len = len;
        best_pos = j;
      }
    }
    if (best_len >= 1) {
      Fragment f;
      f.response_pos = i;
      f.knowledge_pos = best_pos;
      f.tokens.assign(response.begin() + i, response.begin() + i + best_len);
      stats.fragments.push_back(std::move(f));
      i += best_len;
    } else {
      ++i;
    }
  }

  double sum_len = 0.0, sum_sq = 0.0;
  for (const auto& f : stats.fragments) {
    double len = static_cast<double>(f.tokens.size());
    sum_len += len;
    sum_sq += len * len;
  }
  stats.coverage = sum_len / static_cast<double>(response.size());
  stats.density = sum_sq / static_cast<double>(response.size());
  return stats;
}

FragmentStats fragment_stats(const data::TextExample& ex) {
  return extractive_fragments(data::response_tokens(ex),
                              data::knowledge_tokens(ex));
}

namespace {

// Indices sorted by key (stable), then split into thirds with the remainder
// going to the front buckets.
DensityBuckets tercile_split(const std::vector<double>& keys) {
  std::vector<std::size_t> order(keys.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
  std::size_t n = order.size();
  std::size_t base = n / 3, rem = n % 3;
  std::size_t n_low = base + (rem > 0 ? 1 : 0);
  std::size_t n_med = base + (rem > 1 ? 1 : 0);
  DensityBuckets buckets;
  buckets.low.assign(order.begin(), order.begin() + n_low);
  buckets.medium.assign(order.begin() + n_low, order.begin() + n_low + n_med);
  buckets.high.assign(order.begin() + n_low + n_med, order.end());
  return buckets;
}

}  // namespace

DensityBuckets bucket_by_density(const std::vector<data::TextExample>& dataset) {
  if (dataset.empty())
    fail(ErrorKind::empty_dataset, "bucket_by_density: empty dataset");
  std::vector<double> densities;
  densities.reserve(dataset.size());
  for (const auto& ex : dataset) densities.push_back(fragment_stats(ex).density);
  return tercile_split(densities);
}

std::vector<std::size_t> select_abstractive_expert(
    const std::vector<data::TextExample>& dataset, double coverage_threshold) {
  if (coverage_threshold < 0.0 || coverage_threshold > 1.0)
    fail(ErrorKind::invalid_config, "coverage threshold must be in [0, 1]");
  DensityBuckets buckets = bucket_by_density(dataset);
  std::vector<std::size_t> selected;
  for (std::size_t idx : buckets.low) {
    if (fragment_stats(dataset[idx]).coverage >= coverage_threshold)
      selected.push_back(idx);
  }
  std::sort(selected.begin(), selected.end());
  if (selected.empty())
    std::cerr << "warning: abstractive-expert selection is empty "
                 "(coverage threshold too strict?)\n";
  return selected;
}

std::vector<std::size_t> select_entailed_expert(
    const std::vector<data::TextExample>& dataset, double f1_threshold) {
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    double f1 = metrics::token_f1(data::response_tokens(dataset[i]),
                                  data::knowledge_tokens(dataset[i]));
    if (f1 >= f1_threshold) selected.push_back(i);
  }
  if (selected.empty())
    std::cerr << "warning: entailed-expert selection is empty\n";
  return selected;
}

std::vector<data::TextExample> knowledge_swap(
    const std::vector<data::TextExample>& dataset, std::uint64_t seed,
    std::vector<SwapRecord>* provenance) {
  if (dataset.size() < 2)
    fail(ErrorKind::empty_dataset, "knowledge_swap needs at least 2 examples");
  Rng rng(seed);
  std::vector<data::TextExample> out;
  out.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    std::size_t donor = i;
    while (donor == i)
      donor = static_cast<std::size_t>(rng.uniform_int(dataset.size()));
    data::TextExample ex = dataset[i];
    ex.knowledge = dataset[donor].knowledge;
    ex.meta["augmentation"] = "knowledge_swap";
    ex.meta["donor"] = donor;
    out.push_back(std::move(ex));
    if (provenance) provenance->push_back({i, donor});
  }
  return out;
}

void assign_control_tokens(std::vector<data::TextExample>& dataset,
                           double f1_entailment_threshold) {
  if (f1_entailment_threshold < 0.0 || f1_entailment_threshold > 1.0)
    fail(ErrorKind::invalid_config, "entailment threshold must be in [0, 1]");
  if (dataset.empty()) return;

  std::vector<double> coverages;
  coverages.reserve(dataset.size());
  for (const auto& ex : dataset) coverages.push_back(fragment_stats(ex).coverage);
  DensityBuckets terciles = tercile_split(coverages);

  std::vector<const char*> overlap_token(dataset.size(), kOverlapLowToken);
  for (std::size_t idx : terciles.medium) overlap_token[idx] = kOverlapMedToken;
  for (std::size_t idx : terciles.high) overlap_token[idx] = kOverlapHighToken;

  for (std::size_t i = 0; i < dataset.size(); ++i) {
    double f1 = metrics::token_f1(data::response_tokens(dataset[i]),
                                  data::knowledge_tokens(dataset[i]));
    dataset[i].control_tokens = {
        f1 >= f1_entailment_threshold ? kEntailedToken : kNonEntailedToken,
        overlap_token[i]};
  }
}

std::vector<data::TextExample> take(const std::vector<data::TextExample>& dataset,
                                    const std::vector<std::size_t>& indices) {
  std::vector<data::TextExample> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) out.push_back(dataset[idx]);
  return out;
}

}  // namespace ewr::curate
