#pragma once

#include <vector>

#include "ewr/dataset.hpp"
#include "ewr/toy_lm.hpp"

namespace ewr::decode {

// p proportional to p_ft * (p_e / max(p_ae, eps))^temperature, renormalised.
// The epsilon floor keeps the ratio defined where the anti-expert assigns
// zero mass.
inline constexpr double kAntiExpertFloor = 1e-12;
std::vector<double> combine_dexperts(const std::vector<double>& p_ft,
                                     const std::vector<double>& p_e,
                                     const std::vector<double>& p_ae,
                                     double temperature = 1.0);

struct ExpertTriple {
  const toylm::ToyLm* ft = nullptr;          // dialogue-tuned base
  const toylm::ToyLm* expert = nullptr;      // faithfulness expert
  const toylm::ToyLm* anti_expert = nullptr; // hallucination anti-expert
  double temperature = 1.0;

  void validate() const;  // identical configs required
};

std::vector<double> dexperts_next_dist(const ExpertTriple& triple,
                                       const data::DecodeState& state);

// Beam search over the combined distribution; same determinism and tie rules
// as the plain model decoder.
std::vector<toylm::GenerationCandidate> dexperts_generate(
    const ExpertTriple& triple, const data::DecodeState& conditioning,
    int beam_size, int max_len);

struct RerankWeights {
  double lm_weight = 1.0;
  double channel_weight = 1.0;
  double length_penalty = 0.0;
};

struct RerankedCandidate {
  toylm::GenerationCandidate candidate;
  double score = 0.0;
  double channel_log_prob = 0.0;
  double lm_log_prob = 0.0;
};

// Pure scoring rule: channel_weight*channel + lm_weight*lm +
// length_penalty*length, stable-sorted descending.
std::vector<std::size_t> rerank_order(const std::vector<double>& channel_scores,
                                      const std::vector<double>& lm_scores,
                                      const std::vector<double>& lengths,
                                      const RerankWeights& weights);

// Noisy-channel reranking of beam candidates. The channel model scores the
// knowledge tokens conditioned on context plus the candidate (response and
// knowledge slots swapped); the LM term scores the candidate under the same
// conditioning as generation, so weights {lm=1, channel=0} with the
// generation model reproduce the original beam order.
std::vector<RerankedCandidate> noisy_channel_rescore(
    const std::vector<toylm::GenerationCandidate>& candidates,
    const toylm::ToyLm& channel_model, const toylm::ToyLm& lm_model,
    const RerankWeights& weights, const data::DecodeState& conditioning);

}  // namespace ewr::decode
