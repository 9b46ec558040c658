#include "ewr/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ewr/error.hpp"

namespace ewr::decode {

std::vector<double> combine_dexperts(const std::vector<double>& p_ft,
                                     const std::vector<double>& p_e,
                                     const std::vector<double>& p_ae,
                                     double temperature) {
  if (p_ft.size() != p_e.size() || p_ft.size() != p_ae.size())
    fail(ErrorKind::invalid_config, "combine_dexperts: size mismatch");
  std::vector<double> out(p_ft.size());
  double sum = 0.0;
  for (std::size_t v = 0; v < p_ft.size(); ++v) {
    double ratio = p_e[v] / std::max(p_ae[v], kAntiExpertFloor);
    if (temperature != 1.0) ratio = std::pow(ratio, temperature);
    out[v] = p_ft[v] * ratio;
    sum += out[v];
  }
  if (sum <= 0.0)
    fail(ErrorKind::divergence, "combine_dexperts: degenerate distribution");
  for (double& x : out) x /= sum;
  return out;
}

void ExpertTriple::validate() const {
  if (!ft || !expert || !anti_expert)
    fail(ErrorKind::invalid_config, "expert triple is incomplete");
  if (!(ft->config() == expert->config()) ||
      !(ft->config() == anti_expert->config()))
    fail(ErrorKind::invalid_config,
         "expert triple members have mismatched configurations");
}

std::vector<double> dexperts_next_dist(const ExpertTriple& triple,
                                       const data::DecodeState& state) {
  triple.validate();
  return combine_dexperts(triple.ft->next_token_dist(state),
                          triple.expert->next_token_dist(state),
                          triple.anti_expert->next_token_dist(state),
                          triple.temperature);
}

std::vector<toylm::GenerationCandidate> dexperts_generate(
    const ExpertTriple& triple, const data::DecodeState& conditioning,
    int beam_size, int max_len) {
  triple.validate();
  data::DecodeState state = conditioning;
  toylm::NextDistFn fn = [&](const std::vector<int>& prefix) {
    state.prefix = prefix;
    return dexperts_next_dist(triple, state);
  };
  return toylm::beam_search(fn, triple.ft->config().vocab_size, beam_size,
                            max_len);
}

std::vector<std::size_t> rerank_order(const std::vector<double>& channel_scores,
                                      const std::vector<double>& lm_scores,
                                      const std::vector<double>& lengths,
                                      const RerankWeights& weights) {
  std::size_t n = channel_scores.size();
  if (lm_scores.size() != n || lengths.size() != n)
    fail(ErrorKind::invalid_config, "rerank_order: size mismatch");
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) {
    score[i] = weights.channel_weight * channel_scores[i] +
               weights.lm_weight * lm_scores[i] +
               weights.length_penalty * lengths[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score[a] > score[b];
  });
  return order;
}

namespace {

// Candidate tokens with structural ids removed; these fill the knowledge slot
// of the channel example.
std::vector<int> content_tokens(const std::vector<int>& tokens) {
  std::vector<int> out;
  for (int t : tokens) {
    if (t == data::Vocab::pad || t == data::Vocab::bos ||
        t == data::Vocab::eos || t == data::Vocab::sep)
      continue;
    out.push_back(t);
  }
  return out;
}

}  // namespace

std::vector<RerankedCandidate> noisy_channel_rescore(
    const std::vector<toylm::GenerationCandidate>& candidates,
    const toylm::ToyLm& channel_model, const toylm::ToyLm& lm_model,
    const RerankWeights& weights, const data::DecodeState& conditioning) {
  if (candidates.empty())
    fail(ErrorKind::empty_dataset, "noisy_channel_rescore: no candidates");

  std::vector<double> channel_scores, lm_scores, lengths;
  for (const auto& cand : candidates) {
    // channel term: p(knowledge | context, candidate) with the candidate in
    // the knowledge slot and the knowledge tokens as the scored sequence
    data::DialogueExample channel_ex;
    channel_ex.context = {conditioning.context};
    channel_ex.knowledge = content_tokens(cand.tokens);
    channel_ex.response = conditioning.knowledge;
    channel_ex.response.push_back(data::Vocab::eos);
    channel_scores.push_back(channel_model.log_prob(channel_ex).total);

    // LM term: the candidate under the generation conditioning
    data::DialogueExample lm_ex;
    lm_ex.context = {conditioning.context};
    lm_ex.knowledge = conditioning.knowledge;
    lm_ex.control_tokens = conditioning.control_tokens;
    lm_ex.response = cand.tokens;
    lm_scores.push_back(lm_ex.response.empty()
                            ? 0.0
                            : lm_model.log_prob(lm_ex).total);
    lengths.push_back(static_cast<double>(cand.tokens.size()));
  }

  std::vector<std::size_t> order =
      rerank_order(channel_scores, lm_scores, lengths, weights);
  std::vector<RerankedCandidate> out;
  out.reserve(order.size());
  for (std::size_t idx : order) {
    RerankedCandidate rc;
    rc.candidate = candidates[idx];
    rc.channel_log_prob = channel_scores[idx];
    rc.lm_log_prob = lm_scores[idx];
    rc.score = weights.channel_weight * channel_scores[idx] +
               weights.lm_weight * lm_scores[idx] +
               weights.length_penalty * lengths[idx];
    out.push_back(std::move(rc));
  }
  return out;
}

}  // namespace ewr::decode
