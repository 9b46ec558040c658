#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "ewr/dataset.hpp"
#include "ewr/tensor_map.hpp"

namespace ewr::fisher {

enum class Granularity { per_example, per_batch };

Granularity granularity_from_string(const std::string& s);
std::string to_string(Granularity g);

// Model abstraction the estimators work against: teacher-forced scoring and
// gradients, plus an optional per-state next-token enumeration capability
// that makes the Fisher expectation exact.
class GradProvider {
 public:
  virtual ~GradProvider() = default;

  virtual double log_prob(const data::DialogueExample& ex) const = 0;
  virtual store::TensorMap grad_log_prob(const data::DialogueExample& ex) const = 0;

  // Parameter point the gradients are taken at.
  virtual store::TensorMap params() const = 0;

  virtual bool supports_enumeration() const { return false; }
  virtual int vocab_size() const;
  virtual std::vector<double> next_token_probs(const data::DecodeState& state) const;
  virtual store::TensorMap next_token_grad(const data::DecodeState& state,
                                           int token) const;
  // Same model family at a different parameter point (KL diagnostic).
  virtual std::unique_ptr<GradProvider> with_params(const store::TensorMap& params) const;
};

// Diagonal empirical Fisher: mean over examples of the squared gradient of
// the full-response log-probability. per_batch sums gradients over each
// consecutive batch before squaring and averages over batches.
store::TensorMap empirical_fisher(const GradProvider& model,
                                  const std::vector<data::DialogueExample>& dataset,
                                  Granularity granularity = Granularity::per_example,
                                  int batch_size = 16);

// Exact diagonal Fisher over the given states: mean over states of
// sum_y p(y|state) * (grad log p(y|state))^2, enumerating the next-token
// vocabulary at each state.
store::TensorMap exact_fisher(const GradProvider& model,
                              const std::vector<data::DecodeState>& states);

// Monte-Carlo counterpart of exact_fisher: cycles through the states and
// samples one next token per draw from the model's own distribution.
store::TensorMap empirical_fisher_sampled(const GradProvider& model,
                                          const std::vector<data::DecodeState>& states,
                                          int n_samples, std::uint64_t seed);

// Returns (kl_exact, kl_quadratic): the mean token-level KL between the model
// at its parameters and at parameters+delta, and the quadratic form
// 0.5 * sum_j f_j * delta_j^2 using the exact Fisher at the original point.
std::pair<double, double> kl_quadratic_check(
    const GradProvider& model, const store::TensorMap& delta,
    const std::vector<data::DecodeState>& states);

// Builds all teacher-forced prefix states of the given examples (one state
// per response position, including the empty prefix).
std::vector<data::DecodeState> prefix_states(
    const std::vector<data::DialogueExample>& examples);

}  // namespace ewr::fisher
