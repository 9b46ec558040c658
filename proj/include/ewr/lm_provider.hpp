#pragma once

#include <memory>
#include <utility>

#include "ewr/fisher.hpp"
#include "ewr/toy_lm.hpp"

namespace ewr::toylm {

// GradProvider adapter over the toy LM; enumeration-capable.
class ToyLmProvider final : public fisher::GradProvider {
 public:
  explicit ToyLmProvider(ToyLm model) : model_(std::move(model)) {}

  const ToyLm& model() const { return model_; }

  double log_prob(const data::DialogueExample& ex) const override {
    return model_.log_prob(ex).total;
  }
  store::TensorMap grad_log_prob(const data::DialogueExample& ex) const override {
    return model_.grad_log_prob(ex);
  }
  store::TensorMap params() const override { return model_.to_tensor_map(); }

  bool supports_enumeration() const override { return true; }
  int vocab_size() const override { return model_.config().vocab_size; }
  std::vector<double> next_token_probs(const data::DecodeState& state) const override {
    return model_.next_token_dist(state);
  }
  store::TensorMap next_token_grad(const data::DecodeState& state,
                                   int token) const override {
    return model_.next_token_grad(state, token);
  }
  std::unique_ptr<fisher::GradProvider> with_params(
      const store::TensorMap& params) const override {
    return std::make_unique<ToyLmProvider>(ToyLm::from_tensor_map(params));
  }

 private:
  ToyLm model_;
};

}  // namespace ewr::toylm
