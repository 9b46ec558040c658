#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ewr/dataset.hpp"
#include "ewr/tensor_map.hpp"

namespace ewr::toylm {

// Parameter tensor names in the checkpoint schema.
inline constexpr const char* kEmbedding = "embedding";     // [V, d]
inline constexpr const char* kCtxProj = "ctx_proj";        // [d, d]
inline constexpr const char* kKnowProj = "know_proj";      // [d, d]
inline constexpr const char* kPrevProj = "prev_proj";      // [d, d]
inline constexpr const char* kHiddenBias = "hidden_bias";  // [d]
inline constexpr const char* kOutProj = "out_proj";        // [d, V]
inline constexpr const char* kOutBias = "out_bias";        // [V]

struct Config {
  int vocab_size = 64;
  int hidden_dim = 16;
  int context_window = 8;  // number of trailing conditioning tokens pooled

  bool operator==(const Config&) const = default;
};

struct ScoredExample {
  double total = 0.0;
  std::vector<double> per_token;
};

struct GenerationCandidate {
  std::vector<int> tokens;  // ends with <eos> or hit max length
  double log_prob = 0.0;
  std::vector<double> per_token_log_probs;
};

struct TrainHyper;
struct TrainLog;
class ToyLm;
ToyLm train(const ToyLm& initial, const std::vector<data::DialogueExample>& dataset,
            const TrainHyper& hyper, TrainLog* log);

// Minimal grounded-dialogue language model. Next-token logits come from one
// tanh layer over three pooled inputs: the mean embedding of the conditioning
// window (control tokens followed by the last `context_window` context
// tokens), the mean embedding of the knowledge tokens, and the embedding of
// the previous response token (<bos> at the first step).
//
// Parameters live in double precision at runtime; checkpoints round to
// float32 through to_tensor_map()/from_tensor_map().
class ToyLm {
 public:
  explicit ToyLm(const Config& cfg);  // all-zero weights

  static ToyLm init(const Config& cfg, std::uint64_t seed);
  static ToyLm from_tensor_map(const store::TensorMap& params);
  store::TensorMap to_tensor_map() const;

  const Config& config() const { return cfg_; }

  // Teacher-forced log-probability of the gold response (per-token values
  // are log p <= 0; total is their sum).
  ScoredExample log_prob(const data::DialogueExample& ex) const;

  // Exact analytic gradient of log_prob().total w.r.t. every parameter.
  store::TensorMap grad_log_prob(const data::DialogueExample& ex) const;

  // Distribution over the next token given the decode state.
  std::vector<double> next_token_dist(const data::DecodeState& state) const;

  // Gradient of log p(token | state) for a single step.
  store::TensorMap next_token_grad(const data::DecodeState& state, int token) const;

  // Test hook: adds `amount` to one scalar parameter in place.
  void perturb(const std::string& tensor, std::size_t index, double amount);

  // Adds a (float32) delta tensor map elementwise.
  void add_delta(const store::TensorMap& delta);

 private:
  friend struct Workspace;
  friend ToyLm train(const ToyLm&, const std::vector<data::DialogueExample>&,
                     const TrainHyper&, TrainLog*);

  std::vector<double>& tensor_by_name(const std::string& name);
  void check_tokens(const std::vector<int>& tokens) const;

  Config cfg_;
  std::vector<double> emb_;      // V*d
  std::vector<double> w_ctx_;    // d*d
  std::vector<double> w_know_;   // d*d
  std::vector<double> w_prev_;   // d*d
  std::vector<double> b_hidden_; // d
  std::vector<double> w_out_;    // d*V
  std::vector<double> b_out_;    // V
};

struct TrainHyper {
  int epochs = 30;
  double lr = 0.1;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double l2 = 0.0;
  // > 0 turns on held-out model selection: that fraction of the data is split
  // off, and the epoch with the smallest validation loss wins.
  double validation_fraction = 0.0;
};

struct TrainLog {
  std::vector<double> train_nll;  // mean negative log-prob per example, per epoch
  std::vector<double> val_nll;
  int best_epoch = -1;  // only set in validation mode
};

// Mini-batch gradient ascent on mean log-likelihood. Deterministic given the
// seed; the input model is untouched.
ToyLm train(const ToyLm& initial, const std::vector<data::DialogueExample>& dataset,
            const TrainHyper& hyper, TrainLog* log = nullptr);

// Length-unnormalised beam search over an arbitrary next-token distribution;
// candidates sorted by log_prob descending, ties broken by lexicographic
// token order. next_dist receives the current prefix (excluding <bos>).
using NextDistFn =
    std::function<std::vector<double>(const std::vector<int>& prefix)>;
std::vector<GenerationCandidate> beam_search(const NextDistFn& next_dist,
                                             int vocab_size, int beam_size,
                                             int max_len);

std::vector<GenerationCandidate> generate_beam(const ToyLm& model,
                                               const data::DecodeState& conditioning,
                                               int beam_size, int max_len);

}  // namespace ewr::toylm
