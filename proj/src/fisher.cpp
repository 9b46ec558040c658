#include "ewr/fisher.hpp"

#include <cmath>

#include "ewr/error.hpp"
#include "ewr/rng.hpp"

namespace ewr::fisher {

namespace {

// Double-precision accumulator aligned with a parameter map.
struct Accumulator {
  std::map<std::string, std::pair<std::vector<std::int64_t>, std::vector<double>>> acc;

  explicit Accumulator(const store::TensorMap& schema) {
    for (const auto& [name, t] : schema.entries())
      acc.emplace(name, std::make_pair(t.shape, std::vector<double>(t.data.size(), 0.0)));
  }

  void add_squared(const store::TensorMap& grad, double weight) {
    for (auto& [name, slot] : acc) {
      const auto& g = grad.at(name).data;
      auto& dst = slot.second;
      if (g.size() != dst.size())
        fail(ErrorKind::alignment, "gradient shape mismatch on tensor " + name);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = g[i];
        dst[i] += weight * x * x;
      }
    }
  }

  void add_squared_of(const Accumulator& sum, double weight) {
    for (auto& [name, slot] : acc) {
      const auto& src = sum.acc.at(name).second;
      auto& dst = slot.second;
      for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] += weight * src[i] * src[i];
    }
  }

  void add(const store::TensorMap& grad) {
    for (auto& [name, slot] : acc) {
      const auto& g = grad.at(name).data;
      auto& dst = slot.second;
      if (g.size() != dst.size())
        fail(ErrorKind::alignment, "gradient shape mismatch on tensor " + name);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  }

  void zero() {
    for (auto& [_, slot] : acc)
      std::fill(slot.second.begin(), slot.second.end(), 0.0);
  }

  store::TensorMap to_tensor_map() const {
    store::TensorMap out;
    for (const auto& [name, slot] : acc) {
      store::Tensor t;
      t.shape = slot.first;
      t.data.reserve(slot.second.size());
      for (double x : slot.second) t.data.push_back(static_cast<float>(x));
      out.set(name, std::move(t));
    }
    return out;
  }
};

void stamp_metadata(store::TensorMap& fisher_map, const GradProvider& model,
                    Granularity granularity, std::size_t dataset_size) {
  fisher_map.set_metadata(store::kRoleKey, "fisher");
  fisher_map.set_metadata("granularity", to_string(granularity));
  fisher_map.set_metadata("dataset_size", std::to_string(dataset_size));
  fisher_map.set_metadata(store::kModelFingerprintKey,
                          store::fingerprint(model.params()));
}

}  // namespace

Granularity granularity_from_string(const std::string& s) {
  if (s == "per_example") return Granularity::per_example;
  if (s == "per_batch") return Granularity::per_batch;
  fail(ErrorKind::invalid_config, "unknown fisher granularity: " + s);
}

std::string to_string(Granularity g) {
  return g == Granularity::per_example ? "per_example" : "per_batch";
}

int GradProvider::vocab_size() const {
  fail(ErrorKind::enumeration_unsupported,
       "model does not support next-token enumeration");
}

std::vector<double> GradProvider::next_token_probs(const data::DecodeState&) const {
  fail(ErrorKind::enumeration_unsupported,
       "model does not support next-token enumeration");
}

store::TensorMap GradProvider::next_token_grad(const data::DecodeState&, int) const {
  fail(ErrorKind::enumeration_unsupported,
       "model does not support next-token enumeration");
}

std::unique_ptr<GradProvider> GradProvider::with_params(const store::TensorMap&) const {
  fail(ErrorKind::enumeration_unsupported,
       "model does not support parameter rebinding");
}

store::TensorMap empirical_fisher(const GradProvider& model,
                                  const std::vector<data::DialogueExample>& dataset,
                                  Granularity granularity, int batch_size) {
  if (dataset.empty())
    fail(ErrorKind::empty_dataset, "empirical_fisher: empty dataset");
  if (batch_size < 1)
    fail(ErrorKind::invalid_config, "empirical_fisher: batch_size must be >= 1");

  store::TensorMap schema = model.params();
  Accumulator fisher_acc(schema);

  if (granularity == Granularity::per_example) {
    double w = 1.0 / static_cast<double>(dataset.size());
    for (const auto& ex : dataset)
      fisher_acc.add_squared(model.grad_log_prob(ex), w);
  } else {
    std::size_t bs = static_cast<std::size_t>(batch_size);
    std::size_t n_batches = (dataset.size() + bs - 1) / bs;
    double w = 1.0 / static_cast<double>(n_batches);
    Accumulator batch_sum(schema);
    for (std::size_t b = 0; b < dataset.size(); b += bs) {
      std::size_t end = std::min(dataset.size(), b + bs);
      batch_sum.zero();
      for (std::size_t k = b; k < end; ++k)
        batch_sum.add(model.grad_log_prob(dataset[k]));
      fisher_acc.add_squared_of(batch_sum, w);
    }
  }

  store::TensorMap out = fisher_acc.to_tensor_map();
  stamp_metadata(out, model, granularity, dataset.size());
  return out;
}

store::TensorMap exact_fisher(const GradProvider& model,
                              const std::vector<data::DecodeState>& states) {
  if (!model.supports_enumeration())
    fail(ErrorKind::enumeration_unsupported,
         "exact_fisher requires next-token enumeration");
  if (states.empty()) fail(ErrorKind::empty_dataset, "exact_fisher: no states");

  store::TensorMap schema = model.params();
  Accumulator acc(schema);
  double w = 1.0 / static_cast<double>(states.size());
  for (const auto& state : states) {
    std::vector<double> probs = model.next_token_probs(state);
    for (int v = 0; v < static_cast<int>(probs.size()); ++v) {
      if (probs[v] == 0.0) continue;
      acc.add_squared(model.next_token_grad(state, v), w * probs[v]);
    }
  }
  store::TensorMap out = acc.to_tensor_map();
  stamp_metadata(out, model, Granularity::per_example, states.size());
  out.set_metadata("estimator", "exact_enumeration");
  return out;
}

store::TensorMap empirical_fisher_sampled(const GradProvider& model,
                                          const std::vector<data::DecodeState>& states,
                                          int n_samples, std::uint64_t seed) {
  if (!model.supports_enumeration())
    fail(ErrorKind::enumeration_unsupported,
         "empirical_fisher_sampled requires next-token enumeration");
  if (states.empty())
    fail(ErrorKind::empty_dataset, "empirical_fisher_sampled: no states");
  if (n_samples < 1)
    fail(ErrorKind::invalid_config, "empirical_fisher_sampled: n_samples must be >= 1");

  store::TensorMap schema = model.params();
  Accumulator acc(schema);
  Rng rng(seed);
  double w = 1.0 / static_cast<double>(n_samples);
  for (int n = 0; n < n_samples; ++n) {
    const data::DecodeState& state = states[n % states.size()];
    std::vector<double> probs = model.next_token_probs(state);
    double u = rng.uniform();
    double cum = 0.0;
    int sampled = static_cast<int>(probs.size()) - 1;
    for (int v = 0; v < static_cast<int>(probs.size()); ++v) {
      cum += probs[v];
      if (u < cum) {
        sampled = v;
        break;
      }
    }
    acc.add_squared(model.next_token_grad(state, sampled), w);
  }
  store::TensorMap out = acc.to_tensor_map();
  stamp_metadata(out, model, Granularity::per_example, states.size());
  out.set_metadata("estimator", "sampled");
  out.set_metadata("n_samples", std::to_string(n_samples));
  return out;
}

std::pair<double, double> kl_quadratic_check(
    const GradProvider& model, const store::TensorMap& delta,
    const std::vector<data::DecodeState>& states) {
  if (!model.supports_enumeration())
    fail(ErrorKind::enumeration_unsupported,
         "kl_quadratic_check requires next-token enumeration");
  if (states.empty()) fail(ErrorKind::empty_dataset, "kl_quadratic_check: no states");

  store::TensorMap params = model.params();
  store::require_mergeable(params, delta, "kl delta");

  // perturbed parameter point
  store::TensorMap shifted;
  for (const auto& [name, t] : params.entries()) {
    store::Tensor s;
    s.shape = t.shape;
    s.data.resize(t.data.size());
    const auto& d = delta.at(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i)
      s.data[i] = static_cast<float>(static_cast<double>(t.data[i]) +
                                     static_cast<double>(d[i]));
    shifted.set(name, std::move(s));
  }
  for (const auto& [k, v] : params.metadata()) shifted.set_metadata(k, v);
  std::unique_ptr<GradProvider> perturbed = model.with_params(shifted);

  double kl = 0.0;
  for (const auto& state : states) {
    std::vector<double> p = model.next_token_probs(state);
    std::vector<double> q = perturbed->next_token_probs(state);
    double s = 0.0;
    for (std::size_t v = 0; v < p.size(); ++v) {
      if (p[v] > 0.0) s += p[v] * (std::log(p[v]) - std::log(q[v]));
    }
    kl += s;
  }
  kl /= static_cast<double>(states.size());

  store::TensorMap f = exact_fisher(model, states);
  double quad = 0.0;
  for (const auto& [name, t] : f.entries()) {
    const auto& d = delta.at(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      double dd = d[i];
      quad += 0.5 * static_cast<double>(t.data[i]) * dd * dd;
    }
  }
  return {kl, quad};
}

std::vector<data::DecodeState> prefix_states(
    const std::vector<data::DialogueExample>& examples) {
  std::vector<data::DecodeState> states;
  for (const auto& ex : examples) {
    data::DecodeState base = data::conditioning_of(ex);
    for (std::size_t n = 0; n < ex.response.size(); ++n) {
      data::DecodeState s = base;
      s.prefix.assign(ex.response.begin(), ex.response.begin() + n);
      states.push_back(std::move(s));
    }
  }
  return states;
}

}  // namespace ewr::fisher
