#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ewr/error.hpp"
#include "ewr/fisher.hpp"
#include "ewr/lm_provider.hpp"
#include "ewr/rng.hpp"
#include "ewr/synth.hpp"
#include "ewr/toy_lm.hpp"
#include "oracles.hpp"

using namespace ewr;

namespace {

// One-parameter binary softmax unit: p(class 1) = sigmoid(theta).
class BinaryUnit final : public fisher::GradProvider {
 public:
  explicit BinaryUnit(double theta) : theta_(theta) {}

  double sigma() const { return 1.0 / (1.0 + std::exp(-theta_)); }

  double log_prob(const data::DialogueExample& ex) const override {
    return std::log(ex.response.at(0) == 1 ? sigma() : 1.0 - sigma());
  }
  store::TensorMap grad_log_prob(const data::DialogueExample& ex) const override {
    double g = ex.response.at(0) == 1 ? 1.0 - sigma() : -sigma();
    return scalar_map(g);
  }
  store::TensorMap params() const override { return scalar_map(theta_); }
  bool supports_enumeration() const override { return true; }
  int vocab_size() const override { return 2; }
  std::vector<double> next_token_probs(const data::DecodeState&) const override {
    return {1.0 - sigma(), sigma()};
  }
  store::TensorMap next_token_grad(const data::DecodeState&, int token) const override {
    return scalar_map(token == 1 ? 1.0 - sigma() : -sigma());
  }
  std::unique_ptr<fisher::GradProvider> with_params(
      const store::TensorMap& p) const override {
    return std::make_unique<BinaryUnit>(p.at("theta").data[0]);
  }

 private:
  static store::TensorMap scalar_map(double v) {
    store::TensorMap m;
    store::Tensor t;
    t.shape = {1};
    t.data = {static_cast<float>(v)};
    m.set("theta", t);
    return m;
  }
  double theta_;
};

// Output distribution independent of the (single) parameter: zero score.
class ConstantDist final : public fisher::GradProvider {
 public:
  double log_prob(const data::DialogueExample&) const override {
    return std::log(0.25);
  }
  store::TensorMap grad_log_prob(const data::DialogueExample&) const override {
    return zero_map();
  }
  store::TensorMap params() const override { return zero_map(); }
  bool supports_enumeration() const override { return true; }
  int vocab_size() const override { return 4; }
  std::vector<double> next_token_probs(const data::DecodeState&) const override {
    return {0.25, 0.25, 0.25, 0.25};
  }
  store::TensorMap next_token_grad(const data::DecodeState&, int) const override {
    return zero_map();
  }

 private:
  static store::TensorMap zero_map() {
    store::TensorMap m;
    store::Tensor t;
    t.shape = {1};
    t.data = {0.0f};
    m.set("theta", t);
    return m;
  }
};

data::DialogueExample label_example(int label) {
  data::DialogueExample ex;
  ex.response = {label};
  return ex;
}

double max_fisher_entry(const store::TensorMap& f) {
  double m = 0.0;
  for (const auto& [_, t] : f.entries())
    for (float v : t.data) m = std::max(m, static_cast<double>(v));
  return m;
}

}  // namespace

TEST_CASE("binary softmax unit: hand-derived Fisher values") {
  BinaryUnit unit(0.0);

  SUBCASE("one observation of class 1") {
    store::TensorMap f =
        fisher::empirical_fisher(unit, {label_example(1)});
    CHECK(f.at("theta").data[0] == doctest::Approx(0.25));
    CHECK(f.metadata_or("granularity", "") == "per_example");
    CHECK(f.metadata_or(store::kRoleKey, "") == "fisher");
  }
  SUBCASE("exact Fisher by enumerating both classes") {
    store::TensorMap f = fisher::exact_fisher(unit, {data::DecodeState{}});
    CHECK(f.at("theta").data[0] == doctest::Approx(0.25));
  }
  SUBCASE("opposite gradients: per_example vs per_batch") {
    std::vector<data::DialogueExample> dataset = {label_example(1),
                                                  label_example(0)};
    store::TensorMap per_ex =
        fisher::empirical_fisher(unit, dataset, fisher::Granularity::per_example);
    CHECK(per_ex.at("theta").data[0] == doctest::Approx(0.25));
    store::TensorMap per_batch = fisher::empirical_fisher(
        unit, dataset, fisher::Granularity::per_batch, /*batch_size=*/2);
    CHECK(per_batch.at("theta").data[0] == doctest::Approx(0.0));
  }
}

TEST_CASE("parameter-independent distribution has zero Fisher") {
  ConstantDist model;
  store::TensorMap f = fisher::exact_fisher(model, {data::DecodeState{}});
  CHECK(f.at("theta").data[0] == 0.0);
}

TEST_CASE("estimator guard rails") {
  BinaryUnit unit(0.3);
  CHECK_THROWS_AS(fisher::empirical_fisher(unit, {}), Error);
  CHECK_THROWS_AS(fisher::exact_fisher(unit, {}), Error);

  // a provider without enumeration support
  class NoEnum final : public fisher::GradProvider {
   public:
    double log_prob(const data::DialogueExample&) const override { return 0; }
    store::TensorMap grad_log_prob(const data::DialogueExample&) const override {
      return {};
    }
    store::TensorMap params() const override { return {}; }
  } no_enum;
  try {
    fisher::exact_fisher(no_enum, {data::DecodeState{}});
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::enumeration_unsupported);
  }
}

TEST_CASE("toy LM gradient gate: finite differences across tensors") {
  Rng rng(123);
  toylm::Config cfg{10, 4, 3};
  for (int trial = 0; trial < 3; ++trial) {
    toylm::ToyLm model = toylm::ToyLm::init(cfg, 500 + trial);
    data::DialogueExample ex;
    ex.context = {{4, 5}, {6}};
    ex.knowledge = {7, 3, 8};
    ex.response = {9, 4, 2};
    store::TensorMap grad = model.grad_log_prob(ex);
    auto eval = [&](const toylm::ToyLm& m) { return m.log_prob(ex).total; };
    for (const auto& [name, tensor] : grad.entries()) {
      for (std::size_t i = 0; i < tensor.data.size(); i += 3) {
        double fd = oracles::central_difference(model, name, i, 1e-4, eval);
        double an = tensor.data[i];
        double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
        REQUIRE_MESSAGE(std::abs(fd - an) / denom < 1e-4,
                        name << "[" << i << "] fd=" << fd << " an=" << an);
      }
    }
    (void)rng;
  }
}

TEST_CASE("Fisher entries are nonnegative on the toy model") {
  synth::CorpusConfig cc;
  cc.n_examples = 30;
  cc.seed = 4;
  auto text = synth::generate(cc);
  data::Vocab vocab = synth::make_vocab();
  auto dataset = data::encode_all(text, vocab);
  toylm::ToyLmProvider provider(
      toylm::ToyLm::init({vocab.size(), 6, 6}, 21));

  for (auto granularity :
       {fisher::Granularity::per_example, fisher::Granularity::per_batch}) {
    store::TensorMap f = fisher::empirical_fisher(provider, dataset, granularity, 8);
    for (const auto& [name, t] : f.entries())
      for (float v : t.data) CHECK(v >= 0.0f);
  }
  auto states = fisher::prefix_states({dataset[0], dataset[1]});
  store::TensorMap f = fisher::exact_fisher(provider, states);
  for (const auto& [name, t] : f.entries())
    for (float v : t.data) CHECK(v >= 0.0f);
  CHECK(max_fisher_entry(f) > 0.0);
}

TEST_CASE("sampled empirical Fisher approaches the exact Fisher") {
  toylm::Config cfg{8, 3, 3};
  toylm::ToyLmProvider provider(toylm::ToyLm::init(cfg, 77));
  data::DialogueExample ex;
  ex.context = {{4, 5}};
  ex.knowledge = {6, 7};
  ex.response = {4, 5, 2};
  auto states = fisher::prefix_states({ex});

  store::TensorMap exact = fisher::exact_fisher(provider, states);
  store::TensorMap sampled =
      fisher::empirical_fisher_sampled(provider, states, 6000, 2024);

  double num = 0.0, den = 0.0;
  for (const auto& [name, t] : exact.entries()) {
    const auto& s = sampled.at(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      double d = static_cast<double>(t.data[i]) - s[i];
      num += d * d;
      den += static_cast<double>(t.data[i]) * t.data[i];
    }
  }
  REQUIRE(den > 0.0);
  CHECK(std::sqrt(num / den) < 0.10);
}

TEST_CASE("KL quadratic diagnostic") {
  toylm::Config cfg{8, 3, 3};
  toylm::ToyLm model = toylm::ToyLm::init(cfg, 31);
  toylm::ToyLmProvider provider(model);
  data::DialogueExample ex;
  ex.context = {{4}};
  ex.knowledge = {5, 6};
  ex.response = {7, 2};
  auto states = fisher::prefix_states({ex});

  store::TensorMap params = provider.params();
  store::TensorMap zero;
  for (const auto& [name, t] : params.entries()) {
    store::Tensor z;
    z.shape = t.shape;
    z.data.assign(t.data.size(), 0.0f);
    zero.set(name, z);
  }

  SUBCASE("zero delta gives (0, 0)") {
    auto [kl, quad] = fisher::kl_quadratic_check(provider, zero, states);
    CHECK(kl == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(quad == 0.0);
  }

  SUBCASE("single-coordinate perturbation: quadratic form within 10%") {
    store::TensorMap f = fisher::exact_fisher(provider, states);
    // pick a coordinate with appreciable Fisher mass
    std::string pick_name;
    std::size_t pick_idx = 0;
    double best = -1.0;
    for (const auto& [name, t] : f.entries()) {
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        if (t.data[i] > best) {
          best = t.data[i];
          pick_name = name;
          pick_idx = i;
        }
      }
    }
    REQUIRE(best > 0.0);

    auto run = [&](double delta_value) {
      store::TensorMap delta = zero;
      store::Tensor t = delta.at(pick_name);
      t.data[pick_idx] = static_cast<float>(delta_value);
      store::TensorMap d2;
      for (const auto& [name, tt] : delta.entries())
        d2.set(name, name == pick_name ? t : tt);
      return fisher::kl_quadratic_check(provider, d2, states);
    };

    auto [kl3, quad3] = run(1e-3);
    CHECK(quad3 > 0.0);
    CHECK(std::abs(kl3 - quad3) <= 0.10 * quad3);

    // relative gap shrinks as delta shrinks
    auto [kl2, quad2] = run(1e-2);
    double gap2 = std::abs(kl2 - quad2) / quad2;
    double gap3 = std::abs(kl3 - quad3) / quad3;
    CHECK(gap3 <= gap2 + 1e-12);

    // scaling delta by 1/2 scales the quadratic form by exactly 1/4
    auto [kl_half, quad_half] = run(0.5e-3);
    (void)kl_half;
    CHECK(quad_half == doctest::Approx(0.25 * quad3).epsilon(1e-6));
  }
}
