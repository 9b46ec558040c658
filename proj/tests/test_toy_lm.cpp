#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ewr/error.hpp"
#include "ewr/rng.hpp"
#include "ewr/synth.hpp"
#include "ewr/toy_lm.hpp"
#include "oracles.hpp"

using namespace ewr;

namespace {

data::DialogueExample random_example(Rng& rng, int vocab_size) {
  data::DialogueExample ex;
  int turns = 1 + rng.uniform_int(2);
  for (int t = 0; t < turns; ++t) {
    std::vector<int> turn;
    for (int i = 0, n = 1 + rng.uniform_int(4); i < n; ++i)
      turn.push_back(4 + rng.uniform_int(vocab_size - 4));
    ex.context.push_back(std::move(turn));
  }
  for (int i = 0, n = 1 + rng.uniform_int(5); i < n; ++i)
    ex.knowledge.push_back(4 + rng.uniform_int(vocab_size - 4));
  for (int i = 0, n = 1 + rng.uniform_int(4); i < n; ++i)
    ex.response.push_back(4 + rng.uniform_int(vocab_size - 4));
  ex.response.push_back(data::Vocab::eos);
  return ex;
}

}  // namespace

TEST_CASE("init determinism and schema") {
  toylm::Config cfg{8, 4, 3};
  toylm::ToyLm a = toylm::ToyLm::init(cfg, 42);
  toylm::ToyLm b = toylm::ToyLm::init(cfg, 42);
  toylm::ToyLm c = toylm::ToyLm::init(cfg, 43);
  CHECK(store::fingerprint(a.to_tensor_map()) ==
        store::fingerprint(b.to_tensor_map()));
  CHECK(store::fingerprint(a.to_tensor_map()) !=
        store::fingerprint(c.to_tensor_map()));

  store::TensorMap map = a.to_tensor_map();
  CHECK(map.at(toylm::kEmbedding).shape == std::vector<std::int64_t>{8, 4});
  CHECK(map.at(toylm::kCtxProj).shape == std::vector<std::int64_t>{4, 4});
  CHECK(map.at(toylm::kOutProj).shape == std::vector<std::int64_t>{4, 8});
  CHECK(map.at(toylm::kOutBias).shape == std::vector<std::int64_t>{8});

  // checkpoint round trip is exact
  toylm::ToyLm reloaded = toylm::ToyLm::from_tensor_map(map);
  CHECK(store::bitwise_equal(reloaded.to_tensor_map(), map));

  CHECK_THROWS_AS(toylm::ToyLm::init({3, 4, 3}, 1), Error);  // V < 4
}

TEST_CASE("zero weights give the uniform distribution") {
  toylm::Config cfg{4, 1, 2};
  toylm::ToyLm model(cfg);  // all-zero weights

  data::DialogueExample ex;
  ex.context = {{3}};
  ex.knowledge = {3};
  ex.response = {3, 2, 3};
  toylm::ScoredExample scored = model.log_prob(ex);
  CHECK(scored.total == doctest::Approx(3.0 * std::log(0.25)).epsilon(1e-12));
  for (double lp : scored.per_token) CHECK(lp <= 0.0);

  data::DecodeState state = data::conditioning_of(ex);
  std::vector<double> p = model.next_token_dist(state);
  for (double x : p) CHECK(x == doctest::Approx(0.25));

  // output bias gradient per step is onehot(y) - uniform
  data::DialogueExample one;
  one.context = ex.context;
  one.knowledge = ex.knowledge;
  one.response = {3};
  store::TensorMap grad = model.grad_log_prob(one);
  const auto& gb = grad.at(toylm::kOutBias).data;
  CHECK(gb[3] == doctest::Approx(0.75));
  CHECK(gb[0] == doctest::Approx(-0.25));
  CHECK(gb[1] == doctest::Approx(-0.25));
  CHECK(gb[2] == doctest::Approx(-0.25));
}

TEST_CASE("next_token_dist normalises and is deterministic") {
  Rng rng(55);
  toylm::Config cfg{16, 6, 4};
  toylm::ToyLm model = toylm::ToyLm::init(cfg, 7);
  for (int trial = 0; trial < 50; ++trial) {
    data::DialogueExample ex = random_example(rng, cfg.vocab_size);
    data::DecodeState state = data::conditioning_of(ex);
    state.prefix = {4 + static_cast<int>(rng.uniform_int(cfg.vocab_size - 4))};
    std::vector<double> p = model.next_token_dist(state);
    double sum = 0.0;
    for (double x : p) {
      CHECK(x >= 0.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
    CHECK(model.next_token_dist(state) == p);
  }
}

TEST_CASE("token id range is enforced") {
  toylm::Config cfg{8, 4, 3};
  toylm::ToyLm model = toylm::ToyLm::init(cfg, 1);
  data::DialogueExample ex;
  ex.response = {7, 8};  // 8 out of range
  try {
    model.log_prob(ex);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::token_out_of_range);
  }
}

TEST_CASE("analytic gradient matches central finite differences (spot check)") {
  Rng rng(77);
  toylm::Config cfg{10, 4, 3};
  for (int trial = 0; trial < 5; ++trial) {
    toylm::ToyLm model = toylm::ToyLm::init(cfg, 100 + trial);
    data::DialogueExample ex = random_example(rng, cfg.vocab_size);
    store::TensorMap grad = model.grad_log_prob(ex);
    auto eval = [&](const toylm::ToyLm& m) { return m.log_prob(ex).total; };
    for (const auto& [name, tensor] : grad.entries()) {
      for (std::size_t i = 0; i < tensor.data.size(); i += 7) {
        double fd = oracles::central_difference(model, name, i, 1e-4, eval);
        double an = tensor.data[i];
        double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
        REQUIRE_MESSAGE(std::abs(fd - an) / denom < 1e-4,
                        name << "[" << i << "]: fd=" << fd << " analytic=" << an);
      }
    }
  }
}

TEST_CASE("sequence gradient is the sum of per-step gradients") {
  Rng rng(88);
  toylm::Config cfg{12, 5, 4};
  toylm::ToyLm model = toylm::ToyLm::init(cfg, 9);
  data::DialogueExample ex = random_example(rng, cfg.vocab_size);
  ex.response = {5, 6};  // two steps

  store::TensorMap full = model.grad_log_prob(ex);

  data::DecodeState s1 = data::conditioning_of(ex);
  store::TensorMap g1 = model.next_token_grad(s1, 5);
  data::DecodeState s2 = s1;
  s2.prefix = {5};
  store::TensorMap g2 = model.next_token_grad(s2, 6);

  for (const auto& [name, t] : full.entries()) {
    const auto& a = g1.at(name).data;
    const auto& b = g2.at(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      double want = static_cast<double>(a[i]) + static_cast<double>(b[i]);
      CHECK(t.data[i] == doctest::Approx(want).epsilon(1e-5));
    }
  }
}

TEST_CASE("training basics") {
  synth::CorpusConfig corpus_cfg;
  corpus_cfg.n_examples = 50;
  corpus_cfg.seed = 7;
  auto text = synth::generate(corpus_cfg);
  data::Vocab vocab = synth::make_vocab();
  auto dataset = data::encode_all(text, vocab);
  toylm::Config cfg{vocab.size(), 8, 8};
  toylm::ToyLm init = toylm::ToyLm::init(cfg, 3);

  SUBCASE("lr = 0 leaves parameters unchanged") {
    toylm::TrainHyper hyper;
    hyper.epochs = 2;
    hyper.lr = 0.0;
    hyper.seed = 5;
    toylm::ToyLm out = toylm::train(init, dataset, hyper);
    CHECK(store::fingerprint(out.to_tensor_map()) ==
          store::fingerprint(init.to_tensor_map()));
  }
  SUBCASE("training loss trends down (at most 2 upticks)") {
    toylm::TrainHyper hyper;
    hyper.epochs = 15;
    hyper.lr = 0.1;
    hyper.batch_size = 16;
    hyper.seed = 5;
    toylm::TrainLog log;
    toylm::train(init, dataset, hyper, &log);
    REQUIRE(log.train_nll.size() == 15);
    int upticks = 0;
    for (std::size_t e = 1; e < log.train_nll.size(); ++e)
      if (log.train_nll[e] > log.train_nll[e - 1] + 1e-12) ++upticks;
    CHECK(upticks <= 2);
    CHECK(log.train_nll.back() < log.train_nll.front());
  }
  SUBCASE("same seed twice gives identical parameters") {
    toylm::TrainHyper hyper;
    hyper.epochs = 3;
    hyper.lr = 0.1;
    hyper.seed = 11;
    toylm::ToyLm a = toylm::train(init, dataset, hyper);
    toylm::ToyLm b = toylm::train(init, dataset, hyper);
    CHECK(store::fingerprint(a.to_tensor_map()) ==
          store::fingerprint(b.to_tensor_map()));
  }
  SUBCASE("validation mode selects the best epoch") {
    toylm::TrainHyper hyper;
    hyper.epochs = 6;
    hyper.lr = 0.1;
    hyper.seed = 13;
    hyper.validation_fraction = 0.2;
    toylm::TrainLog log;
    toylm::train(init, dataset, hyper, &log);
    REQUIRE(log.val_nll.size() == 6);
    REQUIRE(log.best_epoch >= 0);
    double best = log.val_nll[log.best_epoch];
    for (double v : log.val_nll) CHECK(best <= v + 1e-12);
  }
  SUBCASE("empty dataset is rejected") {
    toylm::TrainHyper hyper;
    CHECK_THROWS_AS(toylm::train(init, {}, hyper), Error);
  }
}

TEST_CASE("beam search") {
  Rng rng(99);
  toylm::Config cfg{6, 3, 3};

  SUBCASE("beam size 1 equals greedy decoding") {
    for (int trial = 0; trial < 10; ++trial) {
      toylm::ToyLm model = toylm::ToyLm::init(cfg, 200 + trial);
      data::DialogueExample ex = random_example(rng, cfg.vocab_size);
      data::DecodeState cond = data::conditioning_of(ex);
      auto beam = toylm::generate_beam(model, cond, 1, 6);
      REQUIRE(beam.size() == 1);

      // manual greedy
      std::vector<int> greedy;
      data::DecodeState state = cond;
      for (int step = 0; step < 6; ++step) {
        std::vector<double> p = model.next_token_dist(state);
        int best = 0;
        for (int v = 1; v < cfg.vocab_size; ++v)
          if (p[v] > p[best]) best = v;
        greedy.push_back(best);
        state.prefix = greedy;
        if (best == data::Vocab::eos) break;
      }
      CHECK(beam[0].tokens == greedy);
    }
  }

  SUBCASE("candidate log_prob matches a recomputation") {
    toylm::ToyLm model = toylm::ToyLm::init(cfg, 300);
    data::DialogueExample ex = random_example(rng, cfg.vocab_size);
    data::DecodeState cond = data::conditioning_of(ex);
    auto beam = toylm::generate_beam(model, cond, 4, 5);
    for (const auto& cand : beam) {
      double total = 0.0;
      for (double lp : cand.per_token_log_probs) total += lp;
      CHECK(cand.log_prob == doctest::Approx(total).epsilon(1e-12));

      data::DialogueExample scored;
      scored.context = ex.context;
      scored.knowledge = ex.knowledge;
      scored.response = cand.tokens;
      CHECK(model.log_prob(scored).total ==
            doctest::Approx(cand.log_prob).epsilon(1e-9));
    }
  }

  SUBCASE("beam 2 finds the true top-2 under a fixed per-step distribution") {
    // prefix-independent distribution: only output biases are nonzero; eos is
    // the argmax so the two best sequences survive a width-2 beam
    toylm::Config small{4, 2, 2};
    toylm::ToyLm model(small);
    model.perturb(toylm::kOutBias, 0, -2.0);  // pad unlikely
    model.perturb(toylm::kOutBias, 2, 1.2);   // eos most likely
    model.perturb(toylm::kOutBias, 3, 0.6);   // content token second
    data::DecodeState cond;
    cond.context = {3};

    auto beam = toylm::generate_beam(model, cond, 2, 3);
    auto exhaustive = oracles::exhaustive_candidates(
        [&](const std::vector<int>& prefix) {
          data::DecodeState s = cond;
          s.prefix = prefix;
          return model.next_token_dist(s);
        },
        small.vocab_size, 3, 2);
    REQUIRE(beam.size() == 2);
    REQUIRE(exhaustive.size() == 2);
    for (int i = 0; i < 2; ++i) {
      CHECK(beam[i].tokens == exhaustive[i].tokens);
      CHECK(beam[i].log_prob == doctest::Approx(exhaustive[i].log_prob));
    }
  }

  SUBCASE("degenerate huge beam equals exhaustive enumeration") {
    for (int trial = 0; trial < 5; ++trial) {
      toylm::Config small{5, 3, 2};
      toylm::ToyLm model = toylm::ToyLm::init(small, 400 + trial);
      data::DialogueExample ex = random_example(rng, small.vocab_size);
      data::DecodeState cond = data::conditioning_of(ex);
      int max_len = 3;
      int beam_size = 5 * 5 * 5 + 8;  // >= V^max_len

      auto beam = toylm::generate_beam(model, cond, beam_size, max_len);
      auto want = oracles::exhaustive_candidates(
          [&](const std::vector<int>& prefix) {
            data::DecodeState s = cond;
            s.prefix = prefix;
            return model.next_token_dist(s);
          },
          small.vocab_size, max_len, beam.size());
      REQUIRE(beam.size() == want.size());
      for (std::size_t i = 0; i < beam.size(); ++i) {
        CHECK(beam[i].tokens == want[i].tokens);
        CHECK(beam[i].log_prob == doctest::Approx(want[i].log_prob).epsilon(1e-9));
      }
    }
  }
}
