#include "ewr/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ewr/error.hpp"
#include "ewr/rng.hpp"

namespace ewr::toylm {

namespace {

void validate_config(const Config& cfg) {
  if (cfg.vocab_size < 4)
    fail(ErrorKind::invalid_config,
         "vocab_size must be >= 4 (pad, bos, eos, sep are reserved)");
  if (cfg.hidden_dim < 1)
    fail(ErrorKind::invalid_config, "hidden_dim must be >= 1");
  if (cfg.context_window < 1)
    fail(ErrorKind::invalid_config, "context_window must be >= 1");
}

std::vector<double> softmax(const std::vector<double>& z) {
  double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t v = 0; v < z.size(); ++v) {
    p[v] = std::exp(z[v] - zmax);
    sum += p[v];
  }
  for (double& x : p) x /= sum;
  return p;
}

}  // namespace

// Gradient accumulators matching the parameter schema, in double precision.
struct GradBuffers {
  std::vector<double> emb, w_ctx, w_know, w_prev, b_hidden, w_out, b_out;

  explicit GradBuffers(const Config& cfg) {
    int v = cfg.vocab_size, d = cfg.hidden_dim;
    emb.assign(static_cast<std::size_t>(v) * d, 0.0);
    w_ctx.assign(static_cast<std::size_t>(d) * d, 0.0);
    w_know.assign(static_cast<std::size_t>(d) * d, 0.0);
    w_prev.assign(static_cast<std::size_t>(d) * d, 0.0);
    b_hidden.assign(d, 0.0);
    w_out.assign(static_cast<std::size_t>(d) * v, 0.0);
    b_out.assign(v, 0.0);
  }

  void zero() {
    auto z = [](std::vector<double>& x) { std::fill(x.begin(), x.end(), 0.0); };
    z(emb); z(w_ctx); z(w_know); z(w_prev); z(b_hidden); z(w_out); z(b_out);
  }

  store::TensorMap to_tensor_map(const Config& cfg) const {
    store::TensorMap out;
    std::int64_t v = cfg.vocab_size, d = cfg.hidden_dim;
    auto put = [&](const char* name, const std::vector<double>& src,
                   std::vector<std::int64_t> shape) {
      store::Tensor t;
      t.shape = std::move(shape);
      t.data.reserve(src.size());
      for (double x : src) t.data.push_back(static_cast<float>(x));
      out.set(name, std::move(t));
    };
    put(kEmbedding, emb, {v, d});
    put(kCtxProj, w_ctx, {d, d});
    put(kKnowProj, w_know, {d, d});
    put(kPrevProj, w_prev, {d, d});
    put(kHiddenBias, b_hidden, {d});
    put(kOutProj, w_out, {d, v});
    put(kOutBias, b_out, {v});
    return out;
  }
};

// Per-conditioning forward state: pooled embeddings and the static part of
// the pre-activation. The response prefix plays no role here; only the
// previous token enters each step.
struct Workspace {
  const ToyLm& model;
  std::vector<int> cond_tokens;  // control tokens ++ last-m context tokens
  std::vector<int> know_tokens;
  std::vector<double> cbar, kbar;
  std::vector<double> fixed_pre;  // w_ctx*cbar + w_know*kbar + b_hidden

  Workspace(const ToyLm& m, const data::DecodeState& state) : model(m) {
    const Config& cfg = m.cfg_;
    m.check_tokens(state.context);
    m.check_tokens(state.knowledge);
    m.check_tokens(state.control_tokens);
    m.check_tokens(state.prefix);

    cond_tokens = state.control_tokens;
    std::size_t window = static_cast<std::size_t>(cfg.context_window);
    std::size_t start =
        state.context.size() > window ? state.context.size() - window : 0;
    cond_tokens.insert(cond_tokens.end(), state.context.begin() + start,
                       state.context.end());
    know_tokens = state.knowledge;

    int d = cfg.hidden_dim;
    cbar.assign(d, 0.0);
    kbar.assign(d, 0.0);
    pool(cond_tokens, cbar);
    pool(know_tokens, kbar);

    fixed_pre.assign(d, 0.0);
    for (int i = 0; i < d; ++i) {
      double acc = model.b_hidden_[i];
      for (int j = 0; j < d; ++j) {
        acc += model.w_ctx_[i * d + j] * cbar[j];
        acc += model.w_know_[i * d + j] * kbar[j];
      }
      fixed_pre[i] = acc;
    }
  }

  void pool(const std::vector<int>& tokens, std::vector<double>& out) const {
    if (tokens.empty()) return;
    int d = model.cfg_.hidden_dim;
    for (int t : tokens) {
      const double* e = &model.emb_[static_cast<std::size_t>(t) * d];
      for (int i = 0; i < d; ++i) out[i] += e[i];
    }
    for (int i = 0; i < d; ++i) out[i] /= static_cast<double>(tokens.size());
  }

  void step(int prev, std::vector<double>& h, std::vector<double>& p) const {
    int d = model.cfg_.hidden_dim;
    int v = model.cfg_.vocab_size;
    const double* eprev = &model.emb_[static_cast<std::size_t>(prev) * d];
    h.resize(d);
    for (int i = 0; i < d; ++i) {
      double acc = fixed_pre[i];
      for (int j = 0; j < d; ++j) acc += model.w_prev_[i * d + j] * eprev[j];
      h[i] = std::tanh(acc);
    }
    std::vector<double> z(v);
    for (int k = 0; k < v; ++k) z[k] = model.b_out_[k];
    for (int j = 0; j < d; ++j) {
      const double* row = &model.w_out_[static_cast<std::size_t>(j) * v];
      double hj = h[j];
      for (int k = 0; k < v; ++k) z[k] += hj * row[k];
    }
    p = softmax(z);
  }

  // Adds scale * grad log p(targets | conditioning, prev chain) into g,
  // teacher forcing the target sequence. Returns the summed log-probability.
  double accumulate_grad(const std::vector<int>& targets, double scale,
                         GradBuffers& g) const {
    const Config& cfg = model.cfg_;
    int d = cfg.hidden_dim;
    int v = cfg.vocab_size;

    std::vector<double> h, p, ga(d), gh(d);
    std::vector<double> ga_static(d, 0.0);  // summed over steps
    double total = 0.0;
    int prev = data::Vocab::bos;
    for (int y : targets) {
      step(prev, h, p);
      total += std::log(p[y]);

      for (int j = 0; j < d; ++j) {
        double ghj = 0.0;
        const double* row = &model.w_out_[static_cast<std::size_t>(j) * v];
        double hj = h[j];
        for (int k = 0; k < v; ++k) {
          double gz = (k == y ? 1.0 : 0.0) - p[k];
          g.w_out[j * v + k] += scale * hj * gz;
          ghj += row[k] * gz;
        }
        gh[j] = ghj;
      }
      for (int k = 0; k < v; ++k) g.b_out[k] += scale * ((k == y ? 1.0 : 0.0) - p[k]);
      for (int i = 0; i < d; ++i) {
        ga[i] = gh[i] * (1.0 - h[i] * h[i]);
        g.b_hidden[i] += scale * ga[i];
        ga_static[i] += ga[i];
      }
      const double* eprev = &model.emb_[static_cast<std::size_t>(prev) * d];
      for (int i = 0; i < d; ++i) {
        double gai = ga[i];
        for (int j = 0; j < d; ++j) g.w_prev[i * d + j] += scale * gai * eprev[j];
      }
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += model.w_prev_[i * d + j] * ga[i];
        g.emb[static_cast<std::size_t>(prev) * d + j] += scale * acc;
      }
      prev = y;
    }

    // The pooled inputs are constant across steps, so their gradients factor
    // through the summed pre-activation gradient.
    for (int i = 0; i < d; ++i) {
      double gs = ga_static[i];
      for (int j = 0; j < d; ++j) {
        g.w_ctx[i * d + j] += scale * gs * cbar[j];
        g.w_know[i * d + j] += scale * gs * kbar[j];
      }
    }
    if (!cond_tokens.empty()) {
      double inv = 1.0 / static_cast<double>(cond_tokens.size());
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += model.w_ctx_[i * d + j] * ga_static[i];
        acc *= inv * scale;
        for (int t : cond_tokens) g.emb[static_cast<std::size_t>(t) * d + j] += acc;
      }
    }
    if (!know_tokens.empty()) {
      double inv = 1.0 / static_cast<double>(know_tokens.size());
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += model.w_know_[i * d + j] * ga_static[i];
        acc *= inv * scale;
        for (int t : know_tokens) g.emb[static_cast<std::size_t>(t) * d + j] += acc;
      }
    }
    return total;
  }
};

ToyLm::ToyLm(const Config& cfg) : cfg_(cfg) {
  validate_config(cfg);
  int v = cfg.vocab_size, d = cfg.hidden_dim;
  emb_.assign(static_cast<std::size_t>(v) * d, 0.0);
  w_ctx_.assign(static_cast<std::size_t>(d) * d, 0.0);
  w_know_.assign(static_cast<std::size_t>(d) * d, 0.0);
  w_prev_.assign(static_cast<std::size_t>(d) * d, 0.0);
  b_hidden_.assign(d, 0.0);
  w_out_.assign(static_cast<std::size_t>(d) * v, 0.0);
  b_out_.assign(v, 0.0);
}

ToyLm ToyLm::init(const Config& cfg, std::uint64_t seed) {
  ToyLm model(cfg);
  Rng rng(seed);
  double proj_scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  for (double& x : model.emb_) x = 0.5 * rng.normal();
  for (double& x : model.w_ctx_) x = proj_scale * rng.normal();
  for (double& x : model.w_know_) x = proj_scale * rng.normal();
  for (double& x : model.w_prev_) x = proj_scale * rng.normal();
  for (double& x : model.w_out_) x = proj_scale * rng.normal();
  // biases start at zero
  return model;
}

ToyLm ToyLm::from_tensor_map(const store::TensorMap& params) {
  Config cfg;
  auto need = [&](const char* key) {
    std::string v = params.metadata_or(key, "");
    if (v.empty())
      fail(ErrorKind::invalid_config,
           std::string("checkpoint missing metadata key ") + key);
    return std::stoi(v);
  };
  cfg.vocab_size = need("config_vocab_size");
  cfg.hidden_dim = need("config_hidden_dim");
  cfg.context_window = need("config_context_window");
  ToyLm model(cfg);
  auto read = [&](const char* name, std::vector<double>& dst,
                  std::vector<std::int64_t> want_shape) {
    const store::Tensor& t = params.at(name);
    if (t.shape != want_shape)
      fail(ErrorKind::invalid_config,
           std::string("checkpoint tensor ") + name + " has unexpected shape");
    dst.assign(t.data.begin(), t.data.end());
  };
  std::int64_t v = cfg.vocab_size, d = cfg.hidden_dim;
  read(kEmbedding, model.emb_, {v, d});
  read(kCtxProj, model.w_ctx_, {d, d});
  read(kKnowProj, model.w_know_, {d, d});
  read(kPrevProj, model.w_prev_, {d, d});
  read(kHiddenBias, model.b_hidden_, {d});
  read(kOutProj, model.w_out_, {d, v});
  read(kOutBias, model.b_out_, {v});
  return model;
}

store::TensorMap ToyLm::to_tensor_map() const {
  store::TensorMap out;
  std::int64_t v = cfg_.vocab_size, d = cfg_.hidden_dim;
  auto put = [&](const char* name, const std::vector<double>& src,
                 std::vector<std::int64_t> shape) {
    store::Tensor t;
    t.shape = std::move(shape);
    t.data.reserve(src.size());
    for (double x : src) t.data.push_back(static_cast<float>(x));
    out.set(name, std::move(t));
  };
  put(kEmbedding, emb_, {v, d});
  put(kCtxProj, w_ctx_, {d, d});
  put(kKnowProj, w_know_, {d, d});
  put(kPrevProj, w_prev_, {d, d});
  put(kHiddenBias, b_hidden_, {d});
  put(kOutProj, w_out_, {d, v});
  put(kOutBias, b_out_, {v});
  out.set_metadata("config_vocab_size", std::to_string(cfg_.vocab_size));
  out.set_metadata("config_hidden_dim", std::to_string(cfg_.hidden_dim));
  out.set_metadata("config_context_window", std::to_string(cfg_.context_window));
  return out;
}

void ToyLm::check_tokens(const std::vector<int>& tokens) const {
  for (int t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size)
      fail(ErrorKind::token_out_of_range,
           "token id " + std::to_string(t) + " outside vocabulary of size " +
               std::to_string(cfg_.vocab_size));
  }
}

std::vector<double>& ToyLm::tensor_by_name(const std::string& name) {
  if (name == kEmbedding) return emb_;
  if (name == kCtxProj) return w_ctx_;
  if (name == kKnowProj) return w_know_;
  if (name == kPrevProj) return w_prev_;
  if (name == kHiddenBias) return b_hidden_;
  if (name == kOutProj) return w_out_;
  if (name == kOutBias) return b_out_;
  fail(ErrorKind::invalid_config, "unknown parameter tensor: " + name);
}

void ToyLm::perturb(const std::string& tensor, std::size_t index, double amount) {
  std::vector<double>& t = tensor_by_name(tensor);
  if (index >= t.size())
    fail(ErrorKind::invalid_config, "perturb index out of range for " + tensor);
  t[index] += amount;
}

void ToyLm::add_delta(const store::TensorMap& delta) {
  store::require_mergeable(to_tensor_map(), delta, "add_delta");
  for (const auto& [name, t] : delta.entries()) {
    std::vector<double>& dst = tensor_by_name(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) dst[i] += t.data[i];
  }
}

ScoredExample ToyLm::log_prob(const data::DialogueExample& ex) const {
  if (ex.response.empty())
    fail(ErrorKind::data, "log_prob requires a non-empty response");
  check_tokens(ex.response);
  Workspace ws(*this, data::conditioning_of(ex));
  ScoredExample out;
  std::vector<double> h, p;
  int prev = data::Vocab::bos;
  for (int y : ex.response) {
    ws.step(prev, h, p);
    out.per_token.push_back(std::log(p[y]));
    prev = y;
  }
  for (double lp : out.per_token) out.total += lp;
  return out;
}

store::TensorMap ToyLm::grad_log_prob(const data::DialogueExample& ex) const {
  if (ex.response.empty())
    fail(ErrorKind::data, "grad_log_prob requires a non-empty response");
  check_tokens(ex.response);
  Workspace ws(*this, data::conditioning_of(ex));
  GradBuffers g(cfg_);
  ws.accumulate_grad(ex.response, 1.0, g);
  return g.to_tensor_map(cfg_);
}

std::vector<double> ToyLm::next_token_dist(const data::DecodeState& state) const {
  Workspace ws(*this, state);
  std::vector<double> h, p;
  int prev = state.prefix.empty() ? data::Vocab::bos : state.prefix.back();
  ws.step(prev, h, p);
  return p;
}

store::TensorMap ToyLm::next_token_grad(const data::DecodeState& state,
                                        int token) const {
  if (token < 0 || token >= cfg_.vocab_size)
    fail(ErrorKind::token_out_of_range,
         "token id " + std::to_string(token) + " outside vocabulary");
  Workspace ws(*this, state);
  GradBuffers g(cfg_);
  // Single-step teacher forcing starting from the state's last prefix token.
  int prev = state.prefix.empty() ? data::Vocab::bos : state.prefix.back();
  int d = cfg_.hidden_dim, v = cfg_.vocab_size;
  std::vector<double> h, p, ga(d), gh(d);
  ws.step(prev, h, p);
  for (int j = 0; j < d; ++j) {
    double ghj = 0.0;
    const double* row = &w_out_[static_cast<std::size_t>(j) * v];
    for (int k = 0; k < v; ++k) {
      double gz = (k == token ? 1.0 : 0.0) - p[k];
      g.w_out[j * v + k] = h[j] * gz;
      ghj += row[k] * gz;
    }
    gh[j] = ghj;
  }
  for (int k = 0; k < v; ++k) g.b_out[k] = (k == token ? 1.0 : 0.0) - p[k];
  for (int i = 0; i < d; ++i) {
    ga[i] = gh[i] * (1.0 - h[i] * h[i]);
    g.b_hidden[i] = ga[i];
  }
  const double* eprev = &emb_[static_cast<std::size_t>(prev) * d];
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g.w_prev[i * d + j] = ga[i] * eprev[j];
  for (int j = 0; j < d; ++j) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) acc += w_prev_[i * d + j] * ga[i];
    g.emb[static_cast<std::size_t>(prev) * d + j] += acc;
  }
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      g.w_ctx[i * d + j] = ga[i] * ws.cbar[j];
      g.w_know[i * d + j] = ga[i] * ws.kbar[j];
    }
  }
  if (!ws.cond_tokens.empty()) {
    double inv = 1.0 / static_cast<double>(ws.cond_tokens.size());
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int i = 0; i < d; ++i) acc += w_ctx_[i * d + j] * ga[i];
      acc *= inv;
      for (int t : ws.cond_tokens) g.emb[static_cast<std::size_t>(t) * d + j] += acc;
    }
  }
  if (!ws.know_tokens.empty()) {
    double inv = 1.0 / static_cast<double>(ws.know_tokens.size());
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int i = 0; i < d; ++i) acc += w_know_[i * d + j] * ga[i];
      acc *= inv;
      for (int t : ws.know_tokens) g.emb[static_cast<std::size_t>(t) * d + j] += acc;
    }
  }
  return g.to_tensor_map(cfg_);
}

ToyLm train(const ToyLm& initial, const std::vector<data::DialogueExample>& dataset,
            const TrainHyper& hyper, TrainLog* log) {
  if (dataset.empty()) fail(ErrorKind::empty_dataset, "train: empty dataset");
  if (hyper.epochs < 0 || hyper.batch_size < 1)
    fail(ErrorKind::invalid_config, "train: invalid hyperparameters");

  ToyLm model = initial;
  const Config& cfg = model.config();

  std::vector<std::size_t> train_idx(dataset.size());
  for (std::size_t i = 0; i < train_idx.size(); ++i) train_idx[i] = i;

  std::vector<std::size_t> val_idx;
  if (hyper.validation_fraction > 0.0) {
    Rng split_rng = Rng::derive(hyper.seed, "val_split");
    split_rng.shuffle(train_idx);
    std::size_t n_val = static_cast<std::size_t>(
        std::ceil(hyper.validation_fraction * static_cast<double>(dataset.size())));
    n_val = std::min(n_val, dataset.size() - 1);
    val_idx.assign(train_idx.end() - n_val, train_idx.end());
    train_idx.resize(train_idx.size() - n_val);
  }

  auto mean_nll = [&](const ToyLm& m, const std::vector<std::size_t>& idx) {
    double total = 0.0;
    for (std::size_t i : idx) total += m.log_prob(dataset[i]).total;
    return -total / static_cast<double>(idx.size());
  };

  Rng rng = Rng::derive(hyper.seed, "train_shuffle");
  GradBuffers grad(cfg);
  ToyLm best = model;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::vector<std::size_t> idx = train_idx;
    rng.shuffle(idx);
    std::size_t batch_size = static_cast<std::size_t>(hyper.batch_size);
    for (std::size_t b = 0; b < idx.size(); b += batch_size) {
      std::size_t end = std::min(idx.size(), b + batch_size);
      double inv = 1.0 / static_cast<double>(end - b);
      grad.zero();
      double batch_lp = 0.0;
      for (std::size_t k = b; k < end; ++k) {
        const data::DialogueExample& ex = dataset[idx[k]];
        Workspace ws(model, data::conditioning_of(ex));
        batch_lp += ws.accumulate_grad(ex.response, inv, grad);
      }
      if (!std::isfinite(batch_lp))
        fail(ErrorKind::divergence,
             "training diverged (non-finite loss) at epoch " +
                 std::to_string(epoch) + ", batch " +
                 std::to_string(b / batch_size));
      auto update = [&](std::vector<double>& param, const std::vector<double>& g) {
        for (std::size_t i = 0; i < param.size(); ++i)
          param[i] += hyper.lr * (g[i] - hyper.l2 * param[i]);
      };
      update(model.emb_, grad.emb);
      update(model.w_ctx_, grad.w_ctx);
      update(model.w_know_, grad.w_know);
      update(model.w_prev_, grad.w_prev);
      update(model.b_hidden_, grad.b_hidden);
      update(model.w_out_, grad.w_out);
      update(model.b_out_, grad.b_out);
    }
    if (log) log->train_nll.push_back(mean_nll(model, train_idx));
    if (!val_idx.empty()) {
      double val = mean_nll(model, val_idx);
      if (log) log->val_nll.push_back(val);
      if (val < best_val) {
        best_val = val;
        best = model;
        best_epoch = epoch;
      }
    }
  }
  if (!val_idx.empty()) {
    if (log) log->best_epoch = best_epoch;
    return best;
  }
  return model;
}

std::vector<GenerationCandidate> beam_search(const NextDistFn& next_dist,
                                             int vocab_size, int beam_size,
                                             int max_len) {
  if (beam_size < 1) fail(ErrorKind::invalid_config, "beam_size must be >= 1");
  if (max_len < 1) fail(ErrorKind::invalid_config, "max_len must be >= 1");

  struct Beam {
    std::vector<int> tokens;
    double lp = 0.0;
    std::vector<double> ptlp;
    bool done = false;
  };
  auto better = [](const Beam& a, const Beam& b) {
    if (a.lp != b.lp) return a.lp > b.lp;
    return a.tokens < b.tokens;
  };

  std::vector<Beam> active(1);
  std::vector<Beam> finished;
  for (int step = 0; step < max_len && !active.empty(); ++step) {
    // finished beams keep competing for slots against fresh expansions
    std::vector<Beam> pool = finished;
    for (const Beam& b : active) {
      std::vector<double> p = next_dist(b.tokens);
      if (static_cast<int>(p.size()) != vocab_size)
        fail(ErrorKind::invalid_config, "next_dist returned wrong vocabulary size");
      for (int v = 0; v < vocab_size; ++v) {
        Beam child = b;
        child.tokens.push_back(v);
        double lp = std::log(p[v]);
        child.lp += lp;
        child.ptlp.push_back(lp);
        child.done = (v == data::Vocab::eos);
        pool.push_back(std::move(child));
      }
    }
    std::sort(pool.begin(), pool.end(), better);
    if (static_cast<int>(pool.size()) > beam_size) pool.resize(beam_size);
    finished.clear();
    active.clear();
    for (Beam& b : pool) (b.done ? finished : active).push_back(std::move(b));
  }

  std::vector<Beam> all = std::move(finished);
  all.insert(all.end(), std::make_move_iterator(active.begin()),
             std::make_move_iterator(active.end()));
  std::sort(all.begin(), all.end(), better);
  if (static_cast<int>(all.size()) > beam_size) all.resize(beam_size);

  std::vector<GenerationCandidate> out;
  out.reserve(all.size());
  for (Beam& b : all)
    out.push_back({std::move(b.tokens), b.lp, std::move(b.ptlp)});
  return out;
}

std::vector<GenerationCandidate> generate_beam(const ToyLm& model,
                                               const data::DecodeState& conditioning,
                                               int beam_size, int max_len) {
  Workspace ws(model, conditioning);
  NextDistFn fn = [&ws](const std::vector<int>& prefix) {
    std::vector<double> h, p;
    int prev = prefix.empty() ? data::Vocab::bos : prefix.back();
    ws.step(prev, h, p);
    return p;
  };
  return beam_search(fn, model.config().vocab_size, beam_size, max_len);
}

}  // namespace ewr::toylm
