#include "ewr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "ewr/curate.hpp"
#include "ewr/error.hpp"
#include "ewr/text.hpp"

namespace ewr::metrics {

double token_f1(const std::vector<std::string>& hypothesis,
                const std::vector<std::string>& reference) {
  if (hypothesis.empty() && reference.empty()) return 1.0;
  if (hypothesis.empty() || reference.empty()) return 0.0;
  std::map<std::string, int> hyp_counts, ref_counts;
  for (const auto& t : hypothesis) ++hyp_counts[t];
  for (const auto& t : reference) ++ref_counts[t];
  double overlap = 0.0;
  for (const auto& [token, count] : hyp_counts) {
    auto it = ref_counts.find(token);
    if (it != ref_counts.end()) overlap += std::min(count, it->second);
  }
  if (overlap == 0.0) return 0.0;
  double precision = overlap / static_cast<double>(hypothesis.size());
  double recall = overlap / static_cast<double>(reference.size());
  return 2.0 * precision * recall / (precision + recall);
}

double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.size() != references.size())
    fail(ErrorKind::data, "corpus_bleu: hypothesis/reference count mismatch");
  if (hypotheses.empty()) fail(ErrorKind::empty_dataset, "corpus_bleu: empty corpus");

  constexpr int kMaxOrder = 4;
  double matches[kMaxOrder] = {0, 0, 0, 0};
  double totals[kMaxOrder] = {0, 0, 0, 0};
  double hyp_len = 0.0, ref_len = 0.0;

  using Ngram = std::vector<std::string>;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    hyp_len += static_cast<double>(hyp.size());
    ref_len += static_cast<double>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      if (hyp.size() < static_cast<std::size_t>(n)) continue;
      std::map<Ngram, int> hyp_ngrams, ref_ngrams;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i)
        ++hyp_ngrams[Ngram(hyp.begin() + i, hyp.begin() + i + n)];
      for (std::size_t i = 0; i + n <= ref.size(); ++i)
        ++ref_ngrams[Ngram(ref.begin() + i, ref.begin() + i + n)];
      for (const auto& [ngram, count] : hyp_ngrams) {
        totals[n - 1] += count;
        auto it = ref_ngrams.find(ngram);
        if (it != ref_ngrams.end())
          matches[n - 1] += std::min(count, it->second);
      }
    }
  }

  double log_precision_sum = 0.0;
  for (int n = 1; n <= kMaxOrder; ++n) {
    double m = matches[n - 1], t = totals[n - 1];
    if (t == 0.0) {
      // no n-grams of this order in the whole corpus; skip the order
      continue;
    }
    if (m == 0.0) {
      if (n == 1) return 0.0;  // unigram precision stays unsmoothed
      m = 1.0;
      t += 1.0;
    }
    log_precision_sum += std::log(m / t) / kMaxOrder;
  }
  if (hyp_len == 0.0) return 0.0;
  double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_precision_sum);
}

double lcs_ratio(const std::vector<std::string>& response,
                 const std::vector<std::string>& knowledge) {
  if (response.empty())
    fail(ErrorKind::empty_dataset, "lcs_ratio: empty response");
  std::size_t n = response.size(), m = knowledge.size();
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      if (response[i - 1] == knowledge[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[m]) / static_cast<double>(n);
}

double hallucination_rate(const std::vector<std::string>& response,
                          const std::vector<std::string>& knowledge,
                          const std::vector<std::string>& context) {
  std::size_t content = 0, unsupported = 0;
  for (const auto& token : response) {
    if (text::is_stopword(token) || text::is_control_token(token)) continue;
    ++content;
    bool grounded =
        std::find(knowledge.begin(), knowledge.end(), token) != knowledge.end() ||
        std::find(context.begin(), context.end(), token) != context.end();
    if (!grounded) ++unsupported;
  }
  if (content == 0) return 0.0;
  return static_cast<double>(unsupported) / static_cast<double>(content);
}

nlohmann::json EvalReport::to_json() const {
  return {{"bleu", bleu},
          {"token_f1_ref", token_f1_ref},
          {"token_f1_knowledge", token_f1_knowledge},
          {"lcs_ratio", lcs_ratio},
          {"density", density},
          {"coverage", coverage},
          {"hallucination_rate", hallucination_rate},
          {"n_examples", n_examples}};
}

std::string EvalReport::csv_header() {
  return "bleu,token_f1_ref,token_f1_knowledge,lcs_ratio,density,coverage,"
         "hallucination_rate,n_examples";
}

std::string EvalReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%zu",
                bleu, token_f1_ref, token_f1_knowledge, lcs_ratio, density,
                coverage, hallucination_rate, n_examples);
  return buf;
}

EvalReport evaluate(const std::vector<std::string>& outputs,
                    const std::vector<data::TextExample>& dataset) {
  if (dataset.empty()) fail(ErrorKind::empty_dataset, "evaluate: empty dataset");
  if (outputs.size() != dataset.size())
    fail(ErrorKind::data, "evaluate: outputs do not align 1:1 with the dataset (" +
                              std::to_string(outputs.size()) + " vs " +
                              std::to_string(dataset.size()) + ")");

  EvalReport report;
  report.n_examples = dataset.size();
  std::vector<std::vector<std::string>> hyps, refs;
  hyps.reserve(outputs.size());
  refs.reserve(outputs.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    std::vector<std::string> hyp = text::tokenize(outputs[i]);
    std::vector<std::string> ref = data::response_tokens(dataset[i]);
    std::vector<std::string> knowledge = data::knowledge_tokens(dataset[i]);
    std::vector<std::string> context = data::context_tokens(dataset[i]);

    report.token_f1_ref += token_f1(hyp, ref);
    report.token_f1_knowledge += token_f1(hyp, knowledge);
    report.hallucination_rate += hallucination_rate(hyp, knowledge, context);
    if (!hyp.empty()) {
      report.lcs_ratio += lcs_ratio(hyp, knowledge);
      curate::FragmentStats stats = curate::extractive_fragments(hyp, knowledge);
      report.density += stats.density;
      report.coverage += stats.coverage;
    }
    hyps.push_back(std::move(hyp));
    refs.push_back(std::move(ref));
  }
  double inv = 1.0 / static_cast<double>(dataset.size());
  report.token_f1_ref *= inv;
  report.token_f1_knowledge *= inv;
  report.lcs_ratio *= inv;
  report.density *= inv;
  report.coverage *= inv;
  report.hallucination_rate *= inv;
  report.bleu = corpus_bleu(hyps, refs);
  return report;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    fail(ErrorKind::invalid_config, "spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size(), 0.0);
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(x), ry = ranks(y);
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    cov += (rx[i] - mx) * (ry[i] - my);
    vx += (rx[i] - mx) * (rx[i] - mx);
    vy += (ry[i] - my) * (ry[i] - my);
  }
  if (vx == 0.0 || vy == 0.0) return 0.0;
  return cov / std::sqrt(vx * vy);
}

}  // namespace ewr::metrics
