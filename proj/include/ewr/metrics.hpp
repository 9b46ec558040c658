#pragma once

#include <string>
#include <vector>

#include "ewr/dataset.hpp"
#include "json.hpp"

namespace ewr::metrics {

// Unigram F1 with multiset clipping. 1 if both sides are empty, 0 if exactly
// one is. Symmetric in its arguments.
double token_f1(const std::vector<std::string>& hypothesis,
                const std::vector<std::string>& reference);

// Corpus BLEU-4 with brevity penalty in [0, 100], single reference per
// hypothesis. Zero match counts for n >= 2 get add-one smoothing
// ((m+1)/(t+1)); unigram precision is left unsmoothed.
double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references);

// Length of the longest common subsequence with the knowledge, divided by the
// response length (the precision term of ROUGE-L).
double lcs_ratio(const std::vector<std::string>& response,
                 const std::vector<std::string>& knowledge);

// Fraction of response content tokens (non-stopword, non-control) that appear
// in neither the knowledge nor the context. Exact ground truth on the
// synthetic corpus, standing in for a learned faithfulness critic.
double hallucination_rate(const std::vector<std::string>& response,
                          const std::vector<std::string>& knowledge,
                          const std::vector<std::string>& context);

struct EvalReport {
  double bleu = 0.0;
  double token_f1_ref = 0.0;
  double token_f1_knowledge = 0.0;
  double lcs_ratio = 0.0;
  double density = 0.0;
  double coverage = 0.0;
  double hallucination_rate = 0.0;
  std::size_t n_examples = 0;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

// Scores generated responses (aligned 1:1 by index) against the dataset.
EvalReport evaluate(const std::vector<std::string>& outputs,
                    const std::vector<data::TextExample>& dataset);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace ewr::metrics
