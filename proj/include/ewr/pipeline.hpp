#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ewr/dataset.hpp"
#include "ewr/fisher.hpp"
#include "ewr/merge.hpp"
#include "ewr/metrics.hpp"
#include "ewr/synth.hpp"
#include "ewr/toy_lm.hpp"
#include "json.hpp"

namespace ewr::pipeline {

// Artifact file names inside the pipeline output directory.
inline constexpr const char* kBaseFile = "base.safetensors";
inline constexpr const char* kAntiExpertFile = "anti_expert.safetensors";
inline constexpr const char* kExpertFile = "expert.safetensors";
inline constexpr const char* kTauAntiExpertFile = "tau_anti_expert.safetensors";
inline constexpr const char* kTauExpertFile = "tau_expert.safetensors";
inline constexpr const char* kFisherBaseFile = "fisher_base.safetensors";
inline constexpr const char* kFisherAntiExpertFile = "fisher_anti_expert.safetensors";
inline constexpr const char* kFisherExpertFile = "fisher_expert.safetensors";
inline constexpr const char* kMergedFile = "merged.safetensors";
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kTrainData = "corpus/train.jsonl";
inline constexpr const char* kEvalData = "corpus/eval.jsonl";
inline constexpr const char* kVocabFile = "corpus/vocab.json";
inline constexpr const char* kAntiExpertData = "corpus/anti_expert.jsonl";
inline constexpr const char* kExpertData = "corpus/expert.jsonl";

// Full experiment configuration. When train_path is empty the synthetic
// corpus is generated into out_dir/corpus; otherwise train/eval/vocab are
// loaded from the given paths.
struct PipelineConfig {
  std::uint64_t seed = 1234;

  std::filesystem::path out_dir;
  std::filesystem::path train_path, eval_path, vocab_path;

  synth::CorpusConfig corpus;  // used when generating
  int eval_examples = 100;

  int hidden_dim = 16;
  int context_window = 8;

  int base_epochs = 30;
  int expert_epochs = 15;  // (anti-)experts train half as long as the base
  double lr = 0.1;
  int batch_size = 16;
  double l2 = 0.0;
  double validation_fraction = 0.0;

  double coverage_threshold = 0.4;

  double lambda0 = 1.0;
  double lambda1 = 0.15;  // hallucination anti-expert
  double lambda2 = 0.0;   // abstraction expert
  merge::ZeroDenomPolicy policy = merge::ZeroDenomPolicy::keep_base;
  fisher::Granularity granularity = fisher::Granularity::per_example;

  static PipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct PipelineResult {
  nlohmann::json manifest;
  std::filesystem::path manifest_path;
};

// Runs the full recipe: train the base on D, build the knowledge-swap
// anti-expert set and the abstractive expert set, train both experts from the
// base initialisation, compute task vectors and the three Fishers, and write
// the EWR merge plus a fingerprint manifest. Bit-identical under one config.
PipelineResult run_pipeline(const PipelineConfig& config);

struct SweepConfig {
  std::filesystem::path artifacts_dir;  // a previous pipeline out_dir
  std::vector<double> lambda1_grid;     // anti-expert axis
  std::vector<double> lambda2_grid = {0.0};
  double lambda0 = 1.0;
  merge::ZeroDenomPolicy policy = merge::ZeroDenomPolicy::keep_base;
  std::filesystem::path eval_path;   // defaults to artifacts_dir/corpus/eval.jsonl
  std::filesystem::path vocab_path;  // defaults to artifacts_dir/corpus/vocab.json
  int beam_size = 10;
  int max_len = 16;
  std::vector<std::string> control_tokens;  // fixed conditioning, if any
  std::filesystem::path out_csv;

  static SweepConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SweepRow {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  metrics::EvalReport report;
};

std::string sweep_csv_header();
std::string sweep_csv_row(const SweepRow& row);

// Merges at every grid point, decodes the eval set with beam search,
// evaluates, and writes one CSV row per point (grid order, lambda1 major).
std::vector<SweepRow> run_sweep(const SweepConfig& config);

// Beam-decodes every example and returns the top candidate's text. When
// control_override is non-empty it replaces each example's control tokens.
std::vector<std::string> decode_dataset(
    const toylm::ToyLm& model, const std::vector<data::DialogueExample>& dataset,
    const data::Vocab& vocab, int beam_size, int max_len,
    const std::vector<int>& control_override = {});

}  // namespace ewr::pipeline
