#include "ewr/pipeline.hpp"

#include <cstdio>
#include <fstream>

#include "ewr/curate.hpp"
#include "ewr/error.hpp"
#include "ewr/lm_provider.hpp"
#include "ewr/rng.hpp"

namespace ewr::pipeline {

using nlohmann::json;

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("train")) c.train_path = j["train"].get<std::string>();
  if (j.contains("eval")) c.eval_path = j["eval"].get<std::string>();
  if (j.contains("vocab")) c.vocab_path = j["vocab"].get<std::string>();
  if (j.contains("corpus")) {
    const json& k = j["corpus"];
    c.corpus.n_examples = k.value("n_examples", c.corpus.n_examples);
    c.corpus.corruption_rate = k.value("corruption_rate", c.corpus.corruption_rate);
    c.corpus.abstractive_fraction =
        k.value("abstractive_fraction", c.corpus.abstractive_fraction);
    c.corpus.two_fact_fraction =
        k.value("two_fact_fraction", c.corpus.two_fact_fraction);
  }
  c.eval_examples = j.value("eval_examples", c.eval_examples);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.context_window = j.value("context_window", c.context_window);
  c.base_epochs = j.value("base_epochs", c.base_epochs);
  c.expert_epochs = j.value("expert_epochs", c.expert_epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.l2 = j.value("l2", c.l2);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.coverage_threshold = j.value("coverage_threshold", c.coverage_threshold);
  c.lambda0 = j.value("lambda0", c.lambda0);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  if (j.contains("zero_denominator_policy"))
    c.policy = merge::policy_from_string(j["zero_denominator_policy"].get<std::string>());
  if (j.contains("granularity"))
    c.granularity = fisher::granularity_from_string(j["granularity"].get<std::string>());
  return c;
}

json PipelineConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir.string();
  if (!train_path.empty()) j["train"] = train_path.string();
  if (!eval_path.empty()) j["eval"] = eval_path.string();
  if (!vocab_path.empty()) j["vocab"] = vocab_path.string();
  j["corpus"] = {{"n_examples", corpus.n_examples},
                 {"corruption_rate", corpus.corruption_rate},
                 {"abstractive_fraction", corpus.abstractive_fraction},
                 {"two_fact_fraction", corpus.two_fact_fraction}};
  j["eval_examples"] = eval_examples;
  j["hidden_dim"] = hidden_dim;
  j["context_window"] = context_window;
  j["base_epochs"] = base_epochs;
  j["expert_epochs"] = expert_epochs;
  j["lr"] = lr;
  j["batch_size"] = batch_size;
  j["l2"] = l2;
  j["validation_fraction"] = validation_fraction;
  j["coverage_threshold"] = coverage_threshold;
  j["lambda0"] = lambda0;
  j["lambda1"] = lambda1;
  j["lambda2"] = lambda2;
  j["zero_denominator_policy"] = merge::to_string(policy);
  j["granularity"] = fisher::to_string(granularity);
  return j;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out << content;
  if (!out) fail(ErrorKind::io, "write failure on " + path.string());
}

store::TensorMap save_model(const toylm::ToyLm& model, const std::string& role,
                            const std::filesystem::path& path) {
  store::TensorMap map = model.to_tensor_map();
  map.set_metadata(store::kRoleKey, role);
  store::save(map, path);
  return map;
}

}  // namespace

std::vector<std::string> decode_dataset(
    const toylm::ToyLm& model, const std::vector<data::DialogueExample>& dataset,
    const data::Vocab& vocab, int beam_size, int max_len,
    const std::vector<int>& control_override) {
  std::vector<std::string> outputs;
  outputs.reserve(dataset.size());
  for (const auto& ex : dataset) {
    data::DecodeState cond = data::conditioning_of(ex);
    if (!control_override.empty()) cond.control_tokens = control_override;
    auto candidates = toylm::generate_beam(model, cond, beam_size, max_len);
    outputs.push_back(candidates.empty()
                          ? std::string()
                          : data::decode_response(candidates.front().tokens, vocab));
  }
  return outputs;
}

PipelineResult run_pipeline(const PipelineConfig& config) {
  if (config.out_dir.empty())
    fail(ErrorKind::usage, "pipeline requires an output directory");
  std::filesystem::create_directories(config.out_dir / "corpus");

  // --- corpus ---
  std::vector<data::TextExample> train_text, eval_text;
  data::Vocab vocab = synth::make_vocab();
  if (config.train_path.empty()) {
    synth::CorpusConfig train_cfg = config.corpus;
    train_cfg.seed = Rng::derive_seed(config.seed, "corpus_train");
    train_text = synth::generate(train_cfg);
    synth::CorpusConfig eval_cfg = config.corpus;
    eval_cfg.n_examples = config.eval_examples;
    eval_cfg.corruption_rate = 0.0;  // gold responses are faithful
    eval_cfg.seed = Rng::derive_seed(config.seed, "corpus_eval");
    eval_text = synth::generate(eval_cfg);
    data::save_jsonl(train_text, config.out_dir / kTrainData);
    data::save_jsonl(eval_text, config.out_dir / kEvalData);
    vocab.save(config.out_dir / kVocabFile);
  } else {
    train_text = data::load_jsonl(config.train_path);
    eval_text = data::load_jsonl(config.eval_path);
    vocab = data::Vocab::load(config.vocab_path);
    data::save_jsonl(train_text, config.out_dir / kTrainData);
    data::save_jsonl(eval_text, config.out_dir / kEvalData);
    vocab.save(config.out_dir / kVocabFile);
  }
  if (train_text.empty()) fail(ErrorKind::empty_dataset, "pipeline: empty training set");

  // --- curated splits ---
  std::vector<curate::SwapRecord> swap_prov;
  std::vector<data::TextExample> anti_text = curate::knowledge_swap(
      train_text, Rng::derive_seed(config.seed, "knowledge_swap"), &swap_prov);
  std::vector<std::size_t> expert_idx =
      curate::select_abstractive_expert(train_text, config.coverage_threshold);
  if (expert_idx.empty())
    fail(ErrorKind::data,
         "pipeline: abstractive expert selection is empty; lower the coverage threshold");
  std::vector<data::TextExample> expert_text = curate::take(train_text, expert_idx);
  data::save_jsonl(anti_text, config.out_dir / kAntiExpertData);
  data::save_jsonl(expert_text, config.out_dir / kExpertData);
  {
    json prov;
    prov["rule"] = "knowledge_swap";
    json records = json::array();
    for (const auto& r : swap_prov)
      records.push_back({{"index", r.index}, {"donor", r.donor}});
    prov["per_example"] = records;
    json expert_prov;
    expert_prov["rule"] = "low_density_high_coverage";
    expert_prov["coverage_threshold"] = config.coverage_threshold;
    expert_prov["indices"] = expert_idx;
    json all;
    all["anti_expert"] = prov;
    all["expert"] = expert_prov;
    write_text(config.out_dir / "corpus/provenance.json", all.dump(2) + "\n");
  }

  auto train_enc = data::encode_all(train_text, vocab);
  auto anti_enc = data::encode_all(anti_text, vocab);
  auto expert_enc = data::encode_all(expert_text, vocab);

  // --- training ---
  toylm::Config model_cfg{vocab.size(), config.hidden_dim, config.context_window};
  toylm::ToyLm seed_model =
      toylm::ToyLm::init(model_cfg, Rng::derive_seed(config.seed, "init"));

  toylm::TrainHyper base_hyper;
  base_hyper.epochs = config.base_epochs;
  base_hyper.lr = config.lr;
  base_hyper.batch_size = config.batch_size;
  base_hyper.l2 = config.l2;
  base_hyper.validation_fraction = config.validation_fraction;
  base_hyper.seed = Rng::derive_seed(config.seed, "train_base");
  toylm::ToyLm base = toylm::train(seed_model, train_enc, base_hyper);

  toylm::TrainHyper expert_hyper = base_hyper;
  expert_hyper.epochs = config.expert_epochs;
  expert_hyper.validation_fraction = 0.0;
  expert_hyper.seed = Rng::derive_seed(config.seed, "train_anti_expert");
  toylm::ToyLm anti = toylm::train(base, anti_enc, expert_hyper);
  expert_hyper.seed = Rng::derive_seed(config.seed, "train_expert");
  toylm::ToyLm expert = toylm::train(base, expert_enc, expert_hyper);

  store::TensorMap base_map = save_model(base, "base", config.out_dir / kBaseFile);
  store::TensorMap anti_map =
      save_model(anti, "anti_expert", config.out_dir / kAntiExpertFile);
  store::TensorMap expert_map =
      save_model(expert, "expert", config.out_dir / kExpertFile);

  // --- task vectors ---
  store::TensorMap tau_anti = merge::task_vector(anti_map, base_map);
  store::TensorMap tau_expert = merge::task_vector(expert_map, base_map);
  store::save(tau_anti, config.out_dir / kTauAntiExpertFile);
  store::save(tau_expert, config.out_dir / kTauExpertFile);

  // --- Fishers (each model on its own dataset) ---
  toylm::ToyLmProvider base_provider(base);
  toylm::ToyLmProvider anti_provider(anti);
  toylm::ToyLmProvider expert_provider(expert);
  store::TensorMap fisher_base = fisher::empirical_fisher(
      base_provider, train_enc, config.granularity, config.batch_size);
  store::TensorMap fisher_anti = fisher::empirical_fisher(
      anti_provider, anti_enc, config.granularity, config.batch_size);
  store::TensorMap fisher_expert = fisher::empirical_fisher(
      expert_provider, expert_enc, config.granularity, config.batch_size);
  store::save(fisher_base, config.out_dir / kFisherBaseFile);
  store::save(fisher_anti, config.out_dir / kFisherAntiExpertFile);
  store::save(fisher_expert, config.out_dir / kFisherExpertFile);

  // --- merge ---
  merge::MergeRecipe recipe;
  recipe.mode = merge::Mode::ewr;
  recipe.base = std::make_shared<store::TensorMap>(base_map);
  recipe.base_lambda = config.lambda0;
  recipe.base_fisher = std::make_shared<store::TensorMap>(fisher_base);
  recipe.zero_denominator_policy = config.policy;
  recipe.components.push_back({merge::Role::anti_expert, config.lambda1,
                               std::make_shared<store::TensorMap>(tau_anti),
                               std::make_shared<store::TensorMap>(fisher_anti)});
  recipe.components.push_back({merge::Role::expert, config.lambda2,
                               std::make_shared<store::TensorMap>(tau_expert),
                               std::make_shared<store::TensorMap>(fisher_expert)});
  store::TensorMap merged = merge::ewr(recipe);
  store::save(merged, config.out_dir / kMergedFile);

  {
    json recipe_doc;
    recipe_doc["mode"] = "ewr";
    recipe_doc["base"] = kBaseFile;
    recipe_doc["base_lambda"] = config.lambda0;
    recipe_doc["base_fisher"] = kFisherBaseFile;
    recipe_doc["zero_denominator_policy"] = merge::to_string(config.policy);
    recipe_doc["components"] = {
        {{"role", "anti_expert"},
         {"lambda", config.lambda1},
         {"task_vector", kTauAntiExpertFile},
         {"fisher", kFisherAntiExpertFile}},
        {{"role", "expert"},
         {"lambda", config.lambda2},
         {"task_vector", kTauExpertFile},
         {"fisher", kFisherExpertFile}}};
    write_text(config.out_dir / "recipe.json", recipe_doc.dump(2) + "\n");
  }

  // --- manifest ---
  json artifacts;
  auto list = [&](const char* name, const char* file, const store::TensorMap& map) {
    artifacts[name] = {{"path", file}, {"fingerprint", store::fingerprint(map)}};
  };
  list("base", kBaseFile, base_map);
  list("anti_expert", kAntiExpertFile, anti_map);
  list("expert", kExpertFile, expert_map);
  list("tau_anti_expert", kTauAntiExpertFile, tau_anti);
  list("tau_expert", kTauExpertFile, tau_expert);
  list("fisher_base", kFisherBaseFile, fisher_base);
  list("fisher_anti_expert", kFisherAntiExpertFile, fisher_anti);
  list("fisher_expert", kFisherExpertFile, fisher_expert);
  list("merged", kMergedFile, merged);

  PipelineResult result;
  result.manifest["artifacts"] = artifacts;
  result.manifest["config"] = config.to_json();
  result.manifest["counts"] = {{"train", train_text.size()},
                               {"eval", eval_text.size()},
                               {"anti_expert", anti_text.size()},
                               {"expert", expert_text.size()}};
  result.manifest_path = config.out_dir / kManifestFile;
  write_text(result.manifest_path, result.manifest.dump(2) + "\n");
  return result;
}

SweepConfig SweepConfig::from_json(const json& j) {
  SweepConfig c;
  if (j.contains("artifacts_dir"))
    c.artifacts_dir = j["artifacts_dir"].get<std::string>();
  if (j.contains("lambda1_grid"))
    c.lambda1_grid = j["lambda1_grid"].get<std::vector<double>>();
  if (j.contains("lambda2_grid"))
    c.lambda2_grid = j["lambda2_grid"].get<std::vector<double>>();
  c.lambda0 = j.value("lambda0", c.lambda0);
  if (j.contains("zero_denominator_policy"))
    c.policy = merge::policy_from_string(j["zero_denominator_policy"].get<std::string>());
  if (j.contains("eval")) c.eval_path = j["eval"].get<std::string>();
  if (j.contains("vocab")) c.vocab_path = j["vocab"].get<std::string>();
  c.beam_size = j.value("beam_size", c.beam_size);
  c.max_len = j.value("max_len", c.max_len);
  if (j.contains("control_tokens"))
    c.control_tokens = j["control_tokens"].get<std::vector<std::string>>();
  if (j.contains("out_csv")) c.out_csv = j["out_csv"].get<std::string>();
  return c;
}

json SweepConfig::to_json() const {
  json j;
  j["artifacts_dir"] = artifacts_dir.string();
  j["lambda1_grid"] = lambda1_grid;
  j["lambda2_grid"] = lambda2_grid;
  j["lambda0"] = lambda0;
  j["zero_denominator_policy"] = merge::to_string(policy);
  if (!eval_path.empty()) j["eval"] = eval_path.string();
  if (!vocab_path.empty()) j["vocab"] = vocab_path.string();
  j["beam_size"] = beam_size;
  j["max_len"] = max_len;
  if (!control_tokens.empty()) j["control_tokens"] = control_tokens;
  if (!out_csv.empty()) j["out_csv"] = out_csv.string();
  return j;
}

std::string sweep_csv_header() {
  return "lambda1,lambda2," + metrics::EvalReport::csv_header();
}

std::string sweep_csv_row(const SweepRow& row) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g,%.6g,", row.lambda1, row.lambda2);
  return std::string(buf) + row.report.csv_row();
}

std::vector<SweepRow> run_sweep(const SweepConfig& config) {
  if (config.lambda1_grid.empty() || config.lambda2_grid.empty())
    fail(ErrorKind::usage, "sweep grids must be non-empty");
  for (double l : config.lambda1_grid)
    if (l < 0.0) fail(ErrorKind::usage, "grid values must be >= 0");
  for (double l : config.lambda2_grid)
    if (l < 0.0) fail(ErrorKind::usage, "grid values must be >= 0");

  const std::filesystem::path& dir = config.artifacts_dir;
  auto need = [&](const char* file) {
    std::filesystem::path p = dir / file;
    if (!std::filesystem::exists(p))
      fail(ErrorKind::data, "missing pipeline artifact: " + p.string());
    return store::load(p);
  };
  auto base = std::make_shared<store::TensorMap>(need(kBaseFile));
  auto fisher_base = std::make_shared<store::TensorMap>(need(kFisherBaseFile));
  auto tau_anti = std::make_shared<store::TensorMap>(need(kTauAntiExpertFile));
  auto fisher_anti = std::make_shared<store::TensorMap>(need(kFisherAntiExpertFile));
  auto tau_expert = std::make_shared<store::TensorMap>(need(kTauExpertFile));
  auto fisher_expert = std::make_shared<store::TensorMap>(need(kFisherExpertFile));

  std::filesystem::path eval_path =
      config.eval_path.empty() ? dir / kEvalData : config.eval_path;
  std::filesystem::path vocab_path =
      config.vocab_path.empty() ? dir / kVocabFile : config.vocab_path;
  std::vector<data::TextExample> eval_text = data::load_jsonl(eval_path);
  data::Vocab vocab = data::Vocab::load(vocab_path);
  auto eval_enc = data::encode_all(eval_text, vocab);
  std::vector<int> control_ids;
  for (const auto& c : config.control_tokens) control_ids.push_back(vocab.id(c));

  std::vector<SweepRow> rows;
  for (double l1 : config.lambda1_grid) {
    for (double l2 : config.lambda2_grid) {
      merge::MergeRecipe recipe;
      recipe.mode = merge::Mode::ewr;
      recipe.base = base;
      recipe.base_lambda = config.lambda0;
      recipe.base_fisher = fisher_base;
      recipe.zero_denominator_policy = config.policy;
      recipe.components.push_back(
          {merge::Role::anti_expert, l1, tau_anti, fisher_anti});
      recipe.components.push_back(
          {merge::Role::expert, l2, tau_expert, fisher_expert});
      store::TensorMap merged = merge::ewr(recipe);
      toylm::ToyLm model = toylm::ToyLm::from_tensor_map(merged);
      std::vector<std::string> outputs = decode_dataset(
          model, eval_enc, vocab, config.beam_size, config.max_len, control_ids);
      SweepRow row;
      row.lambda1 = l1;
      row.lambda2 = l2;
      row.report = metrics::evaluate(outputs, eval_text);
      rows.push_back(std::move(row));
    }
  }

  if (!config.out_csv.empty()) {
    std::string csv = sweep_csv_header() + "\n";
    for (const auto& row : rows) csv += sweep_csv_row(row) + "\n";
    write_text(config.out_csv, csv);
  }
  return rows;
}

}  // namespace ewr::pipeline
