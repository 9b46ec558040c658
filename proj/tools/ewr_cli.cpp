#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ewr/curate.hpp"
#include "ewr/dataset.hpp"
#include "ewr/decode.hpp"
#include "ewr/error.hpp"
#include "ewr/fisher.hpp"
#include "ewr/lm_provider.hpp"
#include "ewr/merge.hpp"
#include "ewr/metrics.hpp"
#include "ewr/pipeline.hpp"
#include "ewr/rng.hpp"
#include "ewr/synth.hpp"
#include "ewr/text.hpp"
#include "ewr/toy_lm.hpp"
#include "json.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Relative output paths resolve under $EWR_WORKDIR when it is set.
fs::path out_path(const std::string& p) {
  fs::path path(p);
  const char* workdir = std::getenv("EWR_WORKDIR");
  if (path.is_relative() && workdir && *workdir) return fs::path(workdir) / path;
  return path;
}

void emit(json result) {
  result["ok"] = true;
  std::cout << result.dump() << "\n";
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) ewr::fail(ewr::ErrorKind::io, "cannot open " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded())
    ewr::fail(ewr::ErrorKind::data, path.string() + ": invalid JSON");
  return j;
}

ewr::toylm::ToyLm load_model(const std::string& path) {
  return ewr::toylm::ToyLm::from_tensor_map(ewr::store::load(path));
}

std::vector<int> encode_controls(const std::vector<std::string>& controls,
                                 const ewr::data::Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& c : controls) ids.push_back(vocab.id(c));
  return ids;
}

struct GenerateArgs {
  std::string model, dataset, vocab, out;
  int beam_size = 10;
  int max_len = 16;
  std::vector<std::string> controls;
  std::string dexperts_expert, dexperts_anti;
  double dexperts_temperature = 1.0;
  std::string rerank_channel, rerank_lm;
  double channel_weight = 1.0, lm_weight = 1.0, length_penalty = 0.0;
};

int run_generate(const GenerateArgs& args) {
  ewr::data::Vocab vocab = ewr::data::Vocab::load(args.vocab);
  auto dataset = ewr::data::load_jsonl(args.dataset);
  auto encoded = ewr::data::encode_all(dataset, vocab);
  ewr::toylm::ToyLm model = load_model(args.model);
  std::vector<int> control_ids = encode_controls(args.controls, vocab);

  bool use_dexperts = !args.dexperts_expert.empty();
  bool use_rerank = !args.rerank_channel.empty();
  if (use_dexperts && args.dexperts_anti.empty())
    ewr::fail(ewr::ErrorKind::usage,
              "--dexperts-expert requires --dexperts-anti");
  if (use_rerank && args.rerank_lm.empty())
    ewr::fail(ewr::ErrorKind::usage, "--rerank-channel requires --rerank-lm");

  std::optional<ewr::toylm::ToyLm> expert, anti, channel, lm;
  if (use_dexperts) {
    expert = load_model(args.dexperts_expert);
    anti = load_model(args.dexperts_anti);
  }
  if (use_rerank) {
    channel = load_model(args.rerank_channel);
    lm = load_model(args.rerank_lm);
  }

  std::ofstream out_file(out_path(args.out), std::ios::trunc);
  if (!out_file)
    ewr::fail(ewr::ErrorKind::io, "cannot open " + args.out + " for writing");

  for (std::size_t i = 0; i < encoded.size(); ++i) {
    ewr::data::DecodeState cond = ewr::data::conditioning_of(encoded[i]);
    if (!control_ids.empty()) cond.control_tokens = control_ids;

    std::vector<ewr::toylm::GenerationCandidate> candidates;
    if (use_dexperts) {
      ewr::decode::ExpertTriple triple{&model, &*expert, &*anti,
                                       args.dexperts_temperature};
      candidates = ewr::decode::dexperts_generate(triple, cond, args.beam_size,
                                                  args.max_len);
    } else {
      candidates =
          ewr::toylm::generate_beam(model, cond, args.beam_size, args.max_len);
    }

    json line;
    json cand_list = json::array();
    if (use_rerank) {
      ewr::decode::RerankWeights weights{args.lm_weight, args.channel_weight,
                                         args.length_penalty};
      auto reranked = ewr::decode::noisy_channel_rescore(candidates, *channel,
                                                         *lm, weights, cond);
      for (const auto& rc : reranked) {
        cand_list.push_back(
            {{"tokens", rc.candidate.tokens},
             {"text", ewr::data::decode_response(rc.candidate.tokens, vocab)},
             {"log_prob", rc.candidate.log_prob},
             {"score", rc.score},
             {"channel_log_prob", rc.channel_log_prob},
             {"lm_log_prob", rc.lm_log_prob}});
      }
      line["response"] =
          ewr::data::decode_response(reranked.front().candidate.tokens, vocab);
    } else {
      for (const auto& c : candidates) {
        cand_list.push_back(
            {{"tokens", c.tokens},
             {"text", ewr::data::decode_response(c.tokens, vocab)},
             {"log_prob", c.log_prob}});
      }
      line["response"] =
          candidates.empty()
              ? std::string()
              : ewr::data::decode_response(candidates.front().tokens, vocab);
    }
    line["index"] = i;
    line["candidates"] = cand_list;
    out_file << line.dump() << "\n";
  }
  if (!out_file) ewr::fail(ewr::ErrorKind::io, "write failure on " + args.out);
  emit({{"command", "generate"},
        {"out", out_path(args.out).string()},
        {"n_examples", encoded.size()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "ewr: parameter-space model editing for faithful dialogue "
      "(task arithmetic, CaPE, Fisher-weighted EWR) with a toy grounded-"
      "dialogue LM, decode-time baselines and lexical metrics"};
  app.require_subcommand(1);

  // ---- synth-corpus ----
  auto* synth_cmd = app.add_subcommand("synth-corpus",
                                       "generate the synthetic grounded-dialogue corpus");
  std::string synth_out = "corpus";
  ewr::synth::CorpusConfig corpus_cfg;
  int synth_eval_n = 100;
  std::uint64_t synth_seed = 0;
  synth_cmd->add_option("--out", synth_out, "output directory");
  synth_cmd->add_option("--n", corpus_cfg.n_examples, "training examples");
  synth_cmd->add_option("--eval-n", synth_eval_n, "evaluation examples");
  synth_cmd->add_option("--corruption", corpus_cfg.corruption_rate,
                        "fraction of hallucinated training responses");
  synth_cmd->add_option("--abstractive", corpus_cfg.abstractive_fraction,
                        "fraction of abstractive response templates");
  synth_cmd->add_option("--two-fact", corpus_cfg.two_fact_fraction,
                        "fraction of examples with a distractor fact");
  synth_cmd->add_option("--seed", synth_seed, "root seed");

  // ---- curate ----
  auto* curate_cmd = app.add_subcommand("curate", "build (anti-)expert datasets");
  std::string curate_op, curate_in, curate_out = "curated.jsonl",
                         curate_prov;
  double coverage_threshold = 0.4, f1_threshold = 0.5;
  std::uint64_t curate_seed = 0;
  curate_cmd
      ->add_option("--op", curate_op,
                   "swap | abstractive-expert | entailed-expert | ctrl | "
                   "role-swap | strip-knowledge")
      ->required();
  curate_cmd->add_option("--in", curate_in, "input JSONL")->required();
  curate_cmd->add_option("--out", curate_out, "output JSONL");
  curate_cmd->add_option("--provenance", curate_prov, "provenance sidecar JSON");
  curate_cmd->add_option("--coverage-threshold", coverage_threshold,
                         "abstractive-expert coverage threshold");
  curate_cmd->add_option("--f1-threshold", f1_threshold,
                         "entailment-proxy token-F1 threshold");
  curate_cmd->add_option("--seed", curate_seed, "seed (knowledge swap)");

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "train the toy dialogue LM");
  std::string train_data, train_vocab, train_init, train_out = "model.safetensors",
                          train_role = "fine_tuned";
  ewr::toylm::TrainHyper hyper;
  int train_hidden = 16, train_window = 8;
  train_cmd->add_option("--data", train_data, "training JSONL")->required();
  train_cmd->add_option("--vocab", train_vocab, "vocabulary JSON")->required();
  train_cmd->add_option("--init", train_init,
                        "initial checkpoint (default: random init)");
  train_cmd->add_option("--out", train_out, "output checkpoint");
  train_cmd->add_option("--epochs", hyper.epochs, "training epochs");
  train_cmd->add_option("--lr", hyper.lr, "learning rate");
  train_cmd->add_option("--batch", hyper.batch_size, "batch size");
  train_cmd->add_option("--seed", hyper.seed, "seed");
  train_cmd->add_option("--l2", hyper.l2, "L2 penalty");
  train_cmd->add_option("--val-fraction", hyper.validation_fraction,
                        "held-out fraction for best-epoch selection");
  train_cmd->add_option("--hidden", train_hidden, "hidden size (fresh init)");
  train_cmd->add_option("--window", train_window, "context window (fresh init)");
  train_cmd->add_option("--role", train_role, "metadata role tag");

  // ---- fisher ----
  auto* fisher_cmd = app.add_subcommand("fisher", "diagonal empirical Fisher");
  std::string fisher_model, fisher_data, fisher_vocab,
      fisher_out = "fisher.safetensors", fisher_gran = "per_example";
  int fisher_batch = 16;
  fisher_cmd->add_option("--model", fisher_model, "checkpoint")->required();
  fisher_cmd->add_option("--data", fisher_data, "dataset JSONL")->required();
  fisher_cmd->add_option("--vocab", fisher_vocab, "vocabulary JSON")->required();
  fisher_cmd->add_option("--out", fisher_out, "output Fisher map");
  fisher_cmd->add_option("--granularity", fisher_gran, "per_example | per_batch");
  fisher_cmd->add_option("--batch", fisher_batch, "batch size (per_batch)");

  // ---- merge ----
  auto* merge_cmd = app.add_subcommand("merge", "run a merge recipe");
  std::string merge_recipe, merge_out = "merged.safetensors";
  bool allow_mismatch = false;
  merge_cmd->add_option("--recipe", merge_recipe, "recipe JSON")->required();
  merge_cmd->add_option("--out", merge_out, "output checkpoint");
  merge_cmd->add_flag("--allow-fingerprint-mismatch", allow_mismatch,
                      "skip fingerprint verification");

  // ---- generate ----
  auto* gen_cmd = app.add_subcommand("generate", "beam-decode a dataset");
  GenerateArgs gen;
  gen_cmd->add_option("--model", gen.model, "checkpoint")->required();
  gen_cmd->add_option("--data", gen.dataset, "dataset JSONL")->required();
  gen_cmd->add_option("--vocab", gen.vocab, "vocabulary JSON")->required();
  gen_cmd->add_option("--out", gen.out, "output JSONL")->required();
  gen_cmd->add_option("--beam", gen.beam_size, "beam size");
  gen_cmd->add_option("--max-len", gen.max_len, "maximum response length");
  gen_cmd->add_option("--controls", gen.controls,
                      "control tokens fixed at inference");
  gen_cmd->add_option("--dexperts-expert", gen.dexperts_expert,
                      "expert checkpoint (DExperts decoding)");
  gen_cmd->add_option("--dexperts-anti", gen.dexperts_anti,
                      "anti-expert checkpoint (DExperts decoding)");
  gen_cmd->add_option("--dexperts-temperature", gen.dexperts_temperature,
                      "exponent on the expert/anti-expert ratio");
  gen_cmd->add_option("--rerank-channel", gen.rerank_channel,
                      "channel model (noisy-channel reranking)");
  gen_cmd->add_option("--rerank-lm", gen.rerank_lm,
                      "LM model (noisy-channel reranking)");
  gen_cmd->add_option("--channel-weight", gen.channel_weight, "channel weight");
  gen_cmd->add_option("--lm-weight", gen.lm_weight, "LM weight");
  gen_cmd->add_option("--length-penalty", gen.length_penalty, "length bonus");

  // ---- evaluate ----
  auto* eval_cmd = app.add_subcommand("evaluate", "score generated outputs");
  std::string eval_outputs, eval_data, eval_report, eval_csv;
  eval_cmd->add_option("--outputs", eval_outputs, "generated JSONL")->required();
  eval_cmd->add_option("--data", eval_data, "gold dataset JSONL")->required();
  eval_cmd->add_option("--report", eval_report, "report JSON path");
  eval_cmd->add_option("--csv", eval_csv, "CSV row path");

  // ---- pipeline ----
  auto* pipe_cmd = app.add_subcommand("pipeline", "run the full merge recipe");
  std::string pipe_config, pipe_out_dir;
  std::uint64_t pipe_seed = 0;
  bool pipe_seed_set = false;
  pipe_cmd->add_option("--config", pipe_config, "pipeline config JSON");
  pipe_cmd->add_option("--out-dir", pipe_out_dir, "output directory override");
  pipe_cmd->add_option("--seed", pipe_seed, "seed override")
      ->each([&](const std::string&) { pipe_seed_set = true; });

  // ---- sweep ----
  auto* sweep_cmd = app.add_subcommand("sweep", "scaling-factor sweep over merges");
  std::string sweep_config, sweep_csv_path;
  sweep_cmd->add_option("--config", sweep_config, "sweep config JSON")->required();
  sweep_cmd->add_option("--out-csv", sweep_csv_path, "CSV override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth_cmd->parsed()) {
      fs::path dir = out_path(synth_out);
      fs::create_directories(dir);
      corpus_cfg.seed = ewr::Rng::derive_seed(synth_seed, "corpus_train");
      auto train = ewr::synth::generate(corpus_cfg);
      ewr::synth::CorpusConfig eval_cfg = corpus_cfg;
      eval_cfg.n_examples = synth_eval_n;
      eval_cfg.corruption_rate = 0.0;
      eval_cfg.seed = ewr::Rng::derive_seed(synth_seed, "corpus_eval");
      auto eval = ewr::synth::generate(eval_cfg);
      ewr::data::save_jsonl(train, dir / "train.jsonl");
      ewr::data::save_jsonl(eval, dir / "eval.jsonl");
      ewr::synth::make_vocab().save(dir / "vocab.json");
      emit({{"command", "synth-corpus"},
            {"out", dir.string()},
            {"n_train", train.size()},
            {"n_eval", eval.size()}});
    } else if (curate_cmd->parsed()) {
      auto dataset = ewr::data::load_jsonl(curate_in);
      std::vector<ewr::data::TextExample> result;
      json prov;
      if (curate_op == "swap") {
        std::vector<ewr::curate::SwapRecord> records;
        result = ewr::curate::knowledge_swap(dataset, curate_seed, &records);
        prov["rule"] = "knowledge_swap";
        json list = json::array();
        for (const auto& r : records)
          list.push_back({{"index", r.index}, {"donor", r.donor}});
        prov["per_example"] = list;
      } else if (curate_op == "abstractive-expert") {
        auto idx = ewr::curate::select_abstractive_expert(dataset, coverage_threshold);
        result = ewr::curate::take(dataset, idx);
        prov["rule"] = "low_density_high_coverage";
        prov["coverage_threshold"] = coverage_threshold;
        prov["indices"] = idx;
      } else if (curate_op == "entailed-expert") {
        auto idx = ewr::curate::select_entailed_expert(dataset, f1_threshold);
        result = ewr::curate::take(dataset, idx);
        prov["rule"] = "entailment_proxy";
        prov["f1_threshold"] = f1_threshold;
        prov["indices"] = idx;
      } else if (curate_op == "ctrl") {
        result = dataset;
        ewr::curate::assign_control_tokens(result, f1_threshold);
        prov["rule"] = "control_tokens";
        prov["f1_threshold"] = f1_threshold;
      } else if (curate_op == "role-swap") {
        result = ewr::synth::swap_roles(dataset);
        prov["rule"] = "role_swap";
      } else if (curate_op == "strip-knowledge") {
        result = ewr::synth::strip_knowledge(dataset);
        prov["rule"] = "knowledge_free";
      } else {
        ewr::fail(ewr::ErrorKind::usage, "unknown curate op: " + curate_op);
      }
      ewr::data::save_jsonl(result, out_path(curate_out));
      if (!curate_prov.empty()) {
        std::ofstream p(out_path(curate_prov), std::ios::trunc);
        p << prov.dump(2) << "\n";
      }
      emit({{"command", "curate"},
            {"op", curate_op},
            {"out", out_path(curate_out).string()},
            {"n_examples", result.size()}});
    } else if (train_cmd->parsed()) {
      ewr::data::Vocab vocab = ewr::data::Vocab::load(train_vocab);
      auto dataset = ewr::data::encode_all(ewr::data::load_jsonl(train_data), vocab);
      ewr::toylm::ToyLm model =
          train_init.empty()
              ? ewr::toylm::ToyLm::init(
                    {vocab.size(), train_hidden, train_window},
                    ewr::Rng::derive_seed(hyper.seed, "init"))
              : load_model(train_init);
      ewr::toylm::TrainLog log;
      ewr::toylm::ToyLm trained = ewr::toylm::train(model, dataset, hyper, &log);
      ewr::store::TensorMap map = trained.to_tensor_map();
      map.set_metadata(ewr::store::kRoleKey, train_role);
      fs::path out = out_path(train_out);
      ewr::store::save(map, out);
      json result = {{"command", "train"},
                     {"out", out.string()},
                     {"fingerprint", ewr::store::fingerprint(map)},
                     {"final_train_nll",
                      log.train_nll.empty() ? json() : json(log.train_nll.back())}};
      if (log.best_epoch >= 0) result["best_epoch"] = log.best_epoch;
      emit(result);
    } else if (fisher_cmd->parsed()) {
      ewr::data::Vocab vocab = ewr::data::Vocab::load(fisher_vocab);
      auto dataset = ewr::data::encode_all(ewr::data::load_jsonl(fisher_data), vocab);
      ewr::toylm::ToyLmProvider provider(load_model(fisher_model));
      ewr::store::TensorMap fisher_map = ewr::fisher::empirical_fisher(
          provider, dataset, ewr::fisher::granularity_from_string(fisher_gran),
          fisher_batch);
      fs::path out = out_path(fisher_out);
      ewr::store::save(fisher_map, out);
      emit({{"command", "fisher"},
            {"out", out.string()},
            {"fingerprint", ewr::store::fingerprint(fisher_map)},
            {"n_examples", dataset.size()}});
    } else if (merge_cmd->parsed()) {
      ewr::merge::MergeRecipe recipe =
          ewr::merge::load_recipe(merge_recipe, allow_mismatch);
      ewr::store::TensorMap merged = ewr::merge::run(recipe);
      fs::path out = out_path(merge_out);
      ewr::store::save(merged, out);
      emit({{"command", "merge"},
            {"mode", ewr::merge::to_string(recipe.mode)},
            {"out", out.string()},
            {"fingerprint", ewr::store::fingerprint(merged)}});
    } else if (gen_cmd->parsed()) {
      return run_generate(gen);
    } else if (eval_cmd->parsed()) {
      auto dataset = ewr::data::load_jsonl(eval_data);
      std::vector<std::string> outputs;
      std::ifstream in(eval_outputs);
      if (!in) ewr::fail(ewr::ErrorKind::io, "cannot open " + eval_outputs);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("response"))
          ewr::fail(ewr::ErrorKind::data,
                    eval_outputs + ": each line needs a \"response\" field");
        outputs.push_back(j["response"].get<std::string>());
      }
      ewr::metrics::EvalReport report = ewr::metrics::evaluate(outputs, dataset);
      if (!eval_report.empty()) {
        std::ofstream r(out_path(eval_report), std::ios::trunc);
        r << report.to_json().dump(2) << "\n";
      }
      if (!eval_csv.empty()) {
        std::ofstream c(out_path(eval_csv), std::ios::trunc);
        c << ewr::metrics::EvalReport::csv_header() << "\n"
          << report.csv_row() << "\n";
      }
      json result = report.to_json();
      result["command"] = "evaluate";
      emit(result);
    } else if (pipe_cmd->parsed()) {
      ewr::pipeline::PipelineConfig config;
      if (!pipe_config.empty())
        config = ewr::pipeline::PipelineConfig::from_json(read_json_file(pipe_config));
      if (!pipe_out_dir.empty()) config.out_dir = out_path(pipe_out_dir);
      if (pipe_seed_set) config.seed = pipe_seed;
      if (config.out_dir.empty())
        ewr::fail(ewr::ErrorKind::usage, "pipeline needs --out-dir or config out_dir");
      ewr::pipeline::PipelineResult result = ewr::pipeline::run_pipeline(config);
      emit({{"command", "pipeline"},
            {"manifest", result.manifest_path.string()},
            {"artifacts", result.manifest["artifacts"]}});
    } else if (sweep_cmd->parsed()) {
      ewr::pipeline::SweepConfig config =
          ewr::pipeline::SweepConfig::from_json(read_json_file(sweep_config));
      if (!sweep_csv_path.empty()) config.out_csv = out_path(sweep_csv_path);
      auto rows = ewr::pipeline::run_sweep(config);
      emit({{"command", "sweep"},
            {"out_csv", config.out_csv.string()},
            {"n_rows", rows.size()}});
    }
  } catch (const ewr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
