#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "ewr/curate.hpp"
#include "ewr/lm_provider.hpp"
#include "ewr/pipeline.hpp"
#include "ewr/rng.hpp"
#include "test_util.hpp"

using namespace ewr;

namespace {

pipeline::PipelineConfig small_config(const std::filesystem::path& out_dir) {
  pipeline::PipelineConfig config;
  config.seed = 2024;
  config.out_dir = out_dir;
  config.corpus.n_examples = 80;
  config.eval_examples = 20;
  config.hidden_dim = 8;
  config.base_epochs = 4;
  config.expert_epochs = 2;
  config.lambda1 = 0.1;
  config.lambda2 = 0.05;
  return config;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("pipeline produces a complete, reproducible manifest") {
  testutil::TempDir dir("pipeline_repro");
  pipeline::PipelineConfig config = small_config(dir.path / "run1");
  pipeline::PipelineResult first = pipeline::run_pipeline(config);

  const char* names[] = {"base",       "anti_expert",        "expert",
                         "tau_anti_expert", "tau_expert",    "fisher_base",
                         "fisher_anti_expert", "fisher_expert", "merged"};
  for (const char* name : names) {
    REQUIRE(first.manifest["artifacts"].contains(name));
    auto path = config.out_dir /
                first.manifest["artifacts"][name]["path"].get<std::string>();
    CHECK(std::filesystem::exists(path));
    // manifest fingerprint matches the file on disk
    CHECK(first.manifest["artifacts"][name]["fingerprint"].get<std::string>() ==
          store::fingerprint(store::load(path)));
  }

  config.out_dir = dir.path / "run2";
  pipeline::PipelineResult second = pipeline::run_pipeline(config);
  CHECK(first.manifest["artifacts"] == second.manifest["artifacts"]);
}

TEST_CASE("zero lambdas make the merged model fingerprint-identical to base") {
  testutil::TempDir dir("pipeline_zero");
  pipeline::PipelineConfig config = small_config(dir.path / "run");
  config.lambda1 = 0.0;
  config.lambda2 = 0.0;
  pipeline::PipelineResult result = pipeline::run_pipeline(config);
  CHECK(result.manifest["artifacts"]["merged"]["fingerprint"] ==
        result.manifest["artifacts"]["base"]["fingerprint"]);
}

TEST_CASE("pipeline equals manual stage-by-stage composition") {
  testutil::TempDir dir("pipeline_manual");
  pipeline::PipelineConfig config = small_config(dir.path / "auto");
  pipeline::PipelineResult automatic = pipeline::run_pipeline(config);

  // replay the stages by hand with the same labelled subseeds
  synth::CorpusConfig train_cfg = config.corpus;
  train_cfg.seed = Rng::derive_seed(config.seed, "corpus_train");
  auto train_text = synth::generate(train_cfg);
  data::Vocab vocab = synth::make_vocab();
  auto train_enc = data::encode_all(train_text, vocab);

  toylm::Config model_cfg{vocab.size(), config.hidden_dim, config.context_window};
  toylm::ToyLm seed_model =
      toylm::ToyLm::init(model_cfg, Rng::derive_seed(config.seed, "init"));
  toylm::TrainHyper hyper;
  hyper.epochs = config.base_epochs;
  hyper.lr = config.lr;
  hyper.batch_size = config.batch_size;
  hyper.seed = Rng::derive_seed(config.seed, "train_base");
  toylm::ToyLm base = toylm::train(seed_model, train_enc, hyper);

  auto anti_text = curate::knowledge_swap(
      train_text, Rng::derive_seed(config.seed, "knowledge_swap"));
  auto anti_enc = data::encode_all(anti_text, vocab);
  toylm::TrainHyper expert_hyper = hyper;
  expert_hyper.epochs = config.expert_epochs;
  expert_hyper.seed = Rng::derive_seed(config.seed, "train_anti_expert");
  toylm::ToyLm anti = toylm::train(base, anti_enc, expert_hyper);

  auto expert_idx =
      curate::select_abstractive_expert(train_text, config.coverage_threshold);
  auto expert_enc = data::encode_all(curate::take(train_text, expert_idx), vocab);
  expert_hyper.seed = Rng::derive_seed(config.seed, "train_expert");
  toylm::ToyLm expert = toylm::train(base, expert_enc, expert_hyper);

  store::TensorMap base_map = base.to_tensor_map();
  base_map.set_metadata(store::kRoleKey, "base");
  store::TensorMap anti_map = anti.to_tensor_map();
  anti_map.set_metadata(store::kRoleKey, "anti_expert");
  store::TensorMap expert_map = expert.to_tensor_map();
  expert_map.set_metadata(store::kRoleKey, "expert");

  store::TensorMap tau_anti = merge::task_vector(anti_map, base_map);
  store::TensorMap tau_expert = merge::task_vector(expert_map, base_map);
  toylm::ToyLmProvider base_p(base), anti_p(anti), expert_p(expert);
  store::TensorMap f_base = fisher::empirical_fisher(
      base_p, train_enc, config.granularity, config.batch_size);
  store::TensorMap f_anti = fisher::empirical_fisher(
      anti_p, anti_enc, config.granularity, config.batch_size);
  store::TensorMap f_expert = fisher::empirical_fisher(
      expert_p, expert_enc, config.granularity, config.batch_size);

  merge::MergeRecipe recipe;
  recipe.mode = merge::Mode::ewr;
  recipe.base = std::make_shared<store::TensorMap>(base_map);
  recipe.base_lambda = config.lambda0;
  recipe.base_fisher = std::make_shared<store::TensorMap>(f_base);
  recipe.components.push_back({merge::Role::anti_expert, config.lambda1,
                               std::make_shared<store::TensorMap>(tau_anti),
                               std::make_shared<store::TensorMap>(f_anti)});
  recipe.components.push_back({merge::Role::expert, config.lambda2,
                               std::make_shared<store::TensorMap>(tau_expert),
                               std::make_shared<store::TensorMap>(f_expert)});
  store::TensorMap merged = merge::ewr(recipe);

  CHECK(automatic.manifest["artifacts"]["base"]["fingerprint"].get<std::string>() ==
        store::fingerprint(base_map));
  CHECK(automatic.manifest["artifacts"]["merged"]["fingerprint"].get<std::string>() ==
        store::fingerprint(merged));
}

TEST_CASE("sweep: zero grid point equals the base model evaluation") {
  testutil::TempDir dir("sweep_zero");
  pipeline::PipelineConfig config = small_config(dir.path / "run");
  pipeline::run_pipeline(config);

  pipeline::SweepConfig sweep;
  sweep.artifacts_dir = config.out_dir;
  sweep.lambda1_grid = {0.0};
  sweep.beam_size = 4;
  sweep.max_len = 12;
  sweep.out_csv = dir.path / "sweep.csv";
  auto rows = pipeline::run_sweep(sweep);
  REQUIRE(rows.size() == 1);

  // decode the eval set with the base model directly
  data::Vocab vocab = data::Vocab::load(config.out_dir / pipeline::kVocabFile);
  auto eval_text = data::load_jsonl(config.out_dir / pipeline::kEvalData);
  auto eval_enc = data::encode_all(eval_text, vocab);
  toylm::ToyLm base = toylm::ToyLm::from_tensor_map(
      store::load(config.out_dir / pipeline::kBaseFile));
  auto outputs = pipeline::decode_dataset(base, eval_enc, vocab, 4, 12);
  metrics::EvalReport direct = metrics::evaluate(outputs, eval_text);
  CHECK(rows[0].report.bleu == doctest::Approx(direct.bleu));
  CHECK(rows[0].report.hallucination_rate ==
        doctest::Approx(direct.hallucination_rate));
  CHECK(rows[0].report.density == doctest::Approx(direct.density));

  SUBCASE("rerunning the sweep is byte-identical") {
    std::string first = read_file(sweep.out_csv);
    pipeline::run_sweep(sweep);
    CHECK(read_file(sweep.out_csv) == first);
    CHECK(first.rfind("lambda1,lambda2,bleu,", 0) == 0);
  }
}

TEST_CASE("command-line interface round trip") {
#ifdef EWR_BIN
  testutil::TempDir dir("cli_smoke");
  std::string bin = EWR_BIN;
  auto run = [&](const std::string& args) {
    std::string cmd = bin + " " + args + " >/dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  std::string d = dir.path.string();
  CHECK(run("synth-corpus --out " + d + "/corpus --n 60 --eval-n 10 --seed 3") == 0);
  CHECK(run("curate --op swap --in " + d + "/corpus/train.jsonl --out " + d +
            "/anti.jsonl --provenance " + d + "/anti_prov.json --seed 4") == 0);
  CHECK(run("train --data " + d + "/corpus/train.jsonl --vocab " + d +
            "/corpus/vocab.json --out " + d +
            "/base.safetensors --epochs 2 --hidden 8 --seed 5 --role base") == 0);
  CHECK(run("train --data " + d + "/anti.jsonl --vocab " + d +
            "/corpus/vocab.json --init " + d + "/base.safetensors --out " + d +
            "/anti.safetensors --epochs 1 --seed 6 --role anti_expert") == 0);
  CHECK(run("fisher --model " + d + "/base.safetensors --data " + d +
            "/corpus/train.jsonl --vocab " + d + "/corpus/vocab.json --out " + d +
            "/fisher_base.safetensors") == 0);
  CHECK(run("fisher --model " + d + "/anti.safetensors --data " + d +
            "/anti.jsonl --vocab " + d + "/corpus/vocab.json --out " + d +
            "/fisher_anti.safetensors") == 0);

  // build a task vector through the library, then merge through the CLI
  store::TensorMap base_map = store::load(dir.path / "base.safetensors");
  store::TensorMap anti_map = store::load(dir.path / "anti.safetensors");
  store::save(merge::task_vector(anti_map, base_map), dir.path / "tau.safetensors");
  {
    std::ofstream recipe(dir.path / "recipe.json");
    recipe << R"({"mode":"ewr","base":"base.safetensors","base_lambda":1.0,)"
           << R"("base_fisher":"fisher_base.safetensors",)"
           << R"("components":[{"role":"anti_expert","lambda":0.1,)"
           << R"("task_vector":"tau.safetensors","fisher":"fisher_anti.safetensors"}]})";
  }
  CHECK(run("merge --recipe " + d + "/recipe.json --out " + d +
            "/merged.safetensors") == 0);
  CHECK(run("generate --model " + d + "/merged.safetensors --data " + d +
            "/corpus/eval.jsonl --vocab " + d + "/corpus/vocab.json --out " + d +
            "/outs.jsonl --beam 4 --max-len 12") == 0);
  CHECK(run("evaluate --outputs " + d + "/outs.jsonl --data " + d +
            "/corpus/eval.jsonl --report " + d + "/report.json --csv " + d +
            "/report.csv") == 0);
  CHECK(std::filesystem::exists(dir.path / "report.json"));

  // usage errors exit nonzero
  CHECK(run("curate --op bogus --in " + d + "/corpus/train.jsonl") != 0);
  CHECK(run("merge --recipe " + d + "/missing.json") != 0);
#endif
}
