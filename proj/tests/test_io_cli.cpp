#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "deltaprune/io.hpp"
#include "deltaprune/pruning.hpp"
#include "deltaprune/tasks.hpp"

using namespace dp;
namespace fs = std::filesystem;

namespace {

ToyConfig tiny_cfg(MixerVariant v = MixerVariant::delta) {
  ToyConfig cfg;
  cfg.vocab = 16;
  cfg.model_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 1;
  cfg.key_dim = 8;
  cfg.value_dim = 8;
  cfg.conv_len = 2;
  cfg.seq_len = 5;
  cfg.num_pairs = 1;
  cfg.variant = v;
  return cfg;
}

// Fresh scratch directory under the system temp root.
fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "deltaprune_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void check_models_bitwise_equal(const ToyModel& a, const ToyModel& b) {
  CHECK(a.config.key_dim == b.config.key_dim);
  CHECK(a.config.vocab == b.config.vocab);
  CHECK(a.config.variant == b.config.variant);
  CHECK(a.embedding.data == b.embedding.data);
  CHECK(a.lm_head.data == b.lm_head.data);
  REQUIRE(a.layers.size() == b.layers.size());
  for (size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].w_o.data == b.layers[l].w_o.data);
    REQUIRE(a.layers[l].heads.size() == b.layers[l].heads.size());
    for (size_t h = 0; h < a.layers[l].heads.size(); ++h) {
      const HeadParams& ha = a.layers[l].heads[h];
      const HeadParams& hb = b.layers[l].heads[h];
      CHECK(ha.w_q.data == hb.w_q.data);
      CHECK(ha.w_k.data == hb.w_k.data);
      CHECK(ha.w_v.data == hb.w_v.data);
      CHECK(ha.w_beta.data == hb.w_beta.data);
      CHECK(ha.w_alpha.data == hb.w_alpha.data);
      CHECK(ha.conv_q.data == hb.conv_q.data);
      CHECK(ha.conv_k.data == hb.conv_k.data);
      CHECK(ha.conv_v.data == hb.conv_v.data);
    }
  }
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Two directories hold the same file names with the same bytes.
void check_dirs_identical(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names_a, names_b;
  for (const auto& e : fs::directory_iterator(a)) names_a.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) names_b.push_back(e.path().filename().string());
  std::sort(names_a.begin(), names_a.end());
  std::sort(names_b.begin(), names_b.end());
  REQUIRE(names_a == names_b);
  for (const std::string& n : names_a) CHECK(slurp(a / n) == slurp(b / n));
}

fs::path first_tensor_file(const fs::path& dir) {
  std::vector<fs::path> bins;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".bin") bins.push_back(e.path());
  REQUIRE_FALSE(bins.empty());
  std::sort(bins.begin(), bins.end());
  return bins.front();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DELTAPRUNE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string tiny_run_config_json(uint64_t seed) {
  return std::string(R"({
  "model": {"vocab": 16, "modelDim": 16, "numLayers": 1, "numHeads": 1, "keyDim": 8,
            "valueDim": 8, "convLen": 2, "seqLen": 5, "numPairs": 1, "variant": "delta"},
  "train": {"steps": 400, "batch": 8, "lr": 0.01, "evalEvery": 100, "evalSequences": 64,
            "targetAccuracy": 0.995, "seed": )") +
         std::to_string(seed) + R"(},
  "prune": {"ratio": 0.0, "calibrationSequences": 8, "maxSamples": 64},
  "spectrum": {"skip": 2}
}
)";
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("checkpoints round-trip bitwise for every variant") {
  for (MixerVariant v : {MixerVariant::linear, MixerVariant::delta, MixerVariant::gated}) {
    const fs::path dir = scratch(std::string("ckpt_") + variant_name(v));
    ToyModel m = init_toy_model(tiny_cfg(v), 42);
    save_checkpoint(m, dir);
    CHECK(fs::exists(dir / "manifest.json"));
    ToyModel back = load_checkpoint(dir);
    check_models_bitwise_equal(m, back);

    // Saving the load reproduces the original files byte for byte.
    const fs::path dir2 = scratch(std::string("ckpt2_") + variant_name(v));
    save_checkpoint(back, dir2);
    check_dirs_identical(dir, dir2);
  }
}

TEST_CASE("corrupted checkpoints are rejected with the offending file named") {
  const fs::path dir = scratch("ckpt_corrupt");
  save_checkpoint(init_toy_model(tiny_cfg(), 1), dir);

  SUBCASE("truncated tensor payload") {
    const fs::path victim = first_tensor_file(dir);
    fs::resize_file(victim, fs::file_size(victim) / 2);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir), doctest::Contains("size mismatch"), config_error);
  }
  SUBCASE("missing tensor file") {
    fs::remove(first_tensor_file(dir));
    CHECK_THROWS_WITH_AS(load_checkpoint(dir), doctest::Contains("missing tensor file"), config_error);
  }
  SUBCASE("manifest is not json") {
    write_text_file(dir / "manifest.json", "not json at all");
    CHECK_THROWS_WITH_AS(load_checkpoint(dir), doctest::Contains("invalid checkpoint manifest"), config_error);
  }
  SUBCASE("unknown format tag") {
    nlohmann::json manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    manifest["format"] = "something-else";
    write_text_file(dir / "manifest.json", manifest.dump());
    CHECK_THROWS_WITH_AS(load_checkpoint(dir), doctest::Contains("unrecognized checkpoint format"), config_error);
  }
  SUBCASE("nonexistent directory") {
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "nope"), doctest::Contains("cannot open file"), config_error);
  }
}

TEST_CASE("text files round-trip and missing reads are named") {
  const fs::path dir = scratch("text");
  const std::string payload = "line one\nline two\n";
  write_text_file(dir / "a.txt", payload);
  CHECK(read_text_file(dir / "a.txt") == payload);
  CHECK_THROWS_WITH_AS(read_text_file(dir / "absent.txt"), doctest::Contains("absent.txt"), config_error);
}

TEST_CASE("model configuration json round-trips") {
  ToyConfig c = tiny_cfg(MixerVariant::gated);
  c.rms_eps = 3e-7;
  ToyConfig back = config_from_json(config_to_json(c));
  CHECK(back.vocab == c.vocab);
  CHECK(back.model_dim == c.model_dim);
  CHECK(back.num_layers == c.num_layers);
  CHECK(back.num_heads == c.num_heads);
  CHECK(back.key_dim == c.key_dim);
  CHECK(back.value_dim == c.value_dim);
  CHECK(back.conv_len == c.conv_len);
  CHECK(back.seq_len == c.seq_len);
  CHECK(back.num_pairs == c.num_pairs);
  CHECK(back.variant == c.variant);
  CHECK(back.rms_eps == c.rms_eps);

  // Missing keys fall back to defaults; malformed text is rejected.
  ToyConfig defaults = config_from_json("{}");
  CHECK(defaults.vocab == ToyConfig{}.vocab);
  CHECK(defaults.variant == ToyConfig{}.variant);
  CHECK_THROWS_AS(config_from_json("{"), config_error);
}

TEST_CASE("training metrics serialize self-described history") {
  TrainMetrics tm;
  tm.steps_run = 2;
  tm.final_accuracy = 0.75;
  tm.history = {TrainPoint{1, 1.5, -1.0}, TrainPoint{2, 1.25, 0.75}};
  const nlohmann::json j = nlohmann::json::parse(train_metrics_json(tm));
  CHECK(j.at("stepsRun").get<int>() == 2);
  CHECK(j.at("finalAccuracy").get<double>() == 0.75);
  REQUIRE(j.at("history").size() == 2);
  CHECK_FALSE(j.at("history")[0].contains("accuracy"));  // not an evaluation step
  CHECK(j.at("history")[1].at("accuracy").get<double>() == 0.75);
  CHECK(j.at("history")[0].at("loss").get<double>() == 1.5);
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("train writes a loadable checkpoint and is seed-deterministic") {
  const fs::path root = scratch("cli_train");
  write_text_file(root / "run.json", tiny_run_config_json(3));

  const fs::path out_a = root / "a";
  const fs::path out_b = root / "b";
  CHECK(run_cli("train --config " + (root / "run.json").string() + " --out " + out_a.string(),
                root / "train_a.log") == 0);
  CHECK(run_cli("train --config " + (root / "run.json").string() + " --out " + out_b.string(),
                root / "train_b.log") == 0);

  // Outputs exist and the metrics document shows the task was learned.
  CHECK(fs::exists(out_a / "eval_dataset.jsonl"));
  const nlohmann::json metrics = nlohmann::json::parse(read_text_file(out_a / "metrics.json"));
  CHECK(metrics.at("finalAccuracy").get<double>() >= 0.995);
  ToyModel trained = load_checkpoint(out_a / "checkpoint");
  CHECK(trained.config.key_dim == 8);

  // Same seed, separate processes: byte-identical artifacts.
  CHECK(slurp(out_a / "metrics.json") == slurp(out_b / "metrics.json"));
  CHECK(slurp(out_a / "eval_dataset.jsonl") == slurp(out_b / "eval_dataset.jsonl"));
  check_dirs_identical(out_a / "checkpoint", out_b / "checkpoint");
}

TEST_CASE("prune at ratio zero reproduces the checkpoint byte for byte") {
  const fs::path root = scratch("cli_prune");
  write_text_file(root / "run.json", tiny_run_config_json(3));
  const fs::path trained = root / "trained";
  REQUIRE(run_cli("train --config " + (root / "run.json").string() + " --out " + trained.string(),
                  root / "train.log") == 0);

  const fs::path pruned = root / "pruned";
  CHECK(run_cli("prune --config " + (root / "run.json").string() + " --checkpoint " +
                    (trained / "checkpoint").string() + " --out " + pruned.string(),
                root / "prune.log") == 0);

  check_dirs_identical(trained / "checkpoint", pruned / "checkpoint");
  const PruningPlan plan = plan_from_json(read_text_file(pruned / "plan.json"));
  REQUIRE(plan.layers.size() == 1);
  CHECK(plan.layers[0].heads[0].retained.size() == 8);  // every channel kept
  CHECK(read_text_file(pruned / "spectrum_before.csv").rfind("head,token,sigma_index,sigma_value", 0) == 0);
  CHECK(read_text_file(pruned / "utilization_after.csv").rfind("head,token,utilization", 0) == 0);
  const nlohmann::json report = nlohmann::json::parse(read_text_file(pruned / "prune_report.json"));
  CHECK(report.at("keyDimAfter").get<int>() == 8);
  CHECK(report.at("hardwareAligned").get<bool>());
}

TEST_CASE("prune at half width shrinks the stored model and reports recall") {
  const fs::path root = scratch("cli_prune_half");
  write_text_file(root / "run.json", tiny_run_config_json(3));
  const fs::path trained = root / "trained";
  REQUIRE(run_cli("train --config " + (root / "run.json").string() + " --out " + trained.string(),
                  root / "train.log") == 0);

  const fs::path pruned = root / "pruned";
  CHECK(run_cli("prune --config " + (root / "run.json").string() + " --checkpoint " +
                    (trained / "checkpoint").string() + " --out " + pruned.string() +
                    " --ratio 0.5 --strategy drrqr --mode joint",
                root / "prune.log") == 0);
  ToyModel cut = load_checkpoint(pruned / "checkpoint");
  CHECK(cut.config.key_dim == 4);
  CHECK(cut.layers[0].heads[0].w_q.cols == 4);
  CHECK(cut.layers[0].heads[0].conv_k.rows == 4);
  const nlohmann::json report = nlohmann::json::parse(read_text_file(pruned / "prune_report.json"));
  CHECK(report.at("keyDimBefore").get<int>() == 8);
  CHECK(report.at("keyDimAfter").get<int>() == 4);
  CHECK(report.at("recallBefore").get<double>() >= 0.0);
  CHECK(report.at("recallAfter").get<double>() <= 1.0);
}

TEST_CASE("spectrum exports per-token csv artifacts") {
  const fs::path root = scratch("cli_spectrum");
  write_text_file(root / "run.json", tiny_run_config_json(3));
  const fs::path trained = root / "trained";
  REQUIRE(run_cli("train --config " + (root / "run.json").string() + " --out " + trained.string(),
                  root / "train.log") == 0);

  const fs::path out = root / "spec";
  CHECK(run_cli("spectrum --config " + (root / "run.json").string() + " --checkpoint " +
                    (trained / "checkpoint").string() + " --out " + out.string(),
                root / "spectrum.log") == 0);
  const std::string spectra = read_text_file(out / "spectrum.csv");
  CHECK(spectra.rfind("head,token,sigma_index,sigma_value", 0) == 0);
  CHECK(std::count(spectra.begin(), spectra.end(), '\n') > 1);
  CHECK(read_text_file(out / "utilization.csv").rfind("head,token,utilization", 0) == 0);
}

TEST_CASE("verify succeeds normally and fails under fault injection") {
  const fs::path root = scratch("cli_verify");
  write_text_file(root / "verify.json", R"({
  "verify": {"snrTrials": 100, "snrDims": [4], "corollaryStates": 4, "corollaryDraws": 500,
             "sandwichTrials": 30, "rankBoundTrials": 20, "invarianceTransforms": 5,
             "convCommuteTrials": 10, "pcaTrials": 10, "erTrials": 10, "stabilityTrials": 10}
}
)");
  const fs::path out_ok = root / "ok";
  CHECK(run_cli("verify --config " + (root / "verify.json").string() + " --out " + out_ok.string(),
                root / "verify.log") == 0);
  const nlohmann::json report = nlohmann::json::parse(read_text_file(out_ok / "verify_report.json"));
  CHECK(report.at("allPassed").get<bool>());

  const fs::path out_bad = root / "bad";
  CHECK(run_cli("verify --inject-failure --config " + (root / "verify.json").string() + " --out " +
                    out_bad.string(),
                root / "verify_bad.log") == 1);
  const nlohmann::json bad = nlohmann::json::parse(read_text_file(out_bad / "verify_report.json"));
  CHECK_FALSE(bad.at("allPassed").get<bool>());
}

TEST_CASE("bench reports exact flop counts for both legs") {
  const fs::path root = scratch("cli_bench");
  write_text_file(root / "run.json", R"({
  "model": {"vocab": 16, "modelDim": 16, "numLayers": 1, "numHeads": 1, "keyDim": 8,
            "valueDim": 8, "convLen": 2, "seqLen": 5, "numPairs": 1, "variant": "delta"},
  "bench": {"tokens": 64, "repeats": 3, "warmup": 1, "ratio": 0.5}
}
)");
  const fs::path out = root / "bench";
  CHECK(run_cli("bench --config " + (root / "run.json").string() + " --out " + out.string(),
                root / "bench.log") == 0);
  const nlohmann::json j = nlohmann::json::parse(read_text_file(out / "bench.json"));
  for (const char* leg : {"baseline", "compressed"})
    CHECK(j.at(leg).at("mixerFlops") == j.at(leg).at("closedFormFlops"));
  CHECK(j.at("baseline").at("keyDim").get<int>() == 8);
  CHECK(j.at("compressed").at("keyDim").get<int>() == 4);
  CHECK(j.at("flopModelExact").get<bool>());
  CHECK(j.at("flopRatio").get<double>() > 1.0);
}

TEST_CASE("usage and configuration failures exit with code 2") {
  const fs::path root = scratch("cli_errors");

  // Missing required option.
  CHECK(run_cli("prune", root / "no_ckpt.log") == 2);

  // Config file that does not exist, with the path named in the message.
  CHECK(run_cli("train --config " + (root / "nope.json").string() + " --out " + (root / "o").string(),
                root / "missing_cfg.log") == 2);
  CHECK(read_text_file(root / "missing_cfg.log").find("nope.json") != std::string::npos);

  // Unknown strategy name.
  write_text_file(root / "run.json", tiny_run_config_json(3));
  const fs::path trained = root / "trained";
  REQUIRE(run_cli("train --config " + (root / "run.json").string() + " --out " + trained.string(),
                  root / "train.log") == 0);
  CHECK(run_cli("prune --config " + (root / "run.json").string() + " --checkpoint " +
                    (trained / "checkpoint").string() + " --out " + (root / "p").string() +
                    " --strategy magnitude",
                root / "bad_strategy.log") == 2);

  // Unknown subcommand and bare invocation are usage errors.
  CHECK(run_cli("frobnicate", root / "unknown.log") == 2);

  // Help succeeds.
  CHECK(run_cli("--help", root / "help.log") == 0);
}

}  // TEST_SUITE
