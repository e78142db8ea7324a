#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "e2llm/config.hpp"
#include "e2llm/io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("e2llm_cli_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = "cd '" + workdir().string() + "' && '" E2LLM_CLI_PATH "' " + args + " >stdout.txt 2>stderr.txt";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& name) { return e2llm::read_file((workdir() / name).string()); }

void write(const std::string& name, const std::string& s) {
  std::ofstream out(workdir() / name, std::ios::binary);
  out << s;
}

const char* kTiny =
    "model.d_model = 16\nmodel.n_layers = 1\nmodel.n_heads = 2\nmodel.head_dim = 8\nmodel.ffn_mult = 2\n"
    "model.base_window = 32\ntrain.pretrain_steps = 4\ntrain.extend_steps = 3\ntrain.batch_size = 2\n"
    "train.trained_window = 32\ntrain.record_wall_time = false\ntrain.log_every = 1\npolicy.g_max = 4\n"
    "eval.windows = 32, 64\neval.stride = 16\neval.kv_cases = 2\neval.kv_window = 400\n"
    "eval.kv_max_new_tokens = 8\neval.scales = 1, 2, 6\npaths.corpus = corpus.txt\npaths.eval_corpus = corpus.txt\n"
    "paths.checkpoint = pre.ckpt\npaths.output = out\n";

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("bogus"), 1);
  EXPECT_EQ(run("show-config --no-such-flag"), 1);
  write("bad.conf", "model.colour = red\n");
  EXPECT_EQ(run("show-config --config bad.conf"), 1);
  EXPECT_NE(slurp("stderr.txt").find("bad.conf:1"), std::string::npos);
  EXPECT_EQ(run("show-config --set nonsense"), 1);
}

TEST(Cli, ShowConfigRoundTrips) {
  write("tiny.conf", kTiny);
  ASSERT_EQ(run("show-config --config tiny.conf --set policy.g_max=6"), 0);
  const std::string shown = slurp("stdout.txt");
  EXPECT_NE(shown.find("policy.g_max = 6"), std::string::npos);
  EXPECT_NE(shown.find("policy.sink_count = 4"), std::string::npos);
  EXPECT_EQ(e2llm::show_config(e2llm::parse_config(shown)), shown);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  write("tiny.conf", kTiny);
  EXPECT_EQ(run("eval-ppl --config tiny.conf --checkpoint missing.ckpt"), 2);
  EXPECT_NE(slurp("stderr.txt").find("missing.ckpt"), std::string::npos);
  EXPECT_EQ(run("pretrain --config tiny.conf --corpus missing.txt"), 2);
}

TEST(Cli, TrainEvaluateAndDump) {
  write("tiny.conf", kTiny);
  ASSERT_EQ(run("gen-corpus --config tiny.conf --bytes 30000 --out corpus.txt"), 0);
  ASSERT_EQ(run("pretrain --config tiny.conf"), 0);
  EXPECT_EQ(slurp("out/telemetry_pretrain.csv").substr(0, 30), "step,loss,g,t,tokens,wall_ms\n0");
  ASSERT_EQ(run("extend --config tiny.conf --init pre.ckpt --checkpoint ext.ckpt --seed 3"), 0);
  const std::string weights = slurp("ext.ckpt");

  ASSERT_EQ(run("eval-ppl --config tiny.conf --checkpoint ext.ckpt --window 64 --out w64.csv"), 0);
  std::istringstream w64(slurp("w64.csv"));
  std::string header, row;
  std::getline(w64, header);
  std::getline(w64, row);
  EXPECT_EQ(header, "window,scale,stride,tokens,mean_nll,perplexity");
  EXPECT_EQ(row.substr(0, 8), "64,2,16,");
  ASSERT_EQ(run("eval-ppl --config tiny.conf --checkpoint ext.ckpt --window 32 --out w32.csv"), 0);
  EXPECT_EQ(slurp("w32.csv").find("32,1,16,"), header.size() + 1);
  EXPECT_EQ(slurp("ext.ckpt"), weights);

  ASSERT_EQ(run("eval-ppl --config tiny.conf --checkpoint ext.ckpt --window 64 --out again.csv"), 0);
  EXPECT_EQ(slurp("again.csv"), slurp("w64.csv"));

  ASSERT_EQ(run("eval-extrapolate --config tiny.conf --checkpoint pre.ckpt --out extra.csv"), 0);
  EXPECT_NE(slurp("extra.csv").find("\n64,1,16,"), std::string::npos);
  EXPECT_NE(slurp("extra.csv").find("\n64,2,16,"), std::string::npos);

  ASSERT_EQ(run("eval-scales --config tiny.conf --checkpoint ext.ckpt --out scales.csv"), 0);
  const std::string scales = slurp("scales.csv");
  EXPECT_EQ(std::count(scales.begin(), scales.end(), '\n'), 4);

  ASSERT_EQ(run("gen-kv --config tiny.conf --out cases.jsonl"), 0);
  ASSERT_EQ(run("eval-kv --config tiny.conf --checkpoint ext.ckpt --cases cases.jsonl --out kv.csv"), 0);
  EXPECT_EQ(slurp("kv.csv").substr(0, 45), "case_id,window,scale,correct,answer_found_at\n");

  ASSERT_EQ(run("dump-attn --config tiny.conf --checkpoint ext.ckpt --case 1 --layer 0 --out heat"), 0);
  EXPECT_EQ(slurp("heat.pgm").substr(0, 3), "P2\n");
  EXPECT_NE(slurp("heat_summary.csv").find("row,argmax"), std::string::npos);
  EXPECT_EQ(run("dump-attn --config tiny.conf --checkpoint ext.ckpt --case 9"), 1);

  for (const auto& entry : fs::recursive_directory_iterator(workdir())) {
    EXPECT_NE(entry.path().extension(), ".tmp") << entry.path();
  }
}

TEST(Cli, TelemetryIsByteIdenticalAcrossRuns) {
  write("tiny.conf", kTiny);
  ASSERT_EQ(run("gen-corpus --config tiny.conf --bytes 30000 --out corpus.txt"), 0);
  ASSERT_EQ(run("pretrain --config tiny.conf --out t1.csv --checkpoint a.ckpt"), 0);
  ASSERT_EQ(run("pretrain --config tiny.conf --out t2.csv --checkpoint b.ckpt"), 0);
  EXPECT_EQ(slurp("t1.csv"), slurp("t2.csv"));
  EXPECT_EQ(slurp("a.ckpt"), slurp("b.ckpt"));
}
