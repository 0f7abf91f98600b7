#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "support.hpp"

namespace {
struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI binary with stderr discarded; stdout is captured.
Run lexrl_cli(const std::string& args) {
  const std::string cmd = std::string(LEXRL_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Tiny model and language so a full pipeline runs in seconds.
const char* kTinyConfig = R"({
  "layers": 1, "width": 16, "heads": 2, "context_length": 256, "prompt_window": 32,
  "train_size": 40, "test_size": 6, "num_epochs": 1, "batch_size": 8, "lr": 0.001,
  "max_steps": 3, "sims_per_prompt": 2, "accum_grad_steps": 2, "policy_lr": 0.001,
  "max_new_tokens": 24, "eval_every": 2, "eval_set_size": 3, "seed": 7
})";

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new lexrl::testing::TempDir("cli");
    write(path("tiny.json"), kTinyConfig);
    ASSERT_EQ(lexrl_cli("toygen --config " + path("tiny.json") + " --out-dir " + path("toy")).code, 0);
    ASSERT_EQ(lexrl_cli("sft --config " + path("tiny.json") + " --corpus " + path("toy/train.tsv") + " --dict " +
                        path("toy/dict.tsv") + " --out " + path("sft"))
                  .code,
              0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string path(const std::string& name) { return (*dir_ / name).string(); }
  static lexrl::testing::TempDir* dir_;
};
lexrl::testing::TempDir* Pipeline::dir_ = nullptr;
}  // namespace

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(lexrl_cli("").code, 1);
  EXPECT_EQ(lexrl_cli("frobnicate").code, 1);
  EXPECT_EQ(lexrl_cli("score --hyp a --ref b --bogus-flag 1").code, 1);
  EXPECT_EQ(lexrl_cli("score --hyp a --ref b --metric rouge").code, 1);
  EXPECT_EQ(lexrl_cli("sft --out x").code, 1);  // --corpus missing
  EXPECT_EQ(lexrl_cli("sft --corpus a --out b --max-steps -1").code, 1);
}

TEST(Cli, VersionPrintsBuildInfo) {
  const auto r = lexrl_cli("--version");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("lexrl"), std::string::npos);
}

TEST(Cli, RuntimeFailuresExitWithTwo) {
  EXPECT_EQ(lexrl_cli("score --hyp /nonexistent/h --ref /nonexistent/r").code, 2);
  EXPECT_EQ(lexrl_cli("dict build --in /nonexistent/raw.tsv --out /tmp/x.tsv").code, 2);
}

TEST(Cli, DictBuildFiltersAndSummarizes) {
  lexrl::testing::TempDir dir("dict");
  write(dir / "raw.tsv", "# comment\nhola\tjamaya\nmuy buenos dias a todos\tx\nuno dos tres cuatro cinco seis\ty\n");
  const auto r = lexrl_cli("dict build --in " + (dir / "raw.tsv").string() + " --out " + (dir / "d.tsv").string() +
                           " --max-source-words 5");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "kept=2 dropped=1\n");
  EXPECT_EQ(slurp(dir / "d.tsv"), "hola\tjamaya\nmuy buenos dias a todos\tx\n");
}

TEST(Cli, ScorePrintsPerLineAndMean) {
  lexrl::testing::TempDir dir("score");
  write(dir / "h.txt", "a b c d\nzzz\n");
  write(dir / "r.txt", "a b c d\nyyy\n");
  const auto r = lexrl_cli("score --hyp " + (dir / "h.txt").string() + " --ref " + (dir / "r.txt").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "line\tbleu\n1\t1\n2\t0\nmean\t0.5\n");
  const auto c = lexrl_cli("score --metric character --hyp " + (dir / "h.txt").string() + " --ref " +
                           (dir / "r.txt").string());
  EXPECT_EQ(c.code, 0);
  EXPECT_NE(c.out.find("line\tcharacter\n1\t1\n2\t0\n"), std::string::npos);
}

TEST_F(Pipeline, ToygenWritesEverythingDeterministically) {
  for (const char* f : {"train.tsv", "test.tsv", "dict.tsv", "manifest.json"}) {
    EXPECT_TRUE(std::filesystem::exists(*dir_ / "toy" / f)) << f;
  }
  EXPECT_EQ(lines(slurp(*dir_ / "toy" / "train.tsv")), 40u);
  const auto manifest = nlohmann::json::parse(slurp(*dir_ / "toy" / "manifest.json"));
  EXPECT_EQ(manifest["seed"], 7);
  ASSERT_EQ(lexrl_cli("toygen --config " + path("tiny.json") + " --out-dir " + path("toy2")).code, 0);
  for (const char* f : {"train.tsv", "test.tsv", "dict.tsv", "manifest.json"}) {
    EXPECT_EQ(slurp(*dir_ / "toy" / f), slurp(*dir_ / "toy2" / f)) << f;
  }
}

TEST_F(Pipeline, SftIsReproducibleByteForByte) {
  EXPECT_EQ(lines(slurp(*dir_ / "sft" / "loss_log.csv")), 1u + 5u);
  ASSERT_EQ(lexrl_cli("sft --config " + path("tiny.json") + " --corpus " + path("toy/train.tsv") + " --dict " +
                      path("toy/dict.tsv") + " --out " + path("sft2"))
                .code,
            0);
  for (const char* f : {"manifest.json", "params.bin", "loss_log.csv"}) {
    EXPECT_EQ(slurp(*dir_ / "sft" / f), slurp(*dir_ / "sft2" / f)) << f;
  }
}

TEST_F(Pipeline, RlHonorsFlagOverConfigAndIsReproducible) {
  auto rl = [&](const std::string& out, const std::string& extra) {
    return lexrl_cli("rl --config " + path("tiny.json") + " --ckpt " + path("sft") + " --corpus " +
                     path("toy/train.tsv") + " --dict " + path("toy/dict.tsv") + " --out " + path(out) + extra)
        .code;
  };
  ASSERT_EQ(rl("rl", ""), 0);
  EXPECT_EQ(lines(slurp(*dir_ / "rl" / "train_log.csv")), 1u + 3u);  // max_steps from the file
  EXPECT_EQ(lines(slurp(*dir_ / "rl" / "eval_log.csv")), 1u + 1u);
  EXPECT_FALSE(std::filesystem::exists(*dir_ / "rl" / "nonfinite_batch.json"));
  ASSERT_EQ(rl("rl2", ""), 0);
  for (const char* f : {"manifest.json", "params.bin", "train_log.csv", "eval_log.csv"}) {
    EXPECT_EQ(slurp(*dir_ / "rl" / f), slurp(*dir_ / "rl2" / f)) << f;
  }
  ASSERT_EQ(rl("rl3", " --max-steps 2"), 0);
  EXPECT_EQ(lines(slurp(*dir_ / "rl3" / "train_log.csv")), 1u + 2u);
  ASSERT_EQ(rl("rl4", " --no-tool --reward character"), 0);
  EXPECT_EQ(lines(slurp(*dir_ / "rl4" / "train_log.csv")), 1u + 3u);
}

TEST_F(Pipeline, EvalReportsReplayAndNoToolZeros) {
  const std::string base = "eval --config " + path("tiny.json") + " --ckpt " + path("sft") + " --test " +
                           path("toy/test.tsv") + " --dict " + path("toy/dict.tsv");
  ASSERT_EQ(lexrl_cli(base + " --report " + path("r.json") + " --transcripts " + path("t.jsonl")).code, 0);
  const auto report = nlohmann::json::parse(slurp(*dir_ / "r.json"));
  EXPECT_EQ(report["n_samples"], 6);
  EXPECT_EQ(lines(slurp(*dir_ / "t.jsonl")), 6u);

  ASSERT_EQ(lexrl_cli(base + " --report " + path("r2.json") + " --replay " + path("t.jsonl")).code, 0);
  EXPECT_EQ(slurp(*dir_ / "r.json"), slurp(*dir_ / "r2.json"));

  ASSERT_EQ(lexrl_cli(base + " --no-tool --report " + path("r3.json")).code, 0);
  const auto nt = nlohmann::json::parse(slurp(*dir_ / "r3.json"));
  for (const char* k : {"answers_with_tools_pct", "avg_tool_calls", "successful_tool_calls_pct", "successful_queries",
                        "successful_queries_max"}) {
    EXPECT_EQ(nt[k], 0) << k;
  }
}

TEST_F(Pipeline, GeneratePrintsTranscriptAndAnswer) {
  const auto r = lexrl_cli("generate --config " + path("tiny.json") + " --ckpt " + path("sft") + " --dict " +
                           path("toy/dict.tsv") + " --text hola");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("answer: "), std::string::npos);
}
