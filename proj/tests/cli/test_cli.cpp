#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "synthetic.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(RTDFORGE_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) r.out += buf;
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "rtdforge_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const auto grammar = rtdforge::testing::make_grammar(5, 4, 8);
    rtdforge::testing::write_text_file(dir_ / "corpus.txt",
                                       rtdforge::testing::corpus_text(rtdforge::testing::make_corpus(grammar, 40000, 1)));
    const auto task = rtdforge::testing::make_topic_task(grammar, 64, 32, 2);
    rtdforge::testing::write_text_file(dir_ / "task" / "train.tsv", rtdforge::testing::to_tsv(task.train));
    rtdforge::testing::write_text_file(dir_ / "task" / "dev.tsv", rtdforge::testing::to_tsv(task.dev));
    rtdforge::testing::write_text_file(dir_ / "task.cfg", "name = TOPIC\ninput = single\noutput = classification-2\n"
                                                          "labels = 0,1\nmetrics = acc\n");
    rtdforge::testing::write_text_file(dir_ / "ft.cfg", "epochs = 1\nbatch_size = 16\nmax_seq_len = 32\n");
    rtdforge::testing::write_text_file(
        dir_ / "pre.cfg",
        "embedding_size = 16\nhidden_size = 16\nffn_size = 32\nnum_layers = 1\nnum_heads = 2\nhead_size = 8\n"
        "max_positions = 32\ntotal_steps = 20\nwarmup_steps = 2\nbatch_size = 4\nmax_seq_len = 32\n"
        "learning_rate = 1e-3\ncheckpoint_every = 10\nlog_every = 1\ncollapse_window = 5\n");
    const Result tok = run("train-tokenizer --corpus " + (dir_ / "corpus.txt").string() + " --vocab-size 320 --out " +
                           (dir_ / "vocab.txt").string());
    ASSERT_EQ(tok.code, 0) << tok.out;
    const Result pre = run("pretrain --quiet --config " + (dir_ / "pre.cfg").string() + " --corpus " +
                           (dir_ / "corpus.txt").string() + " --vocab " + (dir_ / "vocab.txt").string() + " --out " +
                           (dir_ / "pre").string());
    ASSERT_EQ(pre.code, 0) << pre.out;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string p(const std::string& rel) { return (dir_ / rel).string(); }
  static fs::path dir_;
};

fs::path Cli::dir_;

TEST_F(Cli, TrainTokenizerIsDeterministic) {
  const Result a = run("train-tokenizer --corpus " + p("corpus.txt") + " --vocab-size 320 --out " + p("v2.txt"));
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(slurp(p("v2.txt")), slurp(p("vocab.txt")));
  EXPECT_NE(a.out.find("vocab_size=320"), std::string::npos);
}

TEST_F(Cli, TrainTokenizerAcceptsBertSizedTarget) {
  const Result r = run("train-tokenizer --corpus " + p("corpus.txt") + " --vocab-size 30522 --out " + p("big.txt"));
  EXPECT_EQ(r.code, 0) << r.out;
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("train-tokenizer --corpus " + p("corpus.txt") + " --vocab-size 10 --out " + p("x.txt")).code, 2);
  EXPECT_EQ(run("train-tokenizer --corpus " + p("missing.txt") + " --vocab-size 300 --out " + p("x.txt")).code, 3);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("estimate-compute --tflops 16 --devices 1").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, PretrainWritesLogCheckpointsAndManifest) {
  const auto log = lines_of(p("pre/metrics.log"));
  ASSERT_EQ(log.size(), 20u);
  EXPECT_EQ(log.front().rfind("step=1 gen_loss=", 0), 0u);
  EXPECT_TRUE(fs::exists(p("pre/checkpoints/step-10.ckpt")));
  EXPECT_TRUE(fs::exists(p("pre/final.ckpt")));
  const auto manifest = nlohmann::json::parse(slurp(p("pre/manifest.json")));
  EXPECT_EQ(manifest["status"], "completed");
  EXPECT_EQ(manifest["command"], "pretrain");
}

TEST_F(Cli, ResumeContinuesStepNumbering) {
  const Result r = run("pretrain --quiet --config " + p("pre.cfg") + " --corpus " + p("corpus.txt") + " --vocab " +
                       p("vocab.txt") + " --out " + p("resumed") + " --resume " + p("pre/checkpoints/step-10.ckpt"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto full = lines_of(p("pre/metrics.log"));
  const auto resumed = lines_of(p("resumed/metrics.log"));
  ASSERT_EQ(resumed.size(), 10u);
  for (std::size_t i = 0; i < resumed.size(); ++i) EXPECT_EQ(resumed[i], full[10 + i]);
  EXPECT_EQ(slurp(p("resumed/final.ckpt")), slurp(p("pre/final.ckpt")));
}

TEST_F(Cli, CollapseHaltExitsWithFour) {
  rtdforge::testing::write_text_file(dir_ / "halt.cfg", slurp(p("pre.cfg")) +
                                                            "collapse_threshold = 1.0\nhalt_on_collapse = true\n");
  const Result r = run("pretrain --quiet --config " + p("halt.cfg") + " --corpus " + p("corpus.txt") + " --vocab " +
                       p("vocab.txt") + " --out " + p("halted"));
  EXPECT_EQ(r.code, 4) << r.out;
  EXPECT_NE(r.out.find("collapsed_at=5"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(slurp(p("halted/manifest.json")))["status"], "collapsed");
}

TEST_F(Cli, BadConfigExitsWithTwo) {
  rtdforge::testing::write_text_file(dir_ / "bad.cfg", "hidden_size = 16\nhiden_size = 8\n");
  const Result r = run("pretrain --config " + p("bad.cfg") + " --corpus " + p("corpus.txt") + " --vocab " +
                       p("vocab.txt") + " --out " + p("bad"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("line 2"), std::string::npos);
}

TEST_F(Cli, FinetuneRepeatedSeedHasZeroSpread) {
  const Result r = run("finetune --task " + p("task") + " --descriptor " + p("task.cfg") + " --checkpoint " +
                       p("pre/final.ckpt") + " --config " + p("ft.cfg") + " --seeds 7,7 --out " + p("ft"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("(2 seeds)"), std::string::npos);
  EXPECT_EQ(lines_of(p("ft/results.jsonl")).size(), 2u);
  const auto summary = nlohmann::json::parse(slurp(p("ft/summary.json")));
  EXPECT_EQ(summary["metrics"]["acc"]["stddev"].get<double>(), 0.0);
  EXPECT_EQ(summary["metrics"]["acc"]["runs"].get<int>(), 2);
  const auto record = nlohmann::json::parse(lines_of(p("ft/results.jsonl")).front());
  EXPECT_EQ(record["model"], "final");
  EXPECT_EQ(record["unit"], "percent");
  EXPECT_EQ(record["checkpoint_digest"].get<std::string>().size(), 16u);
}

TEST_F(Cli, FinetuneRandomInitAndReport) {
  const Result r = run("finetune --random-init --task " + p("task") + " --descriptor " + p("task.cfg") +
                       " --checkpoint " + p("pre/final.ckpt") + " --config " + p("ft.cfg") + " --seeds 1,2 --out " +
                       p("ft_random"));
  ASSERT_EQ(r.code, 0) << r.out;
  const Result rep = run("glue-report --results " + p("ft_random") + " --mode avg --mode avg-tasks --out " +
                         p("report.json"));
  ASSERT_EQ(rep.code, 0) << rep.out;
  EXPECT_NE(rep.out.find("random-init"), std::string::npos);
  EXPECT_NE(rep.out.find("AVG-TASKS"), std::string::npos);
  const auto report = nlohmann::json::parse(slurp(p("report.json")));
  EXPECT_EQ(report["rows"][0]["tasks"]["TOPIC"]["acc"]["runs"].get<int>(), 2);
}

TEST_F(Cli, GlueModeNeedsEveryTask) {
  rtdforge::testing::write_text_file(dir_ / "rec.jsonl",
                                     R"({"model":"m","task":"RTE","unit":"percent","metrics":{"acc":60}})" "\n");
  const Result r = run("glue-report --results " + p("rec.jsonl") + " --mode glue");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("GLUE score needs task CoLA"), std::string::npos);
  EXPECT_EQ(run("glue-report --results " + p("rec.jsonl") + " --mode median").code, 2);
}

TEST_F(Cli, FinetuneUnseenLabelExitsWithThree) {
  rtdforge::testing::write_text_file(dir_ / "badtask" / "train.tsv", "sentence1\tlabel\nthe cat\t0\nthe dog\t5\n");
  rtdforge::testing::write_text_file(dir_ / "badtask" / "dev.tsv", "sentence1\tlabel\nthe cat\t0\n");
  const Result r = run("finetune --task " + p("badtask") + " --descriptor " + p("task.cfg") + " --checkpoint " +
                       p("pre/final.ckpt") + " --config " + p("ft.cfg") + " --seeds 1 --out " + p("ft_bad"));
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("unknown label '5'"), std::string::npos);
}

TEST_F(Cli, EstimateCompute) {
  const Result v100 = run("estimate-compute --tflops 16 --devices 1 --days 4");
  ASSERT_EQ(v100.code, 0);
  EXPECT_NE(v100.out.find("pfs_days_rounded=0.02"), std::string::npos);
  EXPECT_NE(run("estimate-compute --tflops 35 --devices 1 --days 3.75").out.find("pfs_days_rounded=0.04"),
            std::string::npos);
  const Result gpt = run("estimate-compute --tflops 12 --devices 8 --days 30 --score 77.9");
  EXPECT_NE(gpt.out.find("pfs_days_rounded=0.95"), std::string::npos);
  EXPECT_NE(gpt.out.find("pfs_days_per_point=1.22003"), std::string::npos);
  EXPECT_NE(run("estimate-compute --tflops 16 --devices 1 --days 8").out.find("pfs_days=0.04224"),
            std::string::npos);
  EXPECT_EQ(run("estimate-compute --tflops 16 --devices 1 --days 0").code, 2);
}

}  // namespace
