#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("tmoe_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

RunResult run(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(TMOE_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// A model and corpus small enough for a two-epoch run in a few seconds.
fs::path tiny_config(const fs::path& dir) {
  const nlohmann::json j{
      {"preset", "desk"},
      {"model", {{"n_layers_enc", 1}, {"n_layers_dec", 1}, {"d_model", 16}, {"d_ff", 32}, {"n_heads", 2}}},
      {"train", {{"max_epochs", 2}, {"batch_size", 16}}},
      {"sizes", {{"train", 40}, {"valid", 8}, {"test", 8}}}};
  const auto p = dir / "tiny.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

void expect_single_error_line(const RunResult& r, const std::string& category) {
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.err.rfind("error: " + category + ": ", 0), 0u) << r.err;
  EXPECT_EQ(count_lines(r.err), 1u) << r.err;
}

TEST(Cli, GenWritesDeterministicCorpora) {
  const auto d = scratch("gen");
  const auto cfg = tiny_config(d);
  ASSERT_EQ(run("gen --config " + cfg.string() + " --out " + (d / "a").string(), d).code, 0);
  ASSERT_EQ(run("gen --config " + cfg.string() + " --out " + (d / "b").string(), d).code, 0);
  for (const char* f : {"copy.train.tsv", "caesar11.test.tsv", "swap-pairs.valid.tsv", "corpora.json"}) {
    ASSERT_TRUE(fs::exists(d / "a" / f)) << f;
    EXPECT_EQ(slurp(d / "a" / f), slurp(d / "b" / f)) << f;
  }
  // Low-resource tasks get a tenth of the training data.
  EXPECT_EQ(count_lines(slurp(d / "a" / "copy.train.tsv")), 40u);
  EXPECT_EQ(count_lines(slurp(d / "a" / "swap-pairs.train.tsv")), 4u);
  ASSERT_EQ(run("gen --config " + cfg.string() + " --data-seed 99 --out " + (d / "c").string(), d).code, 0);
  EXPECT_NE(slurp(d / "a" / "copy.train.tsv"), slurp(d / "c" / "copy.train.tsv"));
}

TEST(Cli, TrainTwiceGivesIdenticalMetrics) {
  const auto d = scratch("train");
  const auto cfg = tiny_config(d);
  const std::string base = "train --quiet --config " + cfg.string() + " --variant moe-task-dynamic --seed 3 --out ";
  const auto r1 = run(base + (d / "r1").string(), d);
  ASSERT_EQ(r1.code, 0) << r1.err;
  ASSERT_EQ(run(base + (d / "r2").string(), d).code, 0);
  for (const char* f : {"metrics.csv", "config.json", "best.ckpt", "eval_test.csv"}) ASSERT_TRUE(fs::exists(d / "r1" / f)) << f;
  EXPECT_EQ(slurp(d / "r1" / "metrics.csv"), slurp(d / "r2" / "metrics.csv"));
  EXPECT_EQ(slurp(d / "r1" / "eval_test.csv"), slurp(d / "r2" / "eval_test.csv"));
  const auto metrics = slurp(d / "r1" / "metrics.csv");
  EXPECT_EQ(metrics.rfind("step,epoch,task,split,bleu,loss,aux_loss,tokens_per_expert_entropy\n", 0), 0u);
  // Per epoch: one train row, six task rows, one mean row.
  EXPECT_EQ(count_lines(metrics), 1u + 2u * 8u);
  // Table layout: task columns then the average.
  EXPECT_NE(r1.out.find("Average"), std::string::npos);
  EXPECT_EQ(slurp(d / "r1" / "eval_test.csv").rfind("model,copy,reverse,swap-pairs,caesar3,caesar7,caesar11,Average\n", 0), 0u);

  const auto snap = nlohmann::json::parse(slurp(d / "r1" / "config.json"));
  EXPECT_EQ(snap["variant"], "moe-task-dynamic");
  EXPECT_EQ(snap["seed"], 3);
  EXPECT_EQ(snap["resolved_model"]["d_model"], 16);
  EXPECT_EQ(snap["resolved_model"]["adapters"]["mode"], "dynamic");

  // The written config reproduces the run on its own.
  const auto r3 = run("train --quiet --config " + (d / "r1" / "config.json").string() + " --out " + (d / "r3").string(), d);
  ASSERT_EQ(r3.code, 0) << r3.err;
  EXPECT_EQ(slurp(d / "r1" / "metrics.csv"), slurp(d / "r3" / "metrics.csv"));

  ASSERT_EQ(run(base.substr(0, base.find("--seed")) + "--seed 4 --out " + (d / "r4").string(), d).code, 0);
  EXPECT_NE(slurp(d / "r1" / "metrics.csv"), slurp(d / "r4" / "metrics.csv"));

  // eval regenerates the stored corpora and reproduces the training-time table.
  const auto ev = run("eval --checkpoint " + (d / "r1" / "best.ckpt").string() + " --csv " + (d / "ev.csv").string(), d);
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(slurp(d / "ev.csv"), slurp(d / "r1" / "eval_test.csv"));
  ASSERT_EQ(run("gen --config " + cfg.string() + " --out " + (d / "data").string(), d).code, 0);
  const auto ev2 = run("eval --checkpoint " + (d / "r1" / "best.ckpt").string() + " --data " + (d / "data").string() +
                           " --csv " + (d / "ev2.csv").string(),
                       d);
  ASSERT_EQ(ev2.code, 0) << ev2.err;
  EXPECT_EQ(slurp(d / "ev2.csv"), slurp(d / "r1" / "eval_test.csv"));
}

TEST(Cli, SeedFanOutMatchesSingleRuns) {
  const auto d = scratch("jobs");
  const auto cfg = tiny_config(d);
  const auto r = run("train --config " + cfg.string() + " --epochs 1 --variant moe-token --seeds 5,6 --jobs 2 --out " +
                         (d / "fan").string(),
                     d);
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(run("train --quiet --config " + cfg.string() + " --epochs 1 --variant moe-token --seed 6 --out " +
                    (d / "single").string(),
                d)
                .code,
            0);
  EXPECT_TRUE(fs::exists(d / "fan" / "seed-5" / "metrics.csv"));
  EXPECT_EQ(slurp(d / "fan" / "seed-6" / "metrics.csv"), slurp(d / "single" / "metrics.csv"));
}

TEST(Cli, MergeFinetuneAndInspect) {
  const auto d = scratch("merge");
  const auto cfg = tiny_config(d);
  for (const char* suite : {"merge-a", "merge-b"}) {
    const auto r = run("train --quiet --config " + cfg.string() + " --variant moe-task-dynamic --suite " + suite +
                           " --out " + (d / suite).string(),
                       d);
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto m = run("merge --a " + (d / "merge-a" / "best.ckpt").string() + " --b " +
                         (d / "merge-b" / "best.ckpt").string() + " --finetune-steps 20 --record-every 10 --out " +
                         (d / "merged").string(),
                     d);
  ASSERT_EQ(m.code, 0) << m.err;
  const auto report = nlohmann::json::parse(slurp(d / "merged" / "merge_report.json"));
  EXPECT_EQ(report["adapters"]["a"], 2);
  EXPECT_EQ(report["adapters"]["merged"], 4);
  EXPECT_EQ(report["tasks"].size(), 8u);
  EXPECT_NE(m.out.find("\"merged\": 4"), std::string::npos);
  const auto recovery = slurp(d / "merged" / "recovery.csv");
  EXPECT_EQ(recovery.rfind("step,task,bleu\n", 0), 0u);
  EXPECT_EQ(count_lines(recovery), 1u + 3u * 8u);
  EXPECT_TRUE(fs::exists(d / "merged" / "finetuned.ckpt"));

  const auto ins = run("inspect --checkpoint " + (d / "merged" / "finetuned.ckpt").string() + " --out " +
                           (d / "inspect").string(),
                       d);
  ASSERT_EQ(ins.code, 0) << ins.err;
  EXPECT_EQ(slurp(d / "inspect" / "routing.csv").rfind("layer,token_id,sentence_id,task_id,expert_ids,weights\n", 0), 0u);
  const auto hist = slurp(d / "inspect" / "adapter_histogram.csv");
  EXPECT_EQ(hist.rfind("layer,task_id,task,adapter_id,count\n", 0), 0u);
  // Two adapter layers (encoder, decoder) x 8 tasks x 4 adapters.
  EXPECT_EQ(count_lines(hist), 1u + 2u * 8u * 4u);
  const auto summary = nlohmann::json::parse(slurp(d / "inspect" / "routing_summary.json"));
  EXPECT_TRUE(summary.contains("clustering"));
}

TEST(Cli, ErrorsAreOneMachineReadableLine) {
  const auto d = scratch("errors");
  expect_single_error_line(run("train --variant moe-banana --out " + (d / "x").string(), d), "usage");
  expect_single_error_line(run("frobnicate", d), "usage");

  std::ofstream(d / "bad.json") << R"({"train": {"patience": 0}})";
  expect_single_error_line(run("train --config " + (d / "bad.json").string() + " --out " + (d / "y").string(), d),
                           "config");
  std::ofstream(d / "broken.json") << "{ not json";
  expect_single_error_line(run("gen --config " + (d / "broken.json").string() + " --out " + (d / "z").string(), d),
                           "format");
  std::ofstream(d / "junk.ckpt") << "definitely not a checkpoint";
  expect_single_error_line(run("eval --checkpoint " + (d / "junk.ckpt").string(), d), "format");
  expect_single_error_line(run("gen --suite nope --out " + (d / "w").string(), d), "config");
  EXPECT_EQ(run("--help", d).code, 0);
}

}  // namespace
