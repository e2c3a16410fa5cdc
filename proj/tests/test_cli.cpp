// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"

namespace ssnas {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code = -1;
  std::string err;
};

fs::path workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("ssnas_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Run ssnas(const std::string& args) {
  const fs::path err = workdir() / "stderr.txt";
  const std::string cmd = std::string(SSNAS_CLI_PATH) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

fs::path tiny_config(const std::string& name, const std::string& search_extra = "") {
  const fs::path p = workdir() / name;
  std::ofstream(p) << R"({"schema_version": 1,
    "dataset": {"classes": 4, "per_class": 24, "test_per_class": 4, "rho": 4},
    "search": {"epochs": 2, "batch_size": 8)" << search_extra << R"(},
    "finetune": {"epochs": 2, "batch_size": 16}})";
  return p;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

const fs::path& searched() {
  static const fs::path out = [] {
    const fs::path o = workdir() / "search_a";
    const auto r = ssnas("search --config " + tiny_config("tiny.json").string() + " --seed 7 --out " + o.string());
    EXPECT_EQ(r.code, 0) << r.err;
    return o;
  }();
  return out;
}

const fs::path& finetuned() {
  static const fs::path out = [] {
    const fs::path o = workdir() / "finetune";
    const auto r = ssnas("finetune --from " + searched().string() + " --out " + o.string());
    EXPECT_EQ(r.code, 0) << r.err;
    return o;
  }();
  return out;
}

TEST(Cli, MakeLtPlans) {
  const fs::path out = workdir() / "lt";
  ASSERT_EQ(ssnas("make-lt --rho 10 --classes 10 --per-class 500 --seed 7 --out " + out.string()).code, 0);
  const auto plan = read_json(out / "lt_plan.json");
  const auto counts = plan.at("lt_counts").get<std::vector<std::size_t>>();
  EXPECT_EQ(counts.front(), 387u);
  EXPECT_EQ(counts.back(), 38u);
  std::size_t total = 0;
  for (auto c : counts) total += c;
  EXPECT_EQ(read_json(out / "manifest.json").at("count").get<std::size_t>(), total);

  ASSERT_EQ(ssnas("make-lt --rho 1 --classes 3 --per-class 20 --out " + out.string()).code, 0);
  EXPECT_EQ(read_json(out / "lt_plan.json").at("lt_counts").get<std::vector<std::size_t>>(),
            (std::vector<std::size_t>{20, 20, 20}));

  const auto bad = ssnas("make-lt --rho 1e9 --per-class 10 --out " + out.string());
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("unsatisfiable imbalance"), std::string::npos) << bad.err;
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(ssnas("").code, 2);
  EXPECT_EQ(ssnas("search --no-such-flag").code, 2);
  EXPECT_EQ(ssnas("finetune --out x").code, 2);
  EXPECT_EQ(ssnas("search --config /nonexistent.json").code, 2);
  EXPECT_EQ(ssnas("--version").code, 0);
}

TEST(Cli, SearchWritesArtifactsDeterministically) {
  const fs::path a = searched();
  for (const char* f : {"genotype.json", "weights.bin", "history.csv", "report.json", "report.md"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  const auto rep = read_json(a / "report.json");
  EXPECT_EQ(rep.at("label_reads_during_search"), 0);
  EXPECT_EQ(rep.at("status"), "ok");

  const fs::path b = workdir() / "search_b";
  ASSERT_EQ(ssnas("search --config " + tiny_config("tiny.json").string() + " --seed 7 --out " + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "genotype.json"), slurp(b / "genotype.json"));
  EXPECT_EQ(slurp(a / "weights.bin"), slurp(b / "weights.bin"));

  // re-run from the report snapshot alone
  const fs::path c = workdir() / "search_c";
  ASSERT_EQ(ssnas("search --config " + (a / "report.json").string() + " --out " + c.string()).code, 0);
  EXPECT_EQ(slurp(a / "genotype.json"), slurp(c / "genotype.json"));
}

TEST(Cli, SearchZeroEpochs) {
  const fs::path out = workdir() / "search_zero";
  const auto r = ssnas("search --config " + tiny_config("tiny.json").string() + " --epochs 0 --out " + out.string());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "genotype.json"));
}

TEST(Cli, SearchDivergenceExitsFourAndKeepsHistory) {
  const fs::path out = workdir() / "search_div";
  const auto r = ssnas("search --config " + tiny_config("div.json", R"(, "divergence_threshold": 0.001)").string() +
                       " --out " + out.string());
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_TRUE(fs::exists(out / "history.csv"));
  EXPECT_EQ(read_json(out / "report.json").at("status"), "diverged");
}

TEST(Cli, FinetuneThenEvalIsIdempotent) {
  const fs::path ft = finetuned();
  const auto rep = read_json(ft / "report.json");
  ASSERT_FALSE(rep.at("metrics").is_null());
  const fs::path ev = workdir() / "eval";
  ASSERT_EQ(ssnas("eval --from " + ft.string() + " --out " + ev.string()).code, 0);
  const auto again = read_json(ev / "report.json");
  EXPECT_EQ(again.at("metrics").at("accuracy"), rep.at("metrics").at("accuracy"));
  EXPECT_EQ(again.at("metrics").at("per_class_recall"), rep.at("metrics").at("per_class_recall"));
  EXPECT_EQ(slurp(ev / "confusion.csv"), slurp(ft / "confusion.csv"));
}

TEST(Cli, MissingCheckpointExitsThree) {
  const fs::path empty = workdir() / "empty_run";
  fs::create_directories(empty);
  EXPECT_EQ(ssnas("finetune --from " + empty.string() + " --out " + (workdir() / "x").string()).code, 3);
  EXPECT_EQ(ssnas("eval --from " + empty.string()).code, 3);
  EXPECT_EQ(ssnas("report " + (empty / "report.json").string()).code, 3);
}

TEST(Cli, TransferToTwoClasses) {
  const fs::path out = workdir() / "transfer";
  const auto r = ssnas("transfer --from " + searched().string() + " --to synthetic:2:4 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = read_json(out / "report.json");
  EXPECT_EQ(rep.at("class_count"), 2);
  EXPECT_EQ(rep.at("metrics").at("per_class_recall").size(), 2u);
  EXPECT_EQ(ssnas("transfer --from " + searched().string() + " --to imagenet:/x --out " + out.string()).code, 2);
}

TEST(Cli, AblateEmitsFourRowTable) {
  const fs::path out = workdir() / "ablate";
  const auto r = ssnas("ablate --from " + searched().string() + " --seeds 1 --epochs 1 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto table = slurp(out / "ablation.md");
  EXPECT_EQ(table.rfind("| Method | Error |\n|---|---|\n", 0), 0u);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 6);
  for (const char* row : {"| CE |", "| CE + Logit adj. |", "| FL |", "| FL + Logit adj. |"})
    EXPECT_NE(table.find(row), std::string::npos) << row;
}

TEST(Cli, ReportMergesAndRejectsMixedClassCounts) {
  const fs::path out = workdir() / "merged";
  ASSERT_EQ(ssnas("report " + (finetuned() / "report.json").string() + " --out " + out.string()).code, 0);
  const auto md = slurp(out / "report.md");
  EXPECT_EQ(std::count(md.begin(), md.end(), '\n'), 3);
  const fs::path tr = workdir() / "transfer_mixed";
  ASSERT_EQ(ssnas("transfer --from " + searched().string() + " --epochs 1 --out " + tr.string()).code, 0);
  const auto r = ssnas("report " + (finetuned() / "report.json").string() + " " + (tr / "report.json").string() +
                       " --out " + out.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("conflicting class counts"), std::string::npos);
}

TEST(Cli, ThreadCountDoesNotChangeResults) {
  const fs::path a = workdir() / "threads_1", b = workdir() / "threads_4";
  const std::string cfg = tiny_config("one_epoch.json").string();
  ASSERT_EQ(ssnas("search --config " + cfg + " --epochs 1 --out " + a.string()).code, 0);
  {
    testing::ThreadsEnv env(4);
    ASSERT_EQ(ssnas("search --config " + cfg + " --epochs 1 --out " + b.string()).code, 0);
  }
  EXPECT_EQ(slurp(a / "weights.bin"), slurp(b / "weights.bin"));
}

}  // namespace
}  // namespace ssnas
