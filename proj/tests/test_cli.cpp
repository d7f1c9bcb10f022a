// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Drives the dmil executable end to end through the shell.

#include "dmil/data.hpp"
#include "dmil/io.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <string>

using namespace dmil;
using dmil::testing::TempDir;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(DMIL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string text(const std::filesystem::path& p) {
    const auto b = read_file(p);
    return {b.begin(), b.end()};
}

const char* kTinyData =
    "--set d=8 --set train_bags=20 --set test_bags=10 --set bag_size_min=10 --set bag_size_max=14 "
    "--set key_fraction_min=0.1";

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run(""), 2);
    EXPECT_EQ(run("--frobnicate"), 2);
    EXPECT_EQ(run("gen"), 2);  // --out is required
    EXPECT_EQ(run("train-agg --data /nonexistent/store --out x.ckpt"), 2);
}

TEST(Cli, RuntimeErrorsExitOne) {
    TempDir dir("cli_err");
    const auto out = (dir.path() / "data").string();
    EXPECT_EQ(run("gen --set nonsense=1 --out " + out), 1);
    EXPECT_EQ(run("gen --set key_fraction_min=0.01 --out " + out), 1);
    // A directory without a manifest is not a feature store.
    EXPECT_EQ(run("train-agg --data " + dir.path().string() + " --out " + (dir.path() / "m.ckpt").string()), 1);
}

TEST(Cli, GradcheckPasses) { EXPECT_EQ(run("gradcheck --seed 3"), 0); }

TEST(Cli, PipelineIsIdempotent) {
    TempDir dir("cli_pipe");
    const auto p = [&](const char* name) { return (dir.path() / name).string(); };
    ASSERT_EQ(run(std::string("gen ") + kTinyData + " --seed 4 --out " + p("data")), 0);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "data" / "manifest.tsv"));
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "data" / "summary.txt"));

    const std::string train = " --epochs 2 --lr 0.001 --hidden 4 --seed 1";
    ASSERT_EQ(run("train-agg --data " + p("data") + " --agg attention --out " + p("agg.ckpt") + train), 0);
    EXPECT_EQ(text(p("agg.ckpt.trace.tsv")).substr(0, 5), "epoch");
    ASSERT_EQ(run("build-dict --data " + p("data") + " --mode attention --k 2 --ckpt " + p("agg.ckpt") + " --out " +
                  p("dict.cdf32")),
              0);
    ASSERT_EQ(run("train-ibmil --data " + p("data") + " --dict " + p("dict.cdf32") + " --combinator add --l 4 --k 2 --out " +
                  p("ib.ckpt") + train),
              0);
    ASSERT_EQ(run("eval --data " + p("data") + " --ckpt " + p("ib.ckpt") + " --dict " + p("dict.cdf32") +
                  " --method ibmil --tag attention --out " + p("eval.csv")),
              0);
    const std::string first = text(p("eval.csv"));
    EXPECT_EQ(first.substr(0, first.find('\n')), "run_id,method,extractor_tag,K,l,combinator,precision,recall,accuracy,auc,seed");
    EXPECT_NE(first.find(",ibmil,attention,2,4,add,"), std::string::npos) << first;

    // Rerunning every step reproduces every file.
    const auto ckpt = read_file(p("ib.ckpt"));
    ASSERT_EQ(run("train-ibmil --data " + p("data") + " --dict " + p("dict.cdf32") + " --combinator add --l 4 --k 2 --out " +
                  p("ib.ckpt") + train),
              0);
    EXPECT_EQ(read_file(p("ib.ckpt")), ckpt);
    ASSERT_EQ(run("eval --data " + p("data") + " --ckpt " + p("ib.ckpt") + " --dict " + p("dict.cdf32") +
                  " --method ibmil --tag attention --out " + p("eval.csv")),
              0);
    EXPECT_EQ(text(p("eval.csv")), first);

    // Interventional checkpoints refuse to run without their dictionary.
    EXPECT_EQ(run("eval --data " + p("data") + " --ckpt " + p("ib.ckpt") + " --out " + p("bad.csv")), 1);
    // A dictionary of the wrong size is rejected when --k is given.
    EXPECT_EQ(run("train-ibmil --data " + p("data") + " --dict " + p("dict.cdf32") + " --k 3 --out " + p("x.ckpt") + train), 1);
}

TEST(Cli, ClassSpecificDictionaryAsKnnClassifier) {
    TempDir dir("cli_knn");
    const auto p = [&](const char* name) { return (dir.path() / name).string(); };
    ASSERT_EQ(run(std::string("gen ") + kTinyData + " --seed 5 --out " + p("a")), 0);
    ASSERT_EQ(run(std::string("gen ") + kTinyData + " --seed 6 --out " + p("b")), 0);
    ASSERT_EQ(run("build-dict --data " + p("a") + " --data " + p("b") + " --mode class-specific --k 4 --out " + p("cs.cdf32")), 0);
    const auto dict = load_dictionary(p("cs.cdf32"));
    EXPECT_EQ(dict.strata_class, (std::vector<std::size_t>{0, 0, 1, 1}));
    ASSERT_EQ(run("eval --data " + p("a") + " --knn --dict " + p("cs.cdf32") + " --out " + p("knn.csv")), 0);
    EXPECT_NE(text(p("knn.csv")).find("class-specific"), std::string::npos);
    EXPECT_EQ(run("build-dict --data " + p("a") + " --mode class-specific --k 3 --out " + p("bad.cdf32")), 1);
}

TEST(Cli, RunAllWithTinyConfig) {
    TempDir dir("cli_runall");
    write_text(dir.path() / "tiny.cfg",
               "d=8\ntrain_bags=16\ntest_bags=8\nbag_size_min=10\nbag_size_max=12\nkey_fraction_min=0.1\n"
               "epochs=1\ncontrol_epochs=2\nhidden=4\nk=2\nl=4\nk_sweep=2\nl_sweep=4\n");
    const auto cfg = (dir.path() / "tiny.cfg").string();
    ASSERT_EQ(run("run-all --config " + cfg + " --seeds 0,1 --out " + (dir.path() / "r1").string()), 0);
    ASSERT_EQ(run("run-all --config " + cfg + " --seeds 0-1 --out " + (dir.path() / "r2").string()), 0);
    EXPECT_EQ(read_file(dir.path() / "r1" / "results.csv"), read_file(dir.path() / "r2" / "results.csv"));
    EXPECT_EQ(run("run-all --config " + cfg + " --seeds x --out " + (dir.path() / "r3").string()), 2);
}
