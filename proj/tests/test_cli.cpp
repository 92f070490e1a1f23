#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "privsim/digest.hpp"
#include "support/fixtures.hpp"

using nlohmann::json;
using privsim::testing::TempDir;

namespace {

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

Result run(const std::string& args, const TempDir& dir) {
    const auto err_file = dir / "stderr.txt";
    const auto cmd = std::string(PRIVSIM_CLI_PATH) + " " + args + " 2>" + err_file.string();
    Result r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (auto n = std::fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = privsim::read_file(err_file);
    return r;
}

}  // namespace

TEST(Cli, EndToEndOnSyntheticData) {
    TempDir dir("cli");
    const auto data = (dir / "data.json").string();
    ASSERT_EQ(run("synth --out " + data + " --questions 10 --respondents 6", dir).code, 0);

    const auto ingest = run("ingest " + data, dir);
    ASSERT_EQ(ingest.code, 0) << ingest.err;
    EXPECT_EQ(json::parse(ingest.out)["questions"], 10);

    const json cfg{{"dataset", data},
                   {"output_dir", (dir / "runs").string()},
                   {"optimizer", {{"B", 2}, {"I", 2}}},
                   {"bootstrap", {{"resamples", 50}}}};
    privsim::write_file(dir / "demo.json", cfg.dump());
    const auto opt = run("optimize --config " + (dir / "demo.json").string(), dir);
    ASSERT_EQ(opt.code, 0) << opt.err;
    const auto runs = (dir / "runs").string();
    const auto eval = run("evaluate --run demo --runs-dir " + runs, dir);
    ASSERT_EQ(eval.code, 0) << eval.err;
    EXPECT_EQ(json::parse(eval.out)["conditions"].size(), 3u);

    EXPECT_EQ(run("report --run demo --runs-dir " + runs + " --format plot", dir).code, 0);
    EXPECT_TRUE(std::filesystem::exists(dir / "runs/demo/plots/acc.svg"));
    const auto replay = run("replay --run demo --runs-dir " + runs, dir);
    ASSERT_EQ(replay.code, 0) << replay.err;
    EXPECT_TRUE(json::parse(replay.out)["mismatched"].empty());
}

TEST(Cli, ErrorsAreMachineReadable) {
    TempDir dir("clierr");
    const auto missing = run("ingest " + (dir / "nope.json").string(), dir);
    EXPECT_EQ(missing.code, 2);
    const auto rec = json::parse(missing.err);
    EXPECT_EQ(rec["error"]["kind"], "IoError");
    EXPECT_FALSE(rec["error"]["message"].get<std::string>().empty());

    privsim::write_file(dir / "bad.json", R"({"dataset": "x.json", "colour": 1})");
    const auto bad = run("optimize --config " + (dir / "bad.json").string(), dir);
    EXPECT_EQ(bad.code, 2);
    EXPECT_EQ(json::parse(bad.err)["error"]["kind"], "ConfigError");

    privsim::write_file(dir / "notcross.json", R"({"dataset": "x.json"})");
    EXPECT_EQ(run("cross-study --config " + (dir / "notcross.json").string(), dir).code, 2);
}

TEST(Cli, UsageErrorsAreNonzero) {
    TempDir dir("cliusage");
    EXPECT_NE(run("", dir).code, 0);
    EXPECT_NE(run("report --run x --format pie", dir).code, 0);
    EXPECT_NE(run("frobnicate", dir).code, 0);
}
