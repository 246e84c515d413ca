// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "scaleforge/checkpoint.hpp"
#include "scaleforge/config.hpp"

#include "preset_golden.hpp"

using namespace scaleforge;

namespace {

struct CliRun {
    int code;
    std::string out;
};

CliRun cli(const std::string& args) {
    const std::string cmd = std::string(SCALEFORGE_CLI) + " " + args + " 2>&1";
    CliRun r{-1, {}};
    FILE* p = popen(cmd.c_str(), "r");
    if (p == nullptr) return r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("scaleforge_cli_" + name);
    std::filesystem::remove_all(p);
    return p;
}

const std::string kSmallRun = "--preset lm-dense-desk --steps 12 --batch 4 --seq-len 16 --eval-every 6 --warmup 2";

}  // namespace

TEST(ResolveConfig, LmDensePreset) {
    ResolvedConfig c = resolve_config("lm-dense", nullptr, {});
    EXPECT_EQ(c.get<std::string>("schedule"), "polynomial_decay");
    EXPECT_EQ(c.get<int>("warmup"), 750);
    EXPECT_EQ(c.get<double>("adam_beta1"), 0.9);
    EXPECT_EQ(c.get<double>("adam_beta2"), 0.98);
    EXPECT_EQ(c.get<double>("dropout"), 0.1);
    EXPECT_EQ(c.get<double>("attn_dropout"), 0.1);
    EXPECT_EQ(c.get<double>("weight_decay"), 0.01);
    EXPECT_EQ(c.get<double>("lr"), 5e-4);
    EXPECT_EQ(c.get<std::string>("clip"), "none");
}

TEST(ResolveConfig, MtSparsePreset) {
    ResolvedConfig c = resolve_config("mt-sparse", nullptr, {});
    EXPECT_EQ(c.get<std::string>("schedule"), "inverse_sqrt");
    EXPECT_EQ(c.get<int>("warmup"), 6000);
    EXPECT_EQ(c.get<double>("label_smoothing"), 0.1);
    EXPECT_EQ(c.get<double>("xi"), 1.0);
    EXPECT_EQ(c.get<std::string>("clip"), "sparseclip");
    EXPECT_EQ(c.get<double>("balance_weight"), 0.01);
    EXPECT_EQ(c.get<int>("moe_freq"), 2);
    EXPECT_EQ(c.get<double>("weight_decay"), 0.0);
    EXPECT_EQ(c.get<std::string>("arch"), "encoder-decoder");
}

TEST(ResolveConfig, FlagOverridesPresetAndIsMarked) {
    ResolvedConfig c = resolve_config("lm-dense", nullptr, {{"layers", "4"}});
    EXPECT_EQ(c.get<int>("layers"), 4);
    EXPECT_EQ(c.sources.at("layers"), "flag");
    EXPECT_EQ(c.sources.at("warmup"), "preset");
    EXPECT_EQ(c.sources.at("seed"), "default");
    EXPECT_EQ(c.echo()["sources"]["layers"], "flag");
}

TEST(ResolveConfig, PrecedenceDefaultsPresetConfigFlags) {
    nlohmann::json file = {{"warmup", 10}, {"lr", 0.002}};
    ResolvedConfig c = resolve_config("lm-dense-desk", file, {{"lr", "0.003"}});
    EXPECT_EQ(c.get<int>("warmup"), 10);
    EXPECT_EQ(c.sources.at("warmup"), "config");
    EXPECT_EQ(c.get<double>("lr"), 0.003);
    EXPECT_EQ(c.sources.at("lr"), "flag");
    EXPECT_EQ(c.get<int>("hidden"), 64);
    EXPECT_EQ(c.sources.at("hidden"), "preset");
}

TEST(ResolveConfig, Errors) {
    EXPECT_THROW(resolve_config("lm-huge", nullptr, {}), ConfigError);
    EXPECT_THROW(resolve_config("", nullptr, {{"no_such_field", "1"}}), ConfigError);
    EXPECT_THROW(resolve_config("", nullptr, {{"layers", "two"}}), ConfigError);
    EXPECT_THROW(resolve_config("", nullptr, {{"clip", "sparseclip"}}), ConfigError);
    EXPECT_THROW(resolve_config("", nullptr, {{"norm", "rmsnorm"}}), ConfigError);
    EXPECT_THROW(resolve_config("", nlohmann::json{{"lr", "fast"}}, {}), ConfigError);
    EXPECT_THROW(resolve_config("", nlohmann::json::array(), {}), ConfigError);
}

TEST(ResolveConfig, FullScalePresetsAreNotRunnable) {
    EXPECT_THROW(to_train_options(resolve_config("lm-sparse", nullptr, {})), ConfigError);
    EXPECT_NO_THROW(to_train_options(resolve_config("lm-sparse-desk", nullptr, {})));
}

TEST(ResolveConfig, EchoFeedsBackToSameValues) {
    ResolvedConfig a = resolve_config("mt-sparse-desk", nullptr, {{"seed", "7"}, {"top_k", "1"}});
    ResolvedConfig b = resolve_config("", a.echo(), {});
    EXPECT_EQ(b.preset, a.preset);
    EXPECT_EQ(b.values, a.values);
    EXPECT_EQ(b.echo()["table_values"], a.echo()["table_values"]);
}

TEST(Registry, EveryFlagIsUniqueAndHelpListsIt) {
    std::map<std::string, int> seen;
    for (const auto& f : field_registry()) ++seen[f.flag()];
    for (const auto& [flag, n] : seen) EXPECT_EQ(n, 1) << flag;
    for (const char* f : {"--layers", "--enc-layers", "--dec-layers", "--hidden", "--heads", "--ffn",
                          "--norm", "--experts", "--top-k", "--moe-freq", "--clip", "--xi", "--lr", "--schedule",
                          "--warmup", "--steps", "--seed", "--task", "--out"})
        EXPECT_EQ(seen.count(f), 1u) << f;
    CliRun help = cli("train --help");
    EXPECT_EQ(help.code, 0);
    for (const auto& f : field_registry()) EXPECT_NE(help.out.find(f.flag() + " "), std::string::npos) << f.flag();
    EXPECT_NE(help.out.find("--preset"), std::string::npos);
}

TEST(Presets, ReproduceAppendixTablesVerbatim) {
    CliRun r = cli("presets");
    ASSERT_EQ(r.code, 0);
    std::size_t checked = 0;
    for (const auto& p : compare_presets_with_golden(r.out, std::string(SCALEFORGE_GOLDEN_DIR) + "/appendix_tables.tsv",
                                                     checked))
        ADD_FAILURE() << p;
    EXPECT_EQ(checked, 56u);
    for (const char* desk : {"lm-dense-desk:", "lm-sparse-desk:", "mt-dense-desk:", "mt-sparse-desk:"})
        EXPECT_NE(r.out.find(std::string("\n") + desk), std::string::npos) << desk;
}

TEST(Cli, ExitCodes) {
    EXPECT_EQ(cli("presets").code, 0);
    EXPECT_EQ(cli("train --preset lm-huge").code, 2);
    EXPECT_EQ(cli("train --preset lm-dense").code, 2);
    EXPECT_EQ(cli("train --clip sparseclip --steps 1").code, 2);
    EXPECT_EQ(cli("train --layers abc").code, 2);
    const auto dir = temp_dir("nan");
    EXPECT_EQ(cli("train " + kSmallRun + " --lr 1e200 --out " + dir.string()).code, 3);
    EXPECT_EQ(read_checkpoint(dir / "checkpoint.final").header["status"], "last_good");
    std::filesystem::remove_all(dir);
    EXPECT_EQ(cli("gradcheck --seeds 1 --tol 1e-30").code, 4);
}

TEST(Cli, EchoReproducesRunBitForBit) {
    const auto a = temp_dir("echo_a"), b = temp_dir("echo_b");
    ASSERT_EQ(cli("train " + kSmallRun + " --norm deepnorm --seed 5 --out " + a.string()).code, 0);
    ASSERT_EQ(cli("train --config " + (a / "config.echo").string() + " --out " + b.string()).code, 0);
    EXPECT_EQ(read_file(a / "metrics.jsonl"), read_file(b / "metrics.jsonl"));
    auto echo = nlohmann::json::parse(read_file(a / "config.echo"));
    EXPECT_EQ(echo["values"]["norm"], "deepnorm");
    EXPECT_EQ(echo["sources"]["norm"], "flag");
    EXPECT_EQ(echo["sources"]["hidden"], "preset");
    EXPECT_EQ(echo["table_values"][0]["citation"], "appendix Table 1");
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST(Cli, EvalScoresCheckpoint) {
    const auto dir = temp_dir("eval");
    CliRun t = cli("train " + kSmallRun + " --out " + dir.string());
    ASSERT_EQ(t.code, 0);
    CliRun e = cli("eval --checkpoint " + (dir / "checkpoint.final").string());
    EXPECT_EQ(e.code, 0) << e.out;
    const auto records = read_file(dir / "metrics.jsonl");
    const auto last = nlohmann::json::parse(records.substr(records.rfind('\n', records.size() - 2) + 1));
    char want[64];
    std::snprintf(want, sizeof want, "%.10f", last["valid_ppl"].get<double>());
    EXPECT_NE(e.out.find(want), std::string::npos) << e.out;
    std::filesystem::remove_all(dir);
}

TEST(Cli, SweepDepthWritesReport) {
    const auto dir = temp_dir("sweep");
    CliRun r = cli("sweep-depth " + kSmallRun + " --depths 1,2 --out " + dir.string());
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(std::filesystem::exists(dir / "report.md"));
    EXPECT_TRUE(std::filesystem::exists(dir / "L1" / "metrics.jsonl"));
    EXPECT_TRUE(std::filesystem::exists(dir / "L2" / "metrics.jsonl"));
    std::filesystem::remove_all(dir);
}
