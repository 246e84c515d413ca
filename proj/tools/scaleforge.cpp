// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "scaleforge/scaleforge.hpp"

namespace sf = scaleforge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitGradcheck = 4;

/// Flags shared by every command that resolves a config.
struct ConfigFlags {
    std::string preset;
    std::string config_path;
    std::map<std::string, std::string> raw;

    void attach(CLI::App* cmd) {
        cmd->add_option("--preset", preset, "named preset (see `presets`)");
        cmd->add_option("--config", config_path, "JSON config file or a run's config.echo");
        for (const auto& f : sf::field_registry()) {
            const std::string key = f.key;
            auto* opt = cmd->add_option_function<std::string>(
                f.flag(), [this, key](const std::string& v) { raw[key] = v; },
                f.help + " [default " + f.default_value.dump() + "]");
            (void)opt;
        }
    }

    sf::ResolvedConfig resolve() const {
        nlohmann::json file;
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw sf::ConfigError("cannot open config file '" + config_path + "'");
            try {
                file = nlohmann::json::parse(in);
            } catch (const nlohmann::json::exception& e) {
                throw sf::ConfigError("config file '" + config_path + "': " + e.what());
            }
        }
        return sf::resolve_config(preset, file, raw);
    }
};

std::vector<std::size_t> parse_sizes(const std::string& text, const char* what) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto v = sf::parse_field_value(sf::FieldSpec{what, sf::FieldType::Int, 0, ""}, item);
        out.push_back(v.get<std::size_t>());
    }
    if (out.empty()) throw sf::ConfigError(std::string("empty list for --") + what);
    return out;
}

int cmd_train(const ConfigFlags& flags) {
    const sf::TrainOptions opt = sf::to_train_options(flags.resolve());
    const sf::TrainResult res = sf::train(opt);
    if (res.aborted) {
        std::cerr << "aborted at step " << res.abort_step << ": " << res.abort_reason << "\n";
        return kExitNumerical;
    }
    std::printf("run directory: %s\n", opt.out.string().c_str());
    if (res.final_valid_ppl) std::printf("final valid PPL: %.6f\n", *res.final_valid_ppl);
    std::printf("clip triggers: %zu\n", res.clip_count);
    return kExitOk;
}

int print_sweep(const sf::SweepReport& rep, const sf::TrainOptions& base) {
    std::printf("%s", rep.markdown.c_str());
    std::printf("report: %s\n", (base.out / "report.md").string().c_str());
    for (const auto& r : rep.runs)
        if (r.result.aborted) return kExitNumerical;
    return kExitOk;
}

int cmd_sweep_depth(const ConfigFlags& flags, const std::string& depths) {
    const sf::TrainOptions base = sf::to_train_options(flags.resolve());
    return print_sweep(sf::sweep_depth(base, parse_sizes(depths, "depths"), base.out), base);
}

int cmd_sweep_experts(const ConfigFlags& flags, const std::string& counts, const std::string& modes) {
    const sf::TrainOptions base = sf::to_train_options(flags.resolve());
    std::vector<sf::ClipMode> clip_modes;
    std::stringstream ss(modes);
    std::string item;
    while (std::getline(ss, item, ',')) clip_modes.push_back(sf::parse_clip_mode(item));
    return print_sweep(sf::sweep_experts(base, parse_sizes(counts, "expert-counts"), clip_modes, base.out), base);
}

int cmd_eval(const std::string& path) {
    sf::Checkpoint ck;
    try {
        ck = sf::read_checkpoint(path);
    } catch (const sf::Error& e) {
        throw sf::ConfigError(e.what());
    }
    sf::ResolvedConfig cfg = sf::resolve_config("", ck.header.at("config"), {});
    const sf::TrainOptions opt = sf::to_train_options(cfg);
    sf::Model model(opt.model, opt.seed);
    sf::load_parameters(model, ck);
    auto data = sf::make_dataset(opt.task, opt.model.arch);
    std::printf("step %zu, valid PPL %.10f\n", ck.header.value("step", std::size_t{0}),
                sf::evaluate_ppl(model, data->valid()));
    return kExitOk;
}

int cmd_gradcheck(std::size_t seeds, double tol) {
    bool ok = true;
    sf::run_gradcheck_suite(seeds, {}, [&](const sf::GradcheckResult& r) {
        const bool pass = r.max_rel_error < tol;
        ok = ok && pass;
        std::printf("%-34s max rel err %.3e  max abs err %.3e  coords %7zu  %s\n", r.name.c_str(), r.max_rel_error,
                    r.max_abs_error, r.checked, pass ? "ok" : "FAIL");
        std::fflush(stdout);
    });
    std::printf("%s (tolerance %.1e, %zu seeds)\n", ok ? "gradcheck passed" : "gradcheck FAILED", tol, seeds);
    return ok ? kExitOk : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"scaleforge: deep and sparse transformer training at desk scale"};
    app.require_subcommand(1);

    ConfigFlags train_flags, depth_flags, expert_flags;
    auto* train = app.add_subcommand("train", "train one model");
    train_flags.attach(train);

    auto* depth = app.add_subcommand("sweep-depth", "train the same model at several depths");
    depth_flags.attach(depth);
    std::string depths = "2,4,8";
    depth->add_option("--depths", depths, "comma-separated layer counts")->capture_default_str();

    auto* experts = app.add_subcommand("sweep-experts", "train MoE models over expert counts and clip modes");
    expert_flags.attach(experts);
    std::string counts = "2,4,8";
    std::string modes = "vanilla,sparseclip";
    experts->add_option("--expert-counts", counts, "comma-separated expert counts")->capture_default_str();
    experts->add_option("--clip-modes", modes, "comma-separated clip modes")->capture_default_str();

    auto* eval = app.add_subcommand("eval", "validation PPL of a checkpoint");
    std::string checkpoint;
    eval->add_option("--checkpoint", checkpoint, "checkpoint.final of a run")->required();

    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and small models");
    std::size_t seeds = 20;
    double tol = 1e-4;
    grad->add_option("--seeds", seeds, "seeds per case")->capture_default_str();
    grad->add_option("--tol", tol, "maximum relative error")->capture_default_str();

    auto* list = app.add_subcommand("presets", "list presets with their table values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train) return cmd_train(train_flags);
        if (*depth) return cmd_sweep_depth(depth_flags, depths);
        if (*experts) return cmd_sweep_experts(expert_flags, counts, modes);
        if (*eval) return cmd_eval(checkpoint);
        if (*grad) return cmd_gradcheck(seeds, tol);
        if (*list) {
            std::printf("%s", sf::presets_listing().c_str());
            return kExitOk;
        }
    } catch (const sf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const sf::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
