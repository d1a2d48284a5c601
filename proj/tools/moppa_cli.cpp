// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

#include "moppa/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed_override;
    std::optional<int> threads;
    std::optional<double> eta_override;
    std::string checkpoint;
};

moppa::ExperimentConfig load(const Options& o) {
    moppa::ExperimentConfig cfg = o.config.empty() ? moppa::ExperimentConfig{} : moppa::load_experiment_config(o.config);
    if (o.seed_override) cfg.seeds = {*o.seed_override};
    cfg.validate();
    return cfg;
}

std::filesystem::path out_dir(const Options& o, const moppa::ExperimentConfig& cfg) {
    return o.out.empty() ? std::filesystem::path(cfg.output_directory) : std::filesystem::path(o.out);
}

int threads(const Options& o) {
    if (o.threads) {
        if (*o.threads < 1) throw moppa::ConfigError("--threads must be >= 1");
        return *o.threads;
    }
    return moppa::default_threads();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MoPPA adapters: invariant checks, gradient checks, regression and ablation runs"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand
    Options o;
    app.add_option("--config", o.config, "experiment config file (JSON)");
    app.add_option("--out", o.out, "output directory (default: output.directory from the config)");
    app.add_option("--seed-override", o.seed_override, "run only this seed");
    app.add_option("--threads", o.threads, "worker threads for seed sweeps (default: MOPPA_THREADS or 1)");

    auto* properties = app.add_subcommand("properties", "spectral, operator, PDE and routing invariant checks");
    properties->add_option("--eta-override", o.eta_override, "Poisson offset used by the Poisson checks");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every trainable group");
    auto* regress = app.add_subcommand("regress", "MoPPA vs LoRA regression over the seed list");
    auto* ablate = app.add_subcommand("ablate", "prior ablation with and without route regularization");
    auto* dump = app.add_subcommand("dump-filters", "write learned k, c, h1 with DCT coordinates");
    dump->add_option("--checkpoint", o.checkpoint, "checkpoint to dump (default: fresh initialization)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? moppa::kExitOk : moppa::kExitConfig;
    }

    try {
        if (properties->parsed()) {
            const auto cfg = o.config.empty() ? moppa::ExperimentConfig{} : load(o);
            const double eta = o.eta_override ? *o.eta_override : cfg.model.eta;
            const auto dir = out_dir(o, cfg);
            const int rc = moppa::cmd_properties(dir, eta);
            std::cout << "wrote " << (dir / "properties.csv").string() << (rc == 0 ? "" : " (failures)") << '\n';
            return rc;
        }
        const auto cfg = load(o);
        const auto dir = out_dir(o, cfg);
        if (gradcheck->parsed()) {
            const int rc = moppa::cmd_gradcheck(cfg, dir);
            std::cout << "wrote " << (dir / "gradcheck.csv").string() << (rc == 0 ? "" : " (failures)") << '\n';
            return rc;
        }
        if (regress->parsed()) {
            const int rc = moppa::cmd_regress(cfg, dir, threads(o));
            std::cout << "wrote " << (dir / "regress.csv").string() << '\n';
            return rc;
        }
        if (ablate->parsed()) {
            const int rc = moppa::cmd_ablate(cfg, dir, threads(o));
            std::cout << "wrote " << (dir / "ablate.csv").string() << '\n';
            return rc;
        }
        if (dump->parsed()) {
            moppa::Checkpoint ck;
            try {
                ck = o.checkpoint.empty() ? moppa::initial_checkpoint(cfg) : moppa::load_checkpoint(o.checkpoint);
            } catch (const moppa::CheckpointError& e) {
                std::cerr << "error: " << e.what() << '\n';
                return moppa::kExitConfig;
            }
            const int rc = moppa::cmd_dump_filters(ck, dir);
            std::cout << "wrote " << (dir / "filters.csv").string() << '\n';
            return rc;
        }
    } catch (const moppa::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return moppa::kExitConfig;
    } catch (const moppa::CheckpointError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return moppa::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return moppa::kExitCheckFailed;
    }
    return moppa::kExitConfig;
}
