#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "upo/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"uncertainty-weighted iterative preference optimization on a synthetic world"};
    app.require_subcommand(1);

    std::string config_path;
    std::string state_dir;
    int iters = 1;
    std::string variant;
    std::vector<std::string> strategies;
    std::vector<std::uint64_t> seeds;
    std::size_t sample_size = 0;
    double corruption = 0.3;

    auto* init = app.add_subcommand("init", "create a run directory and train the stage-0 models");
    init->add_option("--config", config_path, "experiment config JSON")->required();

    auto* iterate = app.add_subcommand("iterate", "run self-evolution iterations");
    iterate->add_option("--state", state_dir, "run directory")->required();
    iterate->add_option("--iters", iters, "number of iterations to run");

    auto* study = app.add_subcommand("noise-study", "compare sampling strategies by noise rate");
    study->add_option("--state", state_dir, "run directory")->required();
    study->add_option("--strategies", strategies, "subset of random,cb_rr,margin,uncertainty")
        ->delimiter(',');
    study->add_option("--seeds", seeds, "study seeds")->delimiter(',');
    study->add_option("--sample-size", sample_size, "pairs drawn per strategy");
    study->add_option("--corruption", corruption, "reward corruption fraction");

    auto* ablate = app.add_subcommand("ablate", "run one iteration of an ablation variant");
    ablate->add_option("--state", state_dir, "run directory")->required();
    ablate->add_option("--variant", variant, "no_rule|no_estimator|no_alpha|no_nll")->required();

    auto* plots = app.add_subcommand("export-plots", "emit long-format CSV of run metrics");
    plots->add_option("--state", state_dir, "run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (init->parsed()) upo::cmd_init(config_path);
        if (iterate->parsed()) upo::cmd_iterate(state_dir, iters);
        if (study->parsed())
            upo::cmd_noise_study(state_dir, strategies, sample_size, seeds, corruption);
        if (ablate->parsed()) upo::cmd_ablate(state_dir, variant);
        if (plots->parsed()) upo::cmd_export_plots(state_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
