// pathflow command-line runner: generate-data, train, evaluate, variance-lab,
// plot-data. Thread count can be overridden with PATHFLOW_THREADS.
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pathflow/experiment.hpp"
#include "pathflow/io.hpp"

namespace px = pathflow::experiment;

int main(int argc, char** argv) {
    CLI::App app{"pathflow: Boltzmann-generator training engine"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, dataset_path, run_dir;
    std::string out_dir = ".";
    std::string out_csv = "variance_lab.csv";
    std::vector<std::string> overrides;
    pathflow::variancelab::ToyConfig toy;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config (JSON)")->required();
        sub->add_option("--set", overrides, "dotted.key=value config overrides");
    };

    CLI::App* gen = app.add_subcommand("generate-data", "sample train/test datasets with forces");
    add_config(gen);

    CLI::App* train = app.add_subcommand("train", "run the configured training stages");
    add_config(train);

    CLI::App* eval = app.add_subcommand("evaluate", "metrics report for a checkpoint");
    add_config(eval);
    eval->add_option("--checkpoint", checkpoint_path, "parameter checkpoint")->required();
    eval->add_option("--dataset", dataset_path, "dataset file with target samples")->required();
    eval->add_option("--out", out_dir, "output directory for metrics + raw weights");

    CLI::App* vlab = app.add_subcommand("variance-lab", "toy gradient-variance study");
    vlab->add_option("--n", toy.n, "batch size");
    vlab->add_option("--d", toy.d, "dimension");
    vlab->add_option("--trials", toy.trials, "number of independent trials");
    vlab->add_option("--theta", toy.theta, "toy parameter value");
    vlab->add_option("--seed", toy.seed, "rng seed");
    vlab->add_option("--out", out_csv, "output CSV path");

    CLI::App* plot = app.add_subcommand("plot-data", "export tidy CSVs from a run directory");
    plot->add_option("--run-dir", run_dir, "completed run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            px::cmd_generate_data(px::load_config(config_path, overrides));
        } else if (train->parsed()) {
            px::cmd_train(px::load_config(config_path, overrides));
        } else if (eval->parsed()) {
            auto report = px::cmd_evaluate(checkpoint_path, dataset_path,
                                           px::load_config(config_path, overrides), out_dir);
            std::cout << report.dump(2) << '\n';
        } else if (vlab->parsed()) {
            px::cmd_variance_lab(toy, out_csv);
        } else if (plot->parsed()) {
            px::cmd_plot_data(run_dir);
        }
    } catch (const px::CliError& e) {
        std::cerr << "error[" << e.code() << "]: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
