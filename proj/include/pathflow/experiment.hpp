#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pathflow/cnf.hpp"
#include "pathflow/field.hpp"
#include "pathflow/targets.hpp"
#include "pathflow/train.hpp"
#include "pathflow/variancelab.hpp"

namespace pathflow::experiment {

// Every runner failure carries a short machine-parsable code; the CLI prints
// "error[<code>]: <detail>" and exits nonzero.
class CliError : public std::runtime_error {
public:
    CliError(std::string code, const std::string& detail)
        : std::runtime_error(detail), code_(std::move(code)) {}
    const std::string& code() const { return code_; }

private:
    std::string code_;
};

struct StageConfig {
    train::Stage stage = train::Stage::fm_pretrain;
    train::TrainConfig train;
};

// Parsed experiment config; `raw` keeps the post-override JSON snapshot for
// the manifest.
struct ExperimentConfig {
    nlohmann::json raw;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;
    nlohmann::json target_desc;
    FieldArch arch;
    cnf::IntegratorConfig integrator;

    std::size_t n_train = 2000;
    std::size_t n_test = 2048;
    std::string data_sampler = "exact";  // "exact" | "mala"
    MalaSettings mala;

    std::size_t ess_q_samples = 2048;
    std::size_t nll_samples = 512;
    std::size_t traj_samples = 256;
    std::uint64_t eval_seed = 1234;

    std::vector<StageConfig> stages;
};

// Applies one "dotted.key=value" override; value is parsed as JSON when it
// parses, else taken as a string. Array segments are numeric indices.
void apply_override(nlohmann::json& config, const std::string& spec);

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides);

// Exclusive lock on the output directory; throws CliError{"locked"} when the
// directory is already in use. Released on destruction.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path file_;
};

// Manifest accumulation: call add() for every produced file, then write().
class Manifest {
public:
    Manifest(const std::filesystem::path& dir, std::string command, nlohmann::json config_snapshot);
    void add(const std::filesystem::path& file);
    void write();
    const std::vector<std::string>& files() const { return files_; }

private:
    std::filesystem::path dir_;
    nlohmann::json body_;
    std::vector<std::string> files_;
};

void cmd_generate_data(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
nlohmann::json cmd_evaluate(const std::filesystem::path& checkpoint,
                            const std::filesystem::path& dataset_path,
                            const ExperimentConfig& cfg,
                            const std::filesystem::path& out_dir);
void cmd_plot_data(const std::filesystem::path& run_dir);
void cmd_variance_lab(const variancelab::ToyConfig& base_cfg, const std::filesystem::path& out_csv);

}  // namespace pathflow::experiment
