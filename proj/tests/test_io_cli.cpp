#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pathflow/experiment.hpp"
#include "pathflow/io.hpp"
#include "pathflow/metrics.hpp"

using namespace pathflow;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("pathflow_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

json base_config(const fs::path& out) {
    return json{
        {"seed", 3},
        {"output_dir", out.string()},
        {"target", {{"kind", "gmm2d"}, {"seed", 2}}},
        {"field", {{"hidden_widths", {16, 16}}, {"activation", "tanh"}}},
        {"integrator", {{"n_steps", 10}, {"divergence", "exact"}}},
        {"data", {{"n_train", 256}, {"n_test", 128}, {"sampler", "exact"}}},
        {"eval", {{"ess_q_samples", 128}, {"nll_samples", 64}, {"traj_samples", 32}}},
        {"stages",
         {{{"stage", "fm_pretrain"}, {"loss", "cfm_standard"}, {"epochs", 4}, {"batch_size", 64},
           {"eval_every", 4}}}}};
}

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

}  // namespace

TEST_CASE("checkpoint round trip is byte exact") {
    fs::path dir = fresh_dir("ckpt");
    FieldParams p = init_params({3, {7, 5}, Activation::elu}, 99);
    p.version = 12;
    io::save_checkpoint(dir / "a.ckpt", p);
    FieldParams q = io::load_checkpoint(dir / "a.ckpt");
    CHECK(q.arch == p.arch);
    CHECK(q.values == p.values);
    CHECK(q.version == 12);
    io::save_checkpoint(dir / "b.ckpt", q);
    CHECK(io::file_checksum(dir / "a.ckpt") == io::file_checksum(dir / "b.ckpt"));
}

TEST_CASE("dataset and optimizer round trips") {
    fs::path dir = fresh_dir("ds");
    Dataset ds;
    ds.samples = SampleBatch(5, 3);
    ds.forces = SampleBatch(5, 3);
    Rng rng(1);
    for (auto& v : ds.samples.data) v = rng.normal();
    for (auto& v : ds.forces->data) v = rng.normal();
    ds.source = {{"sampler", "exact"}, {"note", "test"}};
    io::save_dataset(dir / "x.ds", ds);
    Dataset back = io::load_dataset(dir / "x.ds");
    CHECK(back.samples.data == ds.samples.data);
    REQUIRE(back.forces.has_value());
    CHECK(back.forces->data == ds.forces->data);
    CHECK(back.source == ds.source);

    train::OptimizerState opt = train::make_optimizer_state(4);
    opt.m = {1.0, 2.0, 3.0, 4.0};
    opt.v = {0.1, 0.2, 0.3, 0.4};
    opt.step = 17;
    io::save_optimizer(dir / "x.opt", opt);
    train::OptimizerState o2 = io::load_optimizer(dir / "x.opt");
    CHECK(o2.m == opt.m);
    CHECK(o2.v == opt.v);
    CHECK(o2.step == 17);

    // arch mismatch detected on load
    CHECK_THROWS(io::load_checkpoint(dir / "x.ds"));
}

TEST_CASE("config overrides on dotted keys") {
    json cfg = base_config("/tmp/unused");
    experiment::apply_override(cfg, "seed=42");
    CHECK(cfg["seed"] == 42);
    experiment::apply_override(cfg, "data.n_train=100");
    CHECK(cfg["data"]["n_train"] == 100);
    experiment::apply_override(cfg, "stages.0.lr=0.005");
    CHECK(cfg["stages"][0]["lr"] == 0.005);
    experiment::apply_override(cfg, "target.kind=standard_normal");
    CHECK(cfg["target"]["kind"] == "standard_normal");
    experiment::apply_override(cfg, "new.key=[1,2]");
    CHECK(cfg["new"]["key"] == json::array({1, 2}));
    CHECK_THROWS_AS(experiment::apply_override(cfg, "no-equals"), experiment::CliError);
    CHECK_THROWS_AS(experiment::apply_override(cfg, "stages.9.lr=1"), experiment::CliError);
}

TEST_CASE("config parse failures carry machine-readable codes") {
    json cfg = base_config("/tmp/unused");
    cfg.erase("stages");
    CHECK_THROWS_WITH_AS(static_cast<void>(experiment::parse_config(cfg)),
                         doctest::Contains("stages"), experiment::CliError);
    json cfg2 = base_config("/tmp/unused");
    cfg2["data"]["sampler"] = "metropolis";
    CHECK_THROWS_AS(static_cast<void>(experiment::parse_config(cfg2)), experiment::CliError);
    json cfg3 = base_config("/tmp/unused");
    cfg3["target"] = {{"kind", "no_such_model"}};
    CHECK_THROWS_AS(static_cast<void>(experiment::parse_config(cfg3)), experiment::CliError);
}

TEST_CASE("generate-data is deterministic per seed and labels forces") {
    fs::path dir = fresh_dir("gen");
    experiment::ExperimentConfig cfg = experiment::parse_config(base_config(dir));
    experiment::cmd_generate_data(cfg);
    CHECK(fs::exists(dir / "train.ds"));
    CHECK(fs::exists(dir / "test.ds"));
    CHECK(fs::exists(dir / "manifest.json"));
    Dataset tr = io::load_dataset(dir / "train.ds");
    CHECK(tr.samples.n == 256);
    REQUIRE(tr.forces.has_value());
    Dataset te = io::load_dataset(dir / "test.ds");
    CHECK(te.samples.n == 128);
    std::string sum1 = io::file_checksum(dir / "train.ds");

    fs::path dir2 = fresh_dir("gen2");
    json j2 = base_config(dir2);
    experiment::cmd_generate_data(experiment::parse_config(j2));
    CHECK(io::file_checksum(dir2 / "train.ds") == sum1);

    // force labels match the target model
    auto target = model_from_descriptor(tr.source.at("model"));
    for (std::size_t i = 0; i < 5; ++i) {
        Vec f = target->force_v(Vec(tr.samples.row(i), tr.samples.row(i) + 2));
        CHECK(f[0] == doctest::Approx(tr.forces->row(i)[0]).epsilon(1e-12));
    }
}

TEST_CASE("the output directory lock is exclusive") {
    fs::path dir = fresh_dir("lock");
    {
        experiment::RunLock lock(dir);
        CHECK_THROWS_AS(static_cast<void>(experiment::RunLock{dir}), experiment::CliError);
    }
    experiment::RunLock again(dir);  // released on destruction
}

TEST_CASE("zero-epoch training writes only the initial checkpoint") {
    fs::path dir = fresh_dir("train0");
    json j = base_config(dir);
    j["stages"][0]["epochs"] = 0;
    experiment::ExperimentConfig cfg = experiment::parse_config(j);
    experiment::cmd_generate_data(cfg);
    experiment::cmd_train(cfg);
    CHECK(fs::exists(dir / "checkpoint_init.ckpt"));
    CHECK_FALSE(fs::exists(dir / "checkpoint_stage0_fm_pretrain.ckpt"));
    CHECK(count_lines(dir / "training_log.csv") == 1);  // header only
    experiment::cmd_plot_data(dir);
    CHECK(count_lines(dir / "learning_curves.csv") == 1);
    CHECK(count_lines(dir / "weight_hist.csv") == 1);
    CHECK(count_lines(dir / "energy_hist.csv") == 1);
}

TEST_CASE("full pipeline: train, evaluate, plot-data") {
    fs::path dir = fresh_dir("full");
    experiment::ExperimentConfig cfg = experiment::parse_config(base_config(dir));
    experiment::cmd_generate_data(cfg);
    experiment::cmd_train(cfg);
    CHECK(fs::exists(dir / "checkpoint_stage0_fm_pretrain.ckpt"));
    CHECK(fs::exists(dir / "metrics_final.json"));
    std::size_t eval_rows = count_lines(dir / "training_log.csv") - 1;
    CHECK(eval_rows >= 1);

    json r1 = experiment::cmd_evaluate(dir / "checkpoint_stage0_fm_pretrain.ckpt",
                                       dir / "test.ds", cfg, dir);
    json r2 = experiment::cmd_evaluate(dir / "checkpoint_stage0_fm_pretrain.ckpt",
                                       dir / "test.ds", cfg, dir);
    CHECK(r1 == r2);  // same seed, identical report
    CHECK(r1.at("ess_q").get<double>() > 0.0);
    CHECK(r1.at("nll").is_number());

    // the reported ess_q is recomputable from the persisted raw log-weights
    metrics::WeightSet w;
    w.origin = metrics::WeightOrigin::model_samples;
    std::ifstream in(dir / "weights_q.csv");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        w.log_w.push_back(std::stod(line.substr(0, line.find(','))));
    }
    CHECK(w.log_w.size() == 128);
    CHECK(metrics::ess_q(w) == doctest::Approx(r1.at("ess_q").get<double>()).epsilon(1e-9));

    experiment::cmd_plot_data(dir);
    CHECK(count_lines(dir / "learning_curves.csv") - 1 == eval_rows);
    CHECK(count_lines(dir / "traj_length.csv") - 1 == eval_rows);
    // histogram counts integrate to the sample count
    long total = 0;
    std::ifstream h(dir / "energy_hist.csv");
    std::getline(h, line);
    while (std::getline(h, line)) {
        if (line.empty()) continue;
        total += std::stol(line.substr(line.rfind(',') + 1));
    }
    CHECK(total == 128);

    // manifest lists files with valid checksums
    json manifest = io::read_json(dir / "manifest.json");
    CHECK(manifest.at("engine_version") == io::kEngineVersion);
    for (const auto& f : manifest.at("files")) {
        fs::path fp = dir / f.at("name").get<std::string>();
        CHECK(fs::exists(fp));
        CHECK(io::file_checksum(fp) == f.at("checksum").get<std::string>());
    }

    // plot-data refuses when a manifest-listed file is missing
    fs::remove(dir / "checkpoint_init.ckpt");
    CHECK_THROWS_AS(experiment::cmd_plot_data(dir), experiment::CliError);
}

TEST_CASE("evaluate: zero field on base == target is a perfect model") {
    fs::path dir = fresh_dir("perfect");
    json j = base_config(dir);
    j["target"] = {{"kind", "standard_normal"}, {"dim", 2}};
    j["eval"]["ess_q_samples"] = 10000;
    experiment::ExperimentConfig cfg = experiment::parse_config(j);
    experiment::cmd_generate_data(cfg);
    FieldParams zero;
    zero.arch = cfg.arch;
    zero.values.assign(parameter_count(cfg.arch), 0.0);
    io::save_checkpoint(dir / "zero.ckpt", zero);
    json r = experiment::cmd_evaluate(dir / "zero.ckpt", dir / "test.ds", cfg, dir);
    CHECK(r.at("ess_q").get<double>() >= 0.99);
    CHECK(std::fabs(r.at("fwd_kl").get<double>()) < 1e-9);

    // arch mismatch refuses with both descriptors in the message
    json j2 = base_config(fresh_dir("mismatch"));
    experiment::ExperimentConfig gmm_cfg = experiment::parse_config(j2);
    FieldParams wrong;
    wrong.arch = {5, {4}, Activation::tanh_act};
    wrong.values.assign(parameter_count(wrong.arch), 0.0);
    io::save_checkpoint(dir / "wrong.ckpt", wrong);
    CHECK_THROWS_WITH_AS(
        static_cast<void>(experiment::cmd_evaluate(dir / "wrong.ckpt", dir / "test.ds", cfg, dir)),
        doctest::Contains("arch"), experiment::CliError);
}

TEST_CASE("variance-lab csv") {
    fs::path dir = fresh_dir("vlab");
    variancelab::ToyConfig toy;
    toy.trials = 500;
    toy.seed = 9;
    experiment::cmd_variance_lab(toy, dir / "out.csv");
    std::ifstream in(dir / "out.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "estimator,N,D,trials,mean,var,closed_form,rel_err");
    CHECK(count_lines(dir / "out.csv") == 4);  // header + fm + ml + pg
}
