#include "pathflow/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "pathflow/io.hpp"
#include "pathflow/metrics.hpp"

namespace pathflow::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string iso_now() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

bool is_index(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

std::ofstream open_text(const fs::path& p) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw CliError("io", "cannot open for writing: " + p.string());
    return out;
}

constexpr const char* kLogHeader =
    "stage,step,wall_seconds,loss,fwd_kl,nll,ess_q,ess_p,traj_len,grad_norm,cfm_mse";

std::string csv_num(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string log_row_csv(const train::TrainLogRow& r) {
    std::ostringstream os;
    os << r.stage << ',' << r.step << ',' << csv_num(r.wall_seconds) << ',' << csv_num(r.loss)
       << ',' << csv_num(r.fwd_kl) << ',' << csv_num(r.nll) << ',' << csv_num(r.ess_q) << ','
       << csv_num(r.ess_p) << ',' << csv_num(r.traj_len) << ',' << csv_num(r.grad_norm) << ','
       << csv_num(r.cfm_mse);
    return os.str();
}

}  // namespace

void apply_override(json& config, const std::string& spec) {
    auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
        throw CliError("bad-override", "override must look like dotted.key=value: " + spec);
    std::string key = spec.substr(0, eq);
    std::string raw = spec.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // unquoted strings

    json* node = &config;
    auto parts = split(key, '.');
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const std::string& part = parts[i];
        bool last = i + 1 == parts.size();
        if (node->is_array() || (is_index(part) && !node->is_object())) {
            if (!node->is_array())
                throw CliError("bad-override", "cannot index non-array at '" + part + "' in " + key);
            std::size_t idx = std::stoul(part);
            if (idx >= node->size())
                throw CliError("bad-override", "array index out of range at '" + part + "' in " + key);
            node = &(*node)[idx];
        } else {
            if (!node->is_object() && !node->is_null())
                throw CliError("bad-override", "cannot descend into scalar at '" + part + "' in " + key);
            node = &(*node)[part];
        }
        if (last) *node = value;
    }
}

ExperimentConfig parse_config(const json& j) {
    ExperimentConfig cfg;
    cfg.raw = j;
    try {
        cfg.seed = j.value("seed", 0ull);
        if (!j.contains("output_dir"))
            throw CliError("config-parse", "missing required key 'output_dir'");
        cfg.output_dir = j.at("output_dir").get<std::string>();
        if (!j.contains("target"))
            throw CliError("config-parse", "missing required key 'target'");
        cfg.target_desc = j.at("target");
        // resolve the target now so seeded descriptors fail fast
        auto target = model_from_descriptor(cfg.target_desc);

        const json& f = j.value("field", json::object());
        cfg.arch.input_dim = target->dim();
        cfg.arch.hidden_widths = f.value("hidden_widths", std::vector<std::size_t>{64, 64});
        cfg.arch.activation = activation_from_string(f.value("activation", std::string("tanh")));
        validate_arch(cfg.arch);

        const json& it = j.value("integrator", json::object());
        cfg.integrator.n_steps = it.value("n_steps", 15);
        std::string div = it.value("divergence", std::string("auto"));
        if (div == "auto")
            cfg.integrator.divergence_method = train::default_divergence_for_dim(target->dim());
        else if (div == "exact")
            cfg.integrator.divergence_method = DivergenceMethod::exact;
        else if (div == "hutchinson")
            cfg.integrator.divergence_method = DivergenceMethod::hutchinson;
        else
            throw CliError("config-parse", "integrator.divergence must be exact|hutchinson|auto");
        cfg.integrator.probe_seed = cfg.seed ^ 0x9e3779b97f4a7c15ull;

        const json& d = j.value("data", json::object());
        cfg.n_train = d.value("n_train", cfg.n_train);
        cfg.n_test = d.value("n_test", cfg.n_test);
        cfg.data_sampler = d.value("sampler", cfg.data_sampler);
        if (cfg.data_sampler != "exact" && cfg.data_sampler != "mala")
            throw CliError("config-parse", "data.sampler must be exact|mala");
        const json& m = d.value("mala", json::object());
        cfg.mala.burn_in = m.value("burn_in", cfg.mala.burn_in);
        cfg.mala.thinning = m.value("thinning", cfg.mala.thinning);
        cfg.mala.step_size = m.value("step_size", cfg.mala.step_size);

        const json& e = j.value("eval", json::object());
        cfg.ess_q_samples = e.value("ess_q_samples", cfg.ess_q_samples);
        cfg.nll_samples = e.value("nll_samples", cfg.nll_samples);
        cfg.traj_samples = e.value("traj_samples", cfg.traj_samples);
        cfg.eval_seed = e.value("seed", cfg.eval_seed);

        if (!j.contains("stages") || !j.at("stages").is_array() || j.at("stages").empty())
            throw CliError("config-parse", "'stages' must be a non-empty array");
        std::size_t si = 0;
        for (const json& s : j.at("stages")) {
            StageConfig sc;
            sc.stage = train::stage_from_string(s.at("stage").get<std::string>());
            train::TrainConfig& t = sc.train;
            bool is_fm = sc.stage == train::Stage::fm_pretrain || sc.stage == train::Stage::fm_finetune;
            t.loss = train::loss_from_string(s.value(
                "loss", is_fm ? std::string("cfm_ot")
                              : sc.stage == train::Stage::pg_finetune ? std::string("pg")
                                                                      : std::string("ml")));
            t.batch_size = s.value("batch_size", t.batch_size);
            t.lr = s.value("lr", t.lr);
            t.sigma = s.value("sigma", t.sigma);
            t.epochs = s.value("epochs", t.epochs);
            if (s.contains("grad_clip_norm") && !s.at("grad_clip_norm").is_null())
                t.grad_clip_norm = s.at("grad_clip_norm").get<double>();
            t.accumulation_steps = s.value("accumulation_steps", t.accumulation_steps);
            t.seed = cfg.seed * 1000003ull + si;
            t.integrator = cfg.integrator;
            t.eval_every = s.value("eval_every", t.eval_every);
            if (s.contains("wall_seconds") && !s.at("wall_seconds").is_null())
                t.wall_seconds = s.at("wall_seconds").get<double>();
            t.eval_every_seconds = s.value("eval_every_seconds", t.eval_every_seconds);
            cfg.stages.push_back(std::move(sc));
            ++si;
        }
    } catch (const CliError&) {
        throw;
    } catch (const json::exception& ex) {
        throw CliError("config-parse", ex.what());
    } catch (const std::exception& ex) {
        throw CliError("config-parse", ex.what());
    }
    return cfg;
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw CliError("config-missing", "cannot open config file: " + path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        // reparse for the diagnostic (byte offset + context)
        in.clear();
        in.seekg(0);
        try {
            j = json::parse(in);
        } catch (const json::parse_error& ex) {
            throw CliError("config-parse", path.string() + ": " + ex.what());
        }
    }
    for (const auto& ov : overrides) apply_override(j, ov);
    return parse_config(j);
}

RunLock::RunLock(const fs::path& dir) {
    fs::create_directories(dir);
    file_ = dir / ".lock";
    std::FILE* f = std::fopen(file_.string().c_str(), "wx");
    if (!f) {
        file_.clear();
        throw CliError("locked", "output directory is in use (remove " + (dir / ".lock").string() +
                                     " if stale)");
    }
    std::fputs(iso_now().c_str(), f);
    std::fclose(f);
}

RunLock::~RunLock() {
    if (!file_.empty()) {
        std::error_code ec;
        fs::remove(file_, ec);
    }
}

Manifest::Manifest(const fs::path& dir, std::string command, json config_snapshot) : dir_(dir) {
    body_ = {{"command", std::move(command)},
             {"engine_version", io::kEngineVersion},
             {"config", std::move(config_snapshot)},
             {"started_at", iso_now()}};
}

void Manifest::add(const fs::path& file) { files_.push_back(file.filename().string()); }

void Manifest::write() {
    json files = json::array();
    for (const auto& f : files_)
        files.push_back({{"name", f}, {"checksum", io::file_checksum(dir_ / f)}});
    body_["files"] = files;
    body_["finished_at"] = iso_now();
    io::write_json(dir_ / "manifest.json", body_);
}

namespace {

Dataset make_dataset(const ExperimentConfig& cfg, const EnergyModel& target, std::size_t n,
                     std::uint64_t seed) {
    if (cfg.data_sampler == "exact") {
        if (!target.has_exact_sampler())
            throw CliError("config-parse",
                           "data.sampler=exact but target '" + target.kind() + "' has no sampler");
        Dataset ds;
        ds.samples = sample_exact(target, n, seed);
        ds.forces = SampleBatch(n, target.dim());
        for (std::size_t i = 0; i < n; ++i) target.force(ds.samples.row(i), ds.forces->row(i));
        ds.source = {{"sampler", "exact"}, {"model", target.descriptor()}, {"n", n}, {"seed", seed}};
        return ds;
    }
    MalaSettings ms = cfg.mala;
    ms.n = n;
    ms.seed = seed;
    return mcmc_sample(target, ms);
}

}  // namespace

void cmd_generate_data(const ExperimentConfig& cfg) {
    RunLock lock(cfg.output_dir);
    Manifest manifest(cfg.output_dir, "generate-data", cfg.raw);
    auto target = model_from_descriptor(cfg.target_desc);

    Dataset train_ds = make_dataset(cfg, *target, cfg.n_train, cfg.seed * 2654435761ull + 1);
    Dataset test_ds = make_dataset(cfg, *target, cfg.n_test, cfg.seed * 2654435761ull + 2);
    io::save_dataset(cfg.output_dir / "train.ds", train_ds);
    io::save_dataset(cfg.output_dir / "test.ds", test_ds);
    manifest.add("train.ds");
    manifest.add("test.ds");
    manifest.write();
}

namespace {

json metrics_from_row(const train::TrainLogRow& r) {
    json j{{"stage", r.stage}, {"step", r.step}};
    auto put = [&](const char* k, double v) { j[k] = std::isnan(v) ? json() : json(v); };
    put("nll", r.nll);
    put("fwd_kl", r.fwd_kl);
    put("ess_q", r.ess_q);
    put("ess_p", r.ess_p);
    put("traj_len_mean", r.traj_len);
    put("cfm_mse", r.cfm_mse);
    return j;
}

}  // namespace

void cmd_train(const ExperimentConfig& cfg) {
    RunLock lock(cfg.output_dir);
    Manifest manifest(cfg.output_dir, "train", cfg.raw);

    fs::path train_path = cfg.output_dir / "train.ds";
    fs::path test_path = cfg.output_dir / "test.ds";
    if (!fs::exists(train_path) || !fs::exists(test_path))
        throw CliError("missing-dataset",
                       "expected train.ds and test.ds in " + cfg.output_dir.string() +
                           " (run generate-data first)");
    Dataset train_ds = io::load_dataset(train_path);
    Dataset test_ds = io::load_dataset(test_path);

    // reconstruct the exact target the data came from
    json tdesc = train_ds.source.contains("model") ? train_ds.source.at("model") : cfg.target_desc;
    auto target = model_from_descriptor(tdesc);
    auto base = make_standard_normal(target->dim());

    train::EvalContext eval;
    eval.base = base;
    eval.target = target;
    eval.test_set = test_ds.samples;
    eval.ess_q_samples = cfg.ess_q_samples;
    eval.nll_samples = cfg.nll_samples;
    eval.traj_samples = cfg.traj_samples;
    eval.eval_seed = cfg.eval_seed;

    FieldParams params = init_params(cfg.arch, cfg.seed);
    train::OptimizerState opt = train::make_optimizer_state(params.values.size());
    io::save_checkpoint(cfg.output_dir / "checkpoint_init.ckpt", params);
    manifest.add("checkpoint_init.ckpt");

    auto log_out = open_text(cfg.output_dir / "training_log.csv");
    log_out << kLogHeader << '\n';
    manifest.add("training_log.csv");

    std::optional<train::TrainLogRow> last_row;
    bool diverged = false;
    std::string divergence_note;
    for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
        const StageConfig& sc = cfg.stages[si];
        std::int64_t version_before = params.version;
        train::TrainResult res = train::run_training(sc.stage, sc.train, train_ds, eval,
                                                     std::move(params), std::move(opt));
        params = std::move(res.params);
        opt = std::move(res.opt);
        for (const auto& row : res.log) {
            log_out << log_row_csv(row) << '\n';
            last_row = row;
        }
        log_out.flush();
        if (params.version != version_before) {
            std::string stem = "checkpoint_stage" + std::to_string(si) + "_" + to_string(sc.stage);
            io::save_checkpoint(cfg.output_dir / (stem + ".ckpt"), params);
            io::save_optimizer(cfg.output_dir / (stem + ".opt"), opt);
            manifest.add(stem + ".ckpt");
            manifest.add(stem + ".opt");
        }
        if (res.diverged) {
            diverged = true;
            divergence_note = res.divergence_note;
            io::write_json(cfg.output_dir / "divergence.json",
                           {{"stage", to_string(sc.stage)},
                            {"stage_index", si},
                            {"detail", res.divergence_note}});
            manifest.add("divergence.json");
            break;
        }
    }

    // final metrics come from the last in-budget evaluation row
    if (last_row) {
        io::write_json(cfg.output_dir / "metrics_final.json", metrics_from_row(*last_row));
        manifest.add("metrics_final.json");
    }
    manifest.write();
    if (diverged)
        throw CliError("diverged", "training aborted, last good checkpoint retained: " +
                                       divergence_note);
}

nlohmann::json cmd_evaluate(const fs::path& checkpoint, const fs::path& dataset_path,
                            const ExperimentConfig& cfg, const fs::path& out_dir) {
    FieldParams params = io::load_checkpoint(checkpoint);
    Dataset ds = io::load_dataset(dataset_path);
    json tdesc = ds.source.contains("model") ? ds.source.at("model") : cfg.target_desc;
    auto target = model_from_descriptor(tdesc);
    if (params.arch.input_dim != target->dim())
        throw CliError("arch-mismatch",
                       "checkpoint arch " + io::arch_to_json(params.arch).dump() +
                           " vs target " + tdesc.dump());
    auto base = make_standard_normal(target->dim());
    fs::create_directories(out_dir);

    cnf::IntegratorConfig mcfg = cfg.integrator;
    mcfg.n_steps = 30;
    mcfg.divergence_method = DivergenceMethod::exact;

    json report;
    report["checkpoint"] = checkpoint.filename().string();
    report["dataset"] = dataset_path.filename().string();

    // target-sample diagnostics on the dataset
    std::size_t n_p = std::min(cfg.nll_samples, ds.samples.n);
    if (n_p > 0) {
        SampleBatch sub(n_p, ds.samples.dim);
        std::copy(ds.samples.data.begin(), ds.samples.data.begin() + n_p * ds.samples.dim,
                  sub.data.begin());
        Vec lq = cnf::log_prob(params, *base, sub, mcfg);
        double mean_lq = 0.0;
        for (double v : lq) mean_lq += v;
        mean_lq /= static_cast<double>(n_p);
        report["nll"] = -mean_lq;
        report["n_nll"] = n_p;
        metrics::WeightSet wp;
        wp.origin = metrics::WeightOrigin::target_samples;
        wp.log_w.resize(n_p);
        auto wfile = open_text(out_dir / "weights_p.csv");
        wfile << "log_w,energy,log_q\n";
        for (std::size_t i = 0; i < n_p; ++i) {
            double en = target->energy(sub.row(i));
            wp.log_w[i] = -en - lq[i];
            wfile << csv_num(wp.log_w[i]) << ',' << csv_num(en) << ',' << csv_num(lq[i]) << '\n';
        }
        report["ess_p"] = metrics::ess_p(wp);
        if (target->has_exact_log_prob()) {
            double s = 0.0;
            for (std::size_t i = 0; i < n_p; ++i) s += target->log_prob(sub.row(i));
            report["fwd_kl"] = s / static_cast<double>(n_p) - mean_lq;
        } else {
            report["fwd_kl"] = nullptr;
        }
    }

    // model-sample diagnostics on fresh draws
    if (cfg.ess_q_samples > 0) {
        auto [xs, lqs] = cnf::sample(params, *base, cfg.ess_q_samples, cfg.eval_seed, mcfg);
        metrics::WeightSet wq;
        wq.origin = metrics::WeightOrigin::model_samples;
        wq.log_w.resize(xs.n);
        auto wfile = open_text(out_dir / "weights_q.csv");
        wfile << "log_w,energy,log_q\n";
        for (std::size_t i = 0; i < xs.n; ++i) {
            double en;
            try {
                en = target->energy(xs.row(i));
            } catch (const std::domain_error&) {
                en = 1e300;
            }
            wq.log_w[i] = -en - lqs[i];
            wfile << csv_num(wq.log_w[i]) << ',' << csv_num(en) << ',' << csv_num(lqs[i]) << '\n';
        }
        report["ess_q"] = metrics::ess_q(wq);
        report["log_z_hat"] = metrics::log_z_hat(wq);
        report["log_z_err"] = metrics::log_z_jackknife_err(wq);
        report["n_ess_q"] = xs.n;
    }

    if (cfg.traj_samples > 0) {
        SampleBatch tx = sample_exact(*base, cfg.traj_samples, cfg.eval_seed + 1);
        cnf::IntegratorConfig tcfg = cfg.integrator;
        tcfg.direction = cnf::Direction::forward;
        report["traj_len_mean"] = cnf::trajectory_length(params, tx, tcfg).second;
        report["n_traj"] = cfg.traj_samples;
    }

    io::write_json(out_dir / "metrics.json", report);
    return report;
}

namespace {

// column values of one CSV column (by header name); empty cells skipped
Vec csv_column(const fs::path& file, const std::string& name) {
    std::ifstream in(file);
    if (!in) throw CliError("io", "cannot open " + file.string());
    std::string header;
    std::getline(in, header);
    auto cols = split(header, ',');
    std::size_t idx = cols.size();
    for (std::size_t i = 0; i < cols.size(); ++i)
        if (cols[i] == name) idx = i;
    if (idx == cols.size())
        throw CliError("io", "column '" + name + "' not found in " + file.string());
    Vec out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split(line, ',');
        if (idx < cells.size() && !cells[idx].empty()) out.push_back(std::stod(cells[idx]));
    }
    return out;
}

void write_histogram(const fs::path& file, const Vec& values, int n_bins) {
    auto out = open_text(file);
    out << "bin_lo,bin_hi,count\n";
    if (values.empty()) return;
    double lo = *std::min_element(values.begin(), values.end());
    double hi = *std::max_element(values.begin(), values.end());
    if (hi <= lo) hi = lo + 1e-12;
    std::vector<long> counts(n_bins, 0);
    for (double v : values) {
        int b = static_cast<int>((v - lo) / (hi - lo) * n_bins);
        counts[std::clamp(b, 0, n_bins - 1)] += 1;
    }
    double w = (hi - lo) / n_bins;
    for (int b = 0; b < n_bins; ++b)
        out << csv_num(lo + b * w) << ',' << csv_num(lo + (b + 1) * w) << ',' << counts[b] << '\n';
}

}  // namespace

void cmd_plot_data(const fs::path& run_dir) {
    fs::path manifest_path = run_dir / "manifest.json";
    if (!fs::exists(manifest_path))
        throw CliError("missing-manifest", "no manifest.json in " + run_dir.string());
    json manifest = io::read_json(manifest_path);
    std::vector<std::string> missing;
    for (const auto& f : manifest.value("files", json::array())) {
        std::string name = f.at("name").get<std::string>();
        if (!fs::exists(run_dir / name)) missing.push_back(name);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw CliError("missing-files", "files listed in manifest are absent: " + list);
    }

    // learning curves: one row per eval event, straight from the training log
    fs::path log_path = run_dir / "training_log.csv";
    {
        auto out = open_text(run_dir / "learning_curves.csv");
        auto traj = open_text(run_dir / "traj_length.csv");
        out << kLogHeader << '\n';
        traj << "stage,step,traj_len\n";
        if (fs::exists(log_path)) {
            std::ifstream in(log_path);
            std::string line;
            std::getline(in, line);  // header
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                out << line << '\n';
                auto cells = split(line, ',');
                if (cells.size() >= 9)
                    traj << cells[0] << ',' << cells[1] << ',' << cells[8] << '\n';
            }
        }
    }

    fs::path wq = run_dir / "weights_q.csv";
    write_histogram(run_dir / "weight_hist.csv",
                    fs::exists(wq) ? csv_column(wq, "log_w") : Vec{}, 50);
    Vec energies;
    if (fs::exists(wq)) {
        for (double e : csv_column(wq, "energy"))
            if (e < 1e299) energies.push_back(e);
    }
    write_histogram(run_dir / "energy_hist.csv", energies, 50);
}

void cmd_variance_lab(const variancelab::ToyConfig& base_cfg, const fs::path& out_csv) {
    fs::create_directories(out_csv.parent_path().empty() ? "." : out_csv.parent_path());
    auto out = open_text(out_csv);
    out << "estimator,N,D,trials,mean,var,closed_form,rel_err\n";
    double nd = static_cast<double>(base_cfg.n * base_cfg.d);
    auto emit = [&](const char* name, const variancelab::ToyStats& s, double closed) {
        double rel = closed > 0.0 ? std::fabs(s.var - closed) / closed
                                  : std::numeric_limits<double>::quiet_NaN();
        out << name << ',' << base_cfg.n << ',' << base_cfg.d << ',' << base_cfg.trials << ','
            << csv_num(s.mean) << ',' << csv_num(s.var) << ',' << csv_num(closed) << ','
            << csv_num(rel) << '\n';
    };
    emit("fm", variancelab::toy_fm_variance(base_cfg), 8.0 / nd);
    emit("ml", variancelab::toy_ml_variance(base_cfg),
         static_cast<double>(base_cfg.d) / static_cast<double>(base_cfg.n));
    // the PG trials integrate the full engine; keep the count tractable
    variancelab::ToyConfig pg_cfg = base_cfg;
    pg_cfg.trials = std::min<std::size_t>(base_cfg.trials, 200);
    emit("pg", variancelab::toy_pg_stats(pg_cfg),
         base_cfg.theta == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN());
}

}  // namespace pathflow::experiment
