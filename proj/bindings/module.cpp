// Python bindings for the core operations: vector-field oracle, targets,
// flow transport, training gradients, metrics and the toy variance lab.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pathflow/cnf.hpp"
#include "pathflow/field.hpp"
#include "pathflow/metrics.hpp"
#include "pathflow/targets.hpp"
#include "pathflow/train.hpp"
#include "pathflow/variancelab.hpp"

namespace py = pybind11;
using namespace pathflow;

namespace {

SampleBatch batch_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw std::invalid_argument("expected a 2-d array (n, dim)");
    SampleBatch b(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    std::copy(a.data(), a.data() + b.data.size(), b.data.begin());
    return b;
}

py::array_t<double> array_from_batch(const SampleBatch& b) {
    py::array_t<double> a({b.n, b.dim});
    std::copy(b.data.begin(), b.data.end(), a.mutable_data());
    return a;
}

py::array_t<double> array_from_vec(const Vec& v) {
    py::array_t<double> a({static_cast<py::ssize_t>(v.size())},
                          {static_cast<py::ssize_t>(sizeof(double))});
    std::copy(v.begin(), v.end(), a.mutable_data());
    return a;
}

Vec vec_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 1) throw std::invalid_argument("expected a 1-d array");
    return Vec(a.data(), a.data() + a.shape(0));
}

DivergenceMethod divergence_from_string(const std::string& s) {
    if (s == "exact") return DivergenceMethod::exact;
    if (s == "hutchinson") return DivergenceMethod::hutchinson;
    throw std::invalid_argument("unknown divergence method: " + s);
}

cnf::IntegratorConfig make_integrator(int n_steps, const std::string& direction,
                                      const std::string& divergence, std::uint64_t probe_seed) {
    cnf::IntegratorConfig c;
    c.n_steps = n_steps;
    if (direction == "forward") c.direction = cnf::Direction::forward;
    else if (direction == "inverse") c.direction = cnf::Direction::inverse;
    else throw std::invalid_argument("direction must be 'forward' or 'inverse'");
    c.divergence_method = divergence_from_string(divergence);
    c.probe_seed = probe_seed;
    return c;
}

py::dict row_to_dict(const train::TrainLogRow& r) {
    py::dict d;
    d["stage"] = r.stage;
    d["step"] = r.step;
    d["wall_seconds"] = r.wall_seconds;
    d["loss"] = r.loss;
    d["fwd_kl"] = r.fwd_kl;
    d["nll"] = r.nll;
    d["ess_q"] = r.ess_q;
    d["ess_p"] = r.ess_p;
    d["traj_len"] = r.traj_len;
    d["grad_norm"] = r.grad_norm;
    d["cfm_mse"] = r.cfm_mse;
    return d;
}

}  // namespace

PYBIND11_MODULE(_pathflow, m) {
    m.doc() = "continuous normalizing flow engine: flow matching, path-gradient "
              "fine-tuning, importance-sampling metrics";

    py::register_exception<cnf::IntegrationDiverged>(m, "IntegrationDiverged");

    py::class_<FieldArch>(m, "FieldArch")
        .def(py::init([](std::size_t input_dim, std::vector<std::size_t> hidden,
                         const std::string& activation) {
                 FieldArch a;
                 a.input_dim = input_dim;
                 a.hidden_widths = std::move(hidden);
                 a.activation = activation_from_string(activation);
                 validate_arch(a);
                 return a;
             }),
             py::arg("input_dim"), py::arg("hidden_widths"), py::arg("activation") = "tanh")
        .def_readonly("input_dim", &FieldArch::input_dim)
        .def_readonly("hidden_widths", &FieldArch::hidden_widths)
        .def_property_readonly("activation",
                               [](const FieldArch& a) { return to_string(a.activation); })
        .def("__repr__", [](const FieldArch& a) {
            std::string s = "FieldArch(input_dim=" + std::to_string(a.input_dim) + ", hidden=[";
            for (std::size_t i = 0; i < a.hidden_widths.size(); ++i)
                s += (i ? "," : "") + std::to_string(a.hidden_widths[i]);
            return s + "], activation=" + to_string(a.activation) + ")";
        });

    py::class_<FieldParams>(m, "FieldParams")
        .def_readonly("arch", &FieldParams::arch)
        .def_readonly("version", &FieldParams::version)
        .def_property_readonly("values",
                               [](const FieldParams& p) { return array_from_vec(p.values); })
        .def("with_values", [](const FieldParams& p, const py::array_t<double>& v) {
            FieldParams q = p;
            Vec nv = vec_from_array(v);
            if (nv.size() != q.values.size())
                throw std::invalid_argument("parameter size mismatch");
            q.values = std::move(nv);
            q.version += 1;
            return q;
        });

    m.def("parameter_count", &parameter_count);
    m.def("init_params", &init_params, py::arg("arch"), py::arg("seed"));

    py::class_<FieldOracle>(m, "FieldOracle")
        .def(py::init<const FieldArch&>())
        .def("eval",
             [](FieldOracle& o, const FieldParams& p, const py::array_t<double>& x, double t) {
                 return array_from_vec(o.eval(p, vec_from_array(x), t));
             })
        .def("jacobian",
             [](FieldOracle& o, const FieldParams& p, const py::array_t<double>& x, double t) {
                 Vec xv = vec_from_array(x);
                 auto J = o.jacobian(p, xv.data(), t);
                 std::size_t d = xv.size();
                 py::array_t<double> a({d, d});
                 std::copy(J.begin(), J.end(), a.mutable_data());
                 return a;
             })
        .def("divergence",
             [](FieldOracle& o, const FieldParams& p, const py::array_t<double>& x, double t,
                const std::string& method) {
                 Vec xv = vec_from_array(x);
                 return o.divergence(p, xv.data(), t, divergence_from_string(method));
             },
             py::arg("params"), py::arg("x"), py::arg("t"), py::arg("method") = "exact")
        .def("grad_x_divergence",
             [](FieldOracle& o, const FieldParams& p, const py::array_t<double>& x, double t) {
                 Vec xv = vec_from_array(x);
                 return array_from_vec(
                     o.grad_x_divergence(p, xv.data(), t, DivergenceMethod::exact));
             });

    py::class_<EnergyModel, std::shared_ptr<EnergyModel>>(m, "EnergyModel")
        .def_property_readonly("dim", &EnergyModel::dim)
        .def_property_readonly("kind", &EnergyModel::kind)
        .def("energy",
             [](const EnergyModel& e, const py::array_t<double>& x) {
                 return e.energy(vec_from_array(x).data());
             })
        .def("force",
             [](const EnergyModel& e, const py::array_t<double>& x) {
                 Vec xv = vec_from_array(x);
                 Vec f(e.dim());
                 e.force(xv.data(), f.data());
                 return array_from_vec(f);
             })
        .def("log_prob",
             [](const EnergyModel& e, const py::array_t<double>& x) {
                 return e.log_prob(vec_from_array(x).data());
             })
        .def_property_readonly("has_exact_log_prob", &EnergyModel::has_exact_log_prob)
        .def_property_readonly("has_exact_sampler", &EnergyModel::has_exact_sampler)
        .def("sample",
             [](const EnergyModel& e, std::size_t n, std::uint64_t seed) {
                 return array_from_batch(sample_exact(e, n, seed));
             })
        .def("descriptor", [](const EnergyModel& e) { return e.descriptor().dump(); });

    m.def("standard_normal", &make_standard_normal, py::arg("dim"));
    m.def("gmm2d", [](std::uint64_t seed) { return make_gmm2d(seed); }, py::arg("seed"));
    m.def("lennard_jones", &make_lennard_jones, py::arg("n_particles"), py::arg("space_dim"));
    m.def("double_well", &make_double_well, py::arg("dim"));

    m.def("mcmc_sample",
          [](const EnergyModel& model, std::size_t n, std::size_t burn_in, std::size_t thinning,
             double step_size, std::uint64_t seed) {
              MalaSettings s;
              s.n = n;
              s.burn_in = burn_in;
              s.thinning = thinning;
              s.step_size = step_size;
              s.seed = seed;
              Dataset d = mcmc_sample(model, s);
              py::dict out;
              out["samples"] = array_from_batch(d.samples);
              if (d.forces) out["forces"] = array_from_batch(*d.forces);
              out["source"] = d.source.dump();
              return out;
          },
          py::arg("model"), py::arg("n"), py::arg("burn_in") = 1000, py::arg("thinning") = 10,
          py::arg("step_size") = 1e-2, py::arg("seed") = 0);

    // --- transport -------------------------------------------------------
    m.def("forward_map",
          [](const FieldParams& p, const py::array_t<double>& x0, int n_steps,
             const std::string& divergence, std::uint64_t probe_seed) {
              auto r = cnf::forward_map(p, batch_from_array(x0),
                                        make_integrator(n_steps, "forward", divergence, probe_seed));
              return py::make_tuple(array_from_batch(r.x_end), array_from_vec(r.log_det),
                                    array_from_vec(r.traj_length), r.n_field_evals);
          },
          py::arg("params"), py::arg("x0"), py::arg("n_steps") = 15,
          py::arg("divergence") = "exact", py::arg("probe_seed") = 0);

    m.def("inverse_map",
          [](const FieldParams& p, const py::array_t<double>& x1, int n_steps,
             const std::string& divergence, std::uint64_t probe_seed) {
              auto r = cnf::inverse_map(p, batch_from_array(x1),
                                        make_integrator(n_steps, "inverse", divergence, probe_seed));
              return py::make_tuple(array_from_batch(r.x_end), array_from_vec(r.log_det),
                                    array_from_vec(r.traj_length), r.n_field_evals);
          },
          py::arg("params"), py::arg("x1"), py::arg("n_steps") = 15,
          py::arg("divergence") = "exact", py::arg("probe_seed") = 0);

    m.def("log_prob",
          [](const FieldParams& p, const EnergyModel& base, const py::array_t<double>& x,
             int n_steps) {
              return array_from_vec(cnf::log_prob(p, base, batch_from_array(x),
                                                  make_integrator(n_steps, "inverse", "exact", 0)));
          },
          py::arg("params"), py::arg("base"), py::arg("x"), py::arg("n_steps") = 30);

    m.def("sample_flow",
          [](const FieldParams& p, const EnergyModel& base, std::size_t n, std::uint64_t seed,
             int n_steps) {
              auto [x, lq] =
                  cnf::sample(p, base, n, seed, make_integrator(n_steps, "forward", "exact", 0));
              return py::make_tuple(array_from_batch(x), array_from_vec(lq));
          },
          py::arg("params"), py::arg("base"), py::arg("n"), py::arg("seed"),
          py::arg("n_steps") = 15);

    m.def("trajectory_length",
          [](const FieldParams& p, const py::array_t<double>& x, int n_steps) {
              auto [lens, mean] = cnf::trajectory_length(
                  p, batch_from_array(x), make_integrator(n_steps, "forward", "exact", 0));
              return py::make_tuple(array_from_vec(lens), mean);
          },
          py::arg("params"), py::arg("x"), py::arg("n_steps") = 15);

    m.def("augmented_inverse",
          [](const FieldParams& p, const py::array_t<double>& x1,
             const py::array_t<double>& grad_log_p1, int n_steps) {
              auto r = cnf::augmented_inverse(p, batch_from_array(x1),
                                              batch_from_array(grad_log_p1),
                                              make_integrator(n_steps, "inverse", "exact", 0));
              return py::make_tuple(array_from_batch(r.x0), array_from_batch(r.grad_log_p0),
                                    array_from_vec(r.log_det), r.n_field_evals);
          },
          py::arg("params"), py::arg("x1"), py::arg("grad_log_p1"), py::arg("n_steps") = 15);

    // --- training gradients ---------------------------------------------
    m.def("cfm_grad",
          [](const FieldParams& p, const py::array_t<double>& x0, const py::array_t<double>& x1,
             bool ot, double sigma, std::uint64_t seed) {
              auto g = train::cfm_loss_grad(p, batch_from_array(x0), batch_from_array(x1),
                                            ot ? train::Coupling::ot : train::Coupling::independent,
                                            sigma, seed);
              return py::make_tuple(array_from_vec(g.values), g.aux);
          },
          py::arg("params"), py::arg("x0"), py::arg("x1"), py::arg("ot") = false,
          py::arg("sigma") = 1e-2, py::arg("seed") = 0);

    m.def("ot_pair", [](const py::array_t<double>& x0, const py::array_t<double>& x1) {
        return train::ot_pair(batch_from_array(x0), batch_from_array(x1));
    });

    m.def("ml_grad",
          [](const FieldParams& p, const EnergyModel& base, const py::array_t<double>& x1,
             int n_steps) {
              auto g = train::ml_grad(p, base, batch_from_array(x1),
                                      make_integrator(n_steps, "inverse", "exact", 0));
              return py::make_tuple(array_from_vec(g.values), g.aux);
          },
          py::arg("params"), py::arg("base"), py::arg("x1"), py::arg("n_steps") = 15);

    m.def("pg_grad",
          [](const FieldParams& p, const EnergyModel& base, const EnergyModel& target,
             const py::array_t<double>& x1, py::object forces, int n_steps) {
              std::optional<SampleBatch> f;
              if (!forces.is_none()) f = batch_from_array(py::cast<py::array_t<double>>(forces));
              auto g = train::pg_grad(p, base, target, batch_from_array(x1),
                                      f ? &*f : nullptr,
                                      make_integrator(n_steps, "inverse", "exact", 0));
              return array_from_vec(g.values);
          },
          py::arg("params"), py::arg("base"), py::arg("target"), py::arg("x1"),
          py::arg("forces") = py::none(), py::arg("n_steps") = 15);

    m.def("run_training",
          [](const std::string& stage, const std::string& loss, const FieldParams& initial,
             const py::array_t<double>& samples, py::object forces,
             std::shared_ptr<EnergyModel> base, std::shared_ptr<EnergyModel> target,
             const py::array_t<double>& test_set, std::size_t batch_size,
             double lr, double sigma, int epochs, py::object wall_seconds, std::uint64_t seed,
             py::object grad_clip_norm, int n_steps, int eval_every, double eval_every_seconds,
             std::size_t ess_q_samples, std::size_t nll_samples, std::size_t traj_samples,
             std::uint64_t eval_seed) {
              Dataset ds;
              ds.samples = batch_from_array(samples);
              if (!forces.is_none())
                  ds.forces = batch_from_array(py::cast<py::array_t<double>>(forces));
              train::EvalContext ev;
              ev.base = std::move(base);
              ev.target = std::move(target);
              ev.test_set = batch_from_array(test_set);
              ev.ess_q_samples = ess_q_samples;
              ev.nll_samples = nll_samples;
              ev.traj_samples = traj_samples;
              ev.eval_seed = eval_seed;
              train::TrainConfig cfg;
              cfg.loss = train::loss_from_string(loss);
              cfg.batch_size = batch_size;
              cfg.lr = lr;
              cfg.sigma = sigma;
              cfg.epochs = epochs;
              cfg.seed = seed;
              cfg.integrator.n_steps = n_steps;
              cfg.integrator.divergence_method =
                  train::default_divergence_for_dim(ds.samples.dim);
              cfg.eval_every = eval_every;
              cfg.eval_every_seconds = eval_every_seconds;
              if (!wall_seconds.is_none()) cfg.wall_seconds = py::cast<double>(wall_seconds);
              if (!grad_clip_norm.is_none()) cfg.grad_clip_norm = py::cast<double>(grad_clip_norm);
              train::TrainResult r;
              {
                  py::gil_scoped_release release;
                  r = train::run_training(train::stage_from_string(stage), cfg, ds, ev, initial,
                                          {});
              }
              py::dict out;
              out["params"] = r.params;
              py::list log;
              for (const auto& row : r.log) log.append(row_to_dict(row));
              out["log"] = log;
              out["diverged"] = r.diverged;
              out["divergence_note"] = r.divergence_note;
              return out;
          },
          py::arg("stage"), py::arg("loss"), py::arg("initial"), py::arg("samples"),
          py::arg("forces"), py::arg("base"), py::arg("target"), py::arg("test_set"),
          py::arg("batch_size") = 256, py::arg("lr") = 1e-2, py::arg("sigma") = 1e-2,
          py::arg("epochs") = 1, py::arg("wall_seconds") = py::none(), py::arg("seed") = 0,
          py::arg("grad_clip_norm") = py::none(), py::arg("n_steps") = 15,
          py::arg("eval_every") = 20, py::arg("eval_every_seconds") = 5.0,
          py::arg("ess_q_samples") = 2048, py::arg("nll_samples") = 512,
          py::arg("traj_samples") = 256, py::arg("eval_seed") = 1234);

    // --- metrics ---------------------------------------------------------
    auto weights = [](const EnergyModel& target, const py::array_t<double>& log_q,
                      const py::array_t<double>& x, const std::string& origin) {
        auto o = origin == "model" ? metrics::WeightOrigin::model_samples
                                   : metrics::WeightOrigin::target_samples;
        return metrics::importance_weights(target, vec_from_array(log_q), batch_from_array(x), o);
    };
    m.def("ess_q",
          [weights](const EnergyModel& target, const py::array_t<double>& log_q,
                    const py::array_t<double>& x) {
              return metrics::ess_q(weights(target, log_q, x, "model"));
          });
    m.def("ess_p",
          [weights](const EnergyModel& target, const py::array_t<double>& log_q,
                    const py::array_t<double>& x) {
              return metrics::ess_p(weights(target, log_q, x, "target"));
          });
    m.def("log_z",
          [weights](const EnergyModel& target, const py::array_t<double>& log_q,
                    const py::array_t<double>& x) {
              auto w = weights(target, log_q, x, "model");
              return py::make_tuple(metrics::log_z_hat(w), metrics::log_z_jackknife_err(w));
          });
    m.def("nll",
          [](const FieldParams& p, const EnergyModel& base, const py::array_t<double>& test_set,
             int n_steps) {
              return metrics::nll(p, base, batch_from_array(test_set),
                                  make_integrator(n_steps, "inverse", "exact", 0));
          },
          py::arg("params"), py::arg("base"), py::arg("test_set"), py::arg("n_steps") = 30);
    m.def("forward_kl",
          [](const FieldParams& p, const EnergyModel& base, const EnergyModel& target,
             const py::array_t<double>& test_set, int n_steps) {
              return metrics::forward_kl(p, base, target, batch_from_array(test_set),
                                         make_integrator(n_steps, "inverse", "exact", 0));
          },
          py::arg("params"), py::arg("base"), py::arg("target"), py::arg("test_set"),
          py::arg("n_steps") = 30);

    // --- variance lab ----------------------------------------------------
    auto toy_cfg = [](std::size_t n, std::size_t d, std::size_t trials, double theta,
                      std::uint64_t seed) {
        variancelab::ToyConfig c;
        c.n = n;
        c.d = d;
        c.trials = trials;
        c.theta = theta;
        c.seed = seed;
        return c;
    };
    m.def("toy_fm_variance",
          [toy_cfg](std::size_t n, std::size_t d, std::size_t trials, double theta,
                    std::uint64_t seed) {
              auto s = variancelab::toy_fm_variance(toy_cfg(n, d, trials, theta, seed));
              return py::make_tuple(s.mean, s.var);
          },
          py::arg("n"), py::arg("d"), py::arg("trials") = 10000, py::arg("theta") = 0.0,
          py::arg("seed") = 0);
    m.def("toy_ml_variance",
          [toy_cfg](std::size_t n, std::size_t d, std::size_t trials, double theta,
                    std::uint64_t seed) {
              auto s = variancelab::toy_ml_variance(toy_cfg(n, d, trials, theta, seed));
              return py::make_tuple(s.mean, s.var);
          },
          py::arg("n"), py::arg("d"), py::arg("trials") = 10000, py::arg("theta") = 0.0,
          py::arg("seed") = 0);
    m.def("toy_pg_stats",
          [toy_cfg](std::size_t n, std::size_t d, std::size_t trials, double theta,
                    std::uint64_t seed) {
              auto s = variancelab::toy_pg_stats(toy_cfg(n, d, trials, theta, seed));
              return py::make_tuple(s.mean, s.var);
          },
          py::arg("n"), py::arg("d"), py::arg("trials") = 50, py::arg("theta") = 0.0,
          py::arg("seed") = 0);
}
