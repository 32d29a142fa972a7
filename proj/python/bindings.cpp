#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ssmlab/errors.hpp"
#include "ssmlab/kernel.hpp"
#include "ssmlab/perturb.hpp"
#include "ssmlab/reparam.hpp"
#include "ssmlab/ssm.hpp"
#include "ssmlab/train.hpp"

namespace py = pybind11;
using namespace ssmlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
    if (a.ndim() == 1) {
        Matrix m(static_cast<std::size_t>(a.shape(0)), 1);
        std::copy(a.data(), a.data() + a.size(), m.data.begin());
        return m;
    }
    if (a.ndim() != 2) throw py::value_error("expected a 1-D or 2-D array");
    Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.data.begin());
    return m;
}

Array from_matrix(const Matrix& m) {
    Array out({m.rows, m.cols});
    std::copy(m.data.begin(), m.data.end(), out.mutable_data());
    return out;
}

Array from_vector(const std::vector<double>& v) {
    Array out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

MemoryKernel kernel_arg(const std::string& spec) { return parse_kernel_spec(spec); }

SSMParams make_params(const Array& w, const Array& U, const Array& b, const Array& c, const std::string& scheme,
                      const std::string& activation, double dt) {
    SSMParams p;
    p.w = to_vector(w);
    p.U = to_matrix(U);
    p.b = to_vector(b);
    p.c = to_vector(c);
    p.scheme = parse_scheme(scheme);
    p.activation = parse_activation(activation);
    p.dt = dt;
    validate(p);
    return p;
}

py::dict telemetry_dict(const std::vector<TelemetryRecord>& records) {
    std::vector<double> loss, gmax, gmin, eig, norm, bound, ratio;
    std::vector<std::size_t> violations;
    for (const auto& r : records) {
        loss.push_back(r.loss);
        gmax.push_back(r.gow_max);
        gmin.push_back(r.gow_min);
        eig.push_back(r.max_eig);
        norm.push_back(r.weight_norm);
        bound.push_back(r.bound_constant);
        ratio.push_back(r.bound_ratio_max);
        violations.push_back(r.bound_violations);
    }
    py::dict d;
    d["loss"] = from_vector(loss);
    d["gow_max"] = from_vector(gmax);
    d["gow_min"] = from_vector(gmin);
    d["max_eig"] = from_vector(eig);
    d["weight_norm"] = from_vector(norm);
    d["bound_constant"] = from_vector(bound);
    d["bound_ratio_max"] = from_vector(ratio);
    d["bound_violations"] = violations;
    return d;
}

} // namespace

PYBIND11_MODULE(_ssmlab, m) {
    m.doc() = "Diagonal state-space models, reparameterizations and memory kernels";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<DomainError>(m, "DomainError", PyExc_ArithmeticError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_FloatingPointError);

    // reparameterizations, addressed by spec strings such as "best:a=1,b=0.5@disc"
    m.def("normalize_scheme", [](const std::string& s) { return to_string(parse_scheme(s)); });
    m.def("apply", [](const std::string& s, double w) { return apply(parse_scheme(s), w); });
    m.def("derivative", [](const std::string& s, double w) { return derivative(parse_scheme(s), w); });
    m.def("gradient_scale", [](const std::string& s, double w) { return gradient_scale(parse_scheme(s), w); });
    m.def("tabulated_gradient_scale",
          [](const std::string& s, double w) { return tabulated_gradient_scale(parse_scheme(s), w); });
    m.def("stability_gap", [](const std::string& s, double w, double beta) { return stability_gap(parse_scheme(s), w, beta); });
    m.def("stability_bound_g",
          [](const std::string& s, double w, double beta) { return stability_bound_g(parse_scheme(s), w, beta); });
    m.def("invert", [](const std::string& s, double lambda) { return invert(parse_scheme(s), lambda); });

    // kernels, addressed by "poly:<gamma>", "expdecay:<rate>" or "csv:<path>"
    m.def("eval_kernel", [](const std::string& spec, double t) { return eval_kernel(kernel_arg(spec), t); });
    m.def(
        "kernel_l1_norm",
        [](const std::string& spec, double dt, double horizon, double tail_tolerance, bool include_tail) {
            return kernel_l1_norm(kernel_arg(spec), QuadratureConfig{dt, horizon, tail_tolerance, include_tail});
        },
        py::arg("spec"), py::arg("dt") = 0.01, py::arg("horizon") = 1000.0, py::arg("tail_tolerance") = 1e-4,
        py::arg("include_tail") = true);
    m.def("lag_weights", [](const std::string& spec, std::size_t count, double dt) {
        return from_vector(lag_weights(kernel_arg(spec), count, dt));
    });
    m.def("apply_linear_functional", [](const std::string& spec, const Array& x, double dt) {
        const auto v = to_vector(x);
        return from_vector(apply_linear_functional(kernel_arg(spec), v, dt));
    });

    py::class_<SSMParams>(m, "SSMParams")
        .def(py::init(&make_params), py::arg("w"), py::arg("U"), py::arg("b"), py::arg("c"),
             py::arg("scheme") = "exp@cont", py::arg("activation") = "tanh", py::arg("dt") = 1.0)
        .def_property_readonly("w", [](const SSMParams& p) { return from_vector(p.w); })
        .def_property_readonly("U", [](const SSMParams& p) { return from_matrix(p.U); })
        .def_property_readonly("b", [](const SSMParams& p) { return from_vector(p.b); })
        .def_property_readonly("c", [](const SSMParams& p) { return from_vector(p.c); })
        .def_property_readonly("scheme", [](const SSMParams& p) { return to_string(p.scheme); })
        .def_property_readonly("activation", [](const SSMParams& p) { return std::string(activation_name(p.activation)); })
        .def_property_readonly("dt", [](const SSMParams& p) { return p.dt; })
        .def_property_readonly("eigenvalues", [](const SSMParams& p) { return from_vector(eigenvalues(p)); })
        .def("to_json", &checkpoint_json)
        .def_static("from_json", [](const std::string& text) { return params_from_json(text); })
        .def("__eq__", [](const SSMParams& a, const SSMParams& b) { return a == b; });

    m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(path); });
    m.def("save_checkpoint", [](const std::string& path, const SSMParams& p) { save_checkpoint(path, p); });
    m.def("forward", [](const SSMParams& p, const Array& x) {
        const auto traj = forward(p, to_matrix(x));
        return py::make_tuple(from_vector(traj.y), from_matrix(traj.h));
    });
    m.def(
        "forward_scan",
        [](const SSMParams& p, const Array& x, int workers) {
            const auto traj = forward_scan(p, to_matrix(x), workers);
            return py::make_tuple(from_vector(traj.y), from_matrix(traj.h));
        },
        py::arg("params"), py::arg("x"), py::arg("workers") = 1);
    m.def("gradients", [](const SSMParams& p, const Array& x, const Array& dloss_dy) {
        const Matrix xm = to_matrix(x);
        const auto traj = forward(p, xm);
        const auto dy = to_vector(dloss_dy);
        const auto g = backward(p, xm, traj, dy);
        py::dict d;
        d["w"] = from_vector(g.w);
        d["U"] = from_matrix(g.U);
        d["b"] = from_vector(g.b);
        d["c"] = from_vector(g.c);
        d["lambda"] = from_vector(g.lambda);
        return d;
    });
    m.def("weight_norm", &weight_norm);
    m.def("max_eigenvalue", &max_eigenvalue);

    m.def(
        "generate_dataset",
        [](const std::string& target, std::size_t k, std::size_t n, double dt, std::uint64_t seed, bool probe) {
            const auto data = generate_dataset(kernel_arg(target), k, n, dt, seed, probe);
            Array x({n, k}), y({n, k});
            std::copy(data.x.begin(), data.x.end(), x.mutable_data());
            std::copy(data.y.begin(), data.y.end(), y.mutable_data());
            return py::make_tuple(x, y);
        },
        py::arg("target"), py::arg("k"), py::arg("n"), py::arg("dt") = 1.0, py::arg("seed") = 0,
        py::arg("heaviside_probe") = false);

    m.def(
        "train",
        [](const std::string& target, std::size_t width, const std::string& scheme, const std::string& activation,
           std::size_t k, std::size_t n, std::size_t batch_size, double lr, const std::string& optimizer,
           std::size_t epochs, std::size_t max_steps, std::uint64_t seed, const std::string& loss, double dt,
           bool train_bias, int workers) {
            TrainConfig cfg;
            cfg.target = kernel_arg(target);
            cfg.width = width;
            cfg.scheme = parse_scheme(scheme);
            cfg.activation = parse_activation(activation);
            cfg.seq_len = k;
            cfg.dataset_size = n;
            cfg.batch_size = batch_size;
            cfg.lr = lr;
            if (optimizer == "sgd") cfg.optimizer = OptimizerKind::SGD;
            else if (optimizer == "adam") cfg.optimizer = OptimizerKind::Adam;
            else throw ConfigError("optimizer must be sgd or adam");
            cfg.epochs = epochs;
            cfg.max_steps = max_steps;
            cfg.seed = seed;
            if (loss == "mse") cfg.loss = LossKind::MSE;
            else if (loss == "l1_kernel") cfg.loss = LossKind::L1Kernel;
            else throw ConfigError("loss must be mse or l1_kernel");
            cfg.dt = dt;
            cfg.train_bias = train_bias;
            cfg.workers = workers;
            TrainResult result;
            {
                py::gil_scoped_release release;
                result = train(cfg);
            }
            py::dict d;
            d["initial"] = result.initial;
            d["params"] = result.params;
            d["status"] = result.status == TrainStatus::Completed ? "completed" : "diverged";
            d["diverged_step"] = result.diverged_step;
            d["warnings"] = result.warnings;
            d["telemetry"] = telemetry_dict(result.telemetry);
            return d;
        },
        py::arg("target") = "poly:1.1", py::arg("m") = 16, py::arg("scheme") = "exp@cont",
        py::arg("activation") = "tanh", py::arg("k") = 100, py::arg("n") = 153600, py::arg("batch_size") = 512,
        py::arg("lr") = 0.01, py::arg("optimizer") = "adam", py::arg("epochs") = 1, py::arg("max_steps") = 0,
        py::arg("seed") = 0, py::arg("loss") = "mse", py::arg("dt") = 1.0, py::arg("train_bias") = true,
        py::arg("workers") = 1);

    m.def(
        "kernel_distance",
        [](const SSMParams& p, const std::string& target, std::size_t window_steps) {
            return kernel_distance_to_target(p, kernel_arg(target), training_window(window_steps, p.dt));
        },
        py::arg("params"), py::arg("target") = "poly:1.1", py::arg("window_steps") = 100);

    auto perturb_config = [](const std::string& betas, std::size_t samples, const std::string& set,
                             const std::string& metric, const std::string& space, std::uint64_t seed, int workers) {
        PerturbConfig pc;
        pc.betas = parse_beta_grid(betas);
        pc.samples_per_beta = samples;
        pc.perturb_set = parse_perturb_set(set);
        pc.metric = parse_metric(metric);
        pc.space = parse_perturb_space(space);
        pc.seed = seed;
        pc.workers = workers;
        return pc;
    };
    m.def(
        "estimate_perturbation_error",
        [perturb_config](const SSMParams& p, const std::string& target, double beta, std::size_t samples,
                         const std::string& set, const std::string& metric, const std::string& space,
                         std::uint64_t seed) {
            const auto pc = perturb_config("0", samples, set, metric, space, seed, 1);
            return estimate_perturbation_error(p, kernel_arg(target), beta, pc).value;
        },
        py::arg("params"), py::arg("target"), py::arg("beta"), py::arg("samples") = 30,
        py::arg("perturb_set") = "recurrent_only", py::arg("metric") = "l1_kernel", py::arg("space") = "weight",
        py::arg("seed") = 0);
    m.def(
        "sweep",
        [perturb_config](const std::vector<SSMParams>& checkpoints, const std::string& target,
                         const std::string& betas, std::size_t samples, const std::string& set,
                         const std::string& metric, const std::string& space, std::uint64_t seed, int workers) {
            const auto pc = perturb_config(betas, samples, set, metric, space, seed, workers);
            PerturbationReport report;
            {
                py::gil_scoped_release release;
                report = sweep(checkpoints, kernel_arg(target), pc);
            }
            std::ostringstream csv;
            write_report_csv(csv, report);
            py::list crossings;
            for (const auto& c : report.crossings) crossings.append(py::make_tuple(c.m, c.next_m, c.beta));
            py::dict d;
            d["csv"] = csv.str();
            d["crossings"] = crossings;
            return d;
        },
        py::arg("checkpoints"), py::arg("target") = "poly:1.1", py::arg("betas") = "geo:1e-3:sqrt2:21",
        py::arg("samples") = 30, py::arg("perturb_set") = "recurrent_only", py::arg("metric") = "l1_kernel",
        py::arg("space") = "weight", py::arg("seed") = 0, py::arg("workers") = 1);
}
