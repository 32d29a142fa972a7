#include "ssmlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include "ssmlab/errors.hpp"
#include "ssmlab/parallel.hpp"
#include "ssmlab/random.hpp"
#include "ssmlab/text.hpp"

namespace ssmlab {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::size_t kChunk = 16;

// Flattened parameter layout: [w | U (row-major) | b | c].
struct Layout {
    std::size_t m, d;
    std::size_t size() const { return m * (d + 3); }
    std::size_t u() const { return m; }
    std::size_t b() const { return m + m * d; }
    std::size_t c() const { return 2 * m + m * d; }
};

std::vector<double> flatten(const SSMParams& p) {
    std::vector<double> out;
    out.reserve(p.width() * (p.input_dim() + 3));
    out.insert(out.end(), p.w.begin(), p.w.end());
    out.insert(out.end(), p.U.data.begin(), p.U.data.end());
    out.insert(out.end(), p.b.begin(), p.b.end());
    out.insert(out.end(), p.c.begin(), p.c.end());
    return out;
}

void unflatten(std::span<const double> theta, const Layout& L, SSMParams& p) {
    std::copy_n(theta.begin(), L.m, p.w.begin());
    std::copy_n(theta.begin() + L.u(), L.m * L.d, p.U.data.begin());
    std::copy_n(theta.begin() + L.b(), L.m, p.b.begin());
    std::copy_n(theta.begin() + L.c(), L.m, p.c.begin());
}

void accumulate(std::vector<double>& into, const Gradients& g, const Layout& L) {
    for (std::size_t i = 0; i < L.m; ++i) {
        into[i] += g.w[i];
        into[L.b() + i] += g.b[i];
        into[L.c() + i] += g.c[i];
    }
    for (std::size_t i = 0; i < L.m * L.d; ++i) into[L.u() + i] += g.U.data[i];
}

// max_{k,i} |U_i x_k + b_i| for a single-channel input sequence.
double drive_sup(const SSMParams& p, std::span<const double> x) {
    double sup = 0.0;
    for (double xv : x) {
        for (std::size_t i = 0; i < p.width(); ++i) sup = std::max(sup, std::abs(p.U(i, 0) * xv + p.b[i]));
    }
    return sup;
}

struct BatchEval {
    double loss = 0.0;
    std::vector<double> grad;
    double mass = 0.0;
    /// Replaces the recurrence-based eigenvalue factor when set.
    std::optional<double> factor;
};

Matrix as_column(std::span<const double> x) {
    Matrix out(x.size(), 1);
    std::copy(x.begin(), x.end(), out.data.begin());
    return out;
}

BatchEval mse_batch(const SSMParams& p, const Dataset& data, std::span<const std::size_t> batch, int workers) {
    const Layout L{p.width(), p.input_dim()};
    const std::size_t K = data.seq_len;
    const double scale = 2.0 / static_cast<double>(batch.size() * K);
    const std::size_t chunks = (batch.size() + kChunk - 1) / kChunk;
    std::vector<BatchEval> partial(chunks);
    parallel_for(chunks, workers, [&](std::size_t ci) {
        BatchEval& acc = partial[ci];
        acc.grad.assign(L.size(), 0.0);
        std::vector<double> dy(K);
        const std::size_t hi = std::min(batch.size(), (ci + 1) * kChunk);
        for (std::size_t s = ci * kChunk; s < hi; ++s) {
            const auto xs = data.input(batch[s]);
            const auto label = data.label(batch[s]);
            const Matrix x = as_column(xs);
            const auto traj = forward(p, x);
            double l1 = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                const double r = traj.y[k] - label[k];
                acc.loss += r * r;
                dy[k] = scale * r;
                l1 += std::abs(dy[k]);
            }
            accumulate(acc.grad, backward(p, x, traj, dy), L);
            acc.mass += drive_sup(p, xs) * l1;
        }
    });
    BatchEval total{0.0, std::vector<double>(L.size(), 0.0), 0.0, std::nullopt};
    for (const auto& part : partial) {
        total.loss += part.loss;
        total.mass += part.mass;
        for (std::size_t i = 0; i < L.size(); ++i) total.grad[i] += part.grad[i];
    }
    total.loss /= static_cast<double>(batch.size() * K);
    return total;
}

// Impulse-response L1 loss: sum_n |y_n(delta) - W_n|.
BatchEval l1_kernel_eval(const SSMParams& p, const std::vector<double>& target_weights) {
    const Layout L{p.width(), p.input_dim()};
    const std::size_t K = target_weights.size();
    std::vector<double> impulse(K, 0.0);
    if (K > 0) impulse[0] = 1.0;
    const Matrix x = as_column(impulse);
    const auto traj = forward(p, x);
    BatchEval out{0.0, std::vector<double>(L.size(), 0.0), 0.0, std::nullopt};
    std::vector<double> dy(K, 0.0);
    double l1 = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        const double r = traj.y[k] - target_weights[k];
        out.loss += std::abs(r);
        dy[k] = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
        l1 += std::abs(dy[k]);
    }
    accumulate(out.grad, backward(p, x, traj, dy), L);
    out.mass = drive_sup(p, impulse) * l1;
    return out;
}

// Continuous time: trapezoid sum of |rho_hat - rho| over the grid t_j = j h,
// the same sum the finite-window kernel distance takes. rho_hat(t) =
// sum_i c_i U_i e^{lambda_i t}, so the gradient needs no recurrence.
BatchEval l1_kernel_eval_grid(const SSMParams& p, const std::vector<double>& target, double h) {
    const Layout L{p.width(), p.input_dim()};
    const std::size_t n = target.size() - 1;
    const auto lambda = eigenvalues(p);
    const auto model = model_kernel(p);
    constexpr std::size_t kRestart = 1024;

    std::vector<double> diff(n + 1, 0.0);
    for (std::size_t i = 0; i < L.m; ++i) {
        const double step = std::exp(lambda[i] * h);
        double e = 1.0;
        for (std::size_t j = 0; j <= n; ++j) {
            if (j % kRestart == 0) e = std::exp(lambda[i] * static_cast<double>(j) * h);
            diff[j] += model.c[i] * e;
            e *= step;
        }
    }
    BatchEval out{0.0, std::vector<double>(L.size(), 0.0), 0.0, 1.0};
    std::vector<double> sign(n + 1);
    for (std::size_t j = 0; j <= n; ++j) {
        const double weight = (j == 0 || j == n) ? 0.5 * h : h;
        const double r = diff[j] - target[j];
        out.loss += weight * std::abs(r);
        sign[j] = weight * (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0));
    }
    double u_sup = 0.0;
    for (std::size_t i = 0; i < L.m; ++i) {
        const double step = std::exp(lambda[i] * h);
        double e = 1.0, d_coef = 0.0, d_lambda = 0.0;
        for (std::size_t j = 0; j <= n; ++j) {
            if (j % kRestart == 0) e = std::exp(lambda[i] * static_cast<double>(j) * h);
            d_coef += sign[j] * e;
            d_lambda += sign[j] * static_cast<double>(j) * h * e;
            e *= step;
        }
        d_lambda *= model.c[i];
        out.grad[L.c() + i] = d_coef * p.U(i, 0);
        out.grad[L.u() + i] = d_coef * p.c[i];
        out.grad[i] = derivative(p.scheme, p.w[i]) * d_lambda;
        u_sup = std::max(u_sup, std::abs(p.U(i, 0)));
    }
    // |d/dlambda| <= |c_i U_i| * int t e^{lambda t} dt <= |c_i| |U_i| / lambda^2.
    out.mass = u_sup;
    return out;
}

// max_i S(lambda_i) * scale(lambda_i), where S bounds sum_n |d h / d lambda|
// per unit drive and scale is the reciprocal of the gradient-scale denominator.
double eigen_factor(const SSMParams& p, std::size_t K) {
    double best = 0.0;
    for (double lambda : eigenvalues(p)) {
        double series = 0.0;
        if (p.mode() == TimeMode::Discrete) {
            const double r = std::abs(lambda);
            double power = 1.0;
            for (std::size_t n = 1; n + 2 <= K; ++n) {
                series += static_cast<double>(n) * power;
                power *= r;
            }
            best = std::max(best, series * (1.0 - lambda) * (1.0 - lambda));
        } else {
            const double z = lambda * p.dt;
            const double decay = std::exp(z);
            const double gain = std::abs(z) < 1e-8 ? p.dt : p.dt * std::expm1(z) / z;
            const double dgain = std::abs(z) < 1e-2
                                     ? p.dt * p.dt * (0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0 + z * z * z * z / 144.0)
                                     : p.dt * p.dt * (z * std::exp(z) - std::expm1(z)) / (z * z);
            double power = 1.0;
            for (std::size_t n = 0; n + 2 <= K; ++n) {
                series += power * (static_cast<double>(n) * p.dt * gain + std::abs(dgain));
                power *= decay;
            }
            best = std::max(best, series * lambda * lambda);
        }
    }
    return best;
}

TelemetryRecord make_record(std::size_t step, const SSMParams& p, const BatchEval& eval, const TrainConfig& cfg,
                            std::size_t seq_len) {
    const Layout L{p.width(), p.input_dim()};
    TelemetryRecord r;
    r.step = step;
    r.loss = eval.loss;
    r.max_eig = max_eigenvalue(p);
    r.weight_norm = weight_norm(p);

    auto ratio_range = [&](std::size_t lo, std::size_t hi, const std::vector<double>& theta, double& mx, double& mn,
                           std::size_t* excluded) {
        mx = -std::numeric_limits<double>::infinity();
        mn = std::numeric_limits<double>::infinity();
        for (std::size_t i = lo; i < hi; ++i) {
            if (!cfg.train_bias && i >= L.b() && i < L.c()) continue;
            if (std::abs(theta[i]) <= 1e-12) {
                if (excluded) ++*excluded;
                continue;
            }
            const double ratio = std::abs(eval.grad[i]) / std::abs(theta[i]);
            mx = std::max(mx, ratio);
            mn = std::min(mn, ratio);
        }
        if (mx < mn) mx = mn = kNaN;
    };
    const auto theta = flatten(p);
    ratio_range(0, L.m, theta, r.gow_max, r.gow_min, &r.gow_excluded);
    ratio_range(0, L.size(), theta, r.gow_all_max, r.gow_all_min, nullptr);

    for (double c : p.c) r.max_abs_c = std::max(r.max_abs_c, std::abs(c));
    r.batch_mass = lipschitz_constant(p.activation) * eval.mass;
    r.eigen_factor = eval.factor ? *eval.factor : eigen_factor(p, seq_len);
    r.bound_constant = r.max_abs_c * r.batch_mass * r.eigen_factor;
    for (std::size_t i = 0; i < L.m; ++i) {
        double scale = 0.0;
        try {
            scale = gradient_scale(p.scheme, p.w[i]);
        } catch (const DomainError&) {
            ++r.bound_skipped;
            continue;
        }
        const double g = std::abs(eval.grad[i]);
        if (g > r.bound_constant * scale * (1.0 + 1e-9)) ++r.bound_violations;
        const double plain = r.max_abs_c * r.batch_mass * scale;
        if (g > 0.0) r.bound_ratio_max = std::max(r.bound_ratio_max, plain > 0.0 ? g / plain : kInf);
    }
    return r;
}

bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace

void validate(const TrainConfig& cfg) {
    validate(cfg.target);
    validate(cfg.scheme);
    if (cfg.width == 0) throw ConfigError("train: m must be positive");
    if (cfg.input_dim != 1) throw ConfigError("train: only single-channel inputs (d = 1) are supported");
    if (cfg.seq_len < 2) throw ConfigError("train: sequence length must be at least 2");
    if (cfg.batch_size == 0 || cfg.dataset_size == 0) throw ConfigError("train: N and B must be positive");
    if (cfg.dataset_size % cfg.batch_size != 0) throw ConfigError("train: N must be divisible by B");
    if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("train: learning rate must be nonnegative");
    if (!(cfg.dt > 0.0)) throw ConfigError("train: dt must be positive");
    if (cfg.loss == LossKind::L1Kernel && (cfg.train_bias || cfg.activation != Activation::Identity))
        throw ConfigError("train: the l1-kernel loss needs a linear model (identity activation, train_bias = false)");
    if (cfg.init_low && cfg.init_high && *cfg.init_low > *cfg.init_high)
        throw ConfigError("train: init_low exceeds init_high");
    if (cfg.workers < 1) throw ConfigError("train: workers must be >= 1");
}

Dataset generate_dataset(const MemoryKernel& target, std::size_t seq_len, std::size_t size, double dt,
                         std::uint64_t seed, bool heaviside_probe, int workers) {
    validate(target);
    Dataset data{size, seq_len, std::vector<double>(size * seq_len), std::vector<double>(size * seq_len)};
    auto rng = make_rng(seed, 2);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : data.x) v = normal(rng);
    if (heaviside_probe && size > 0) std::fill_n(data.x.begin(), seq_len, 1.0);

    const auto weights = lag_weights(target, seq_len, dt);
    parallel_for(size, workers, [&](std::size_t n) {
        const auto x = data.input(n);
        double* y = data.y.data() + n * seq_len;
        for (std::size_t t = 0; t < seq_len; ++t) {
            double acc = 0.0;
            for (std::size_t lag = 1; lag <= t; ++lag) acc += weights[lag] * x[t - lag];
            y[t] = acc;
        }
    });
    return data;
}

void write_dataset_csv(std::ostream& out, const Dataset& data) {
    out << "sample";
    for (std::size_t k = 0; k < data.seq_len; ++k) out << ",x" << k;
    for (std::size_t k = 0; k < data.seq_len; ++k) out << ",y" << k;
    out << '\n';
    for (std::size_t n = 0; n < data.size; ++n) {
        out << n;
        for (double v : data.input(n)) out << ',' << format_double(v);
        for (double v : data.label(n)) out << ',' << format_double(v);
        out << '\n';
    }
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("dataset " + path.string() + " is empty");
    const auto header = split(line, ',');
    if (header.empty() || header[0] != "sample" || header.size() % 2 != 1 || header.size() < 3)
        throw ConfigError("dataset header must be sample,x0..,y0..");
    Dataset data;
    data.seq_len = (header.size() - 1) / 2;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != header.size())
            throw ConfigError("dataset row " + std::to_string(data.size) + " has the wrong number of columns");
        for (std::size_t k = 0; k < data.seq_len; ++k) data.x.push_back(parse_double(cells[1 + k], "x"));
        for (std::size_t k = 0; k < data.seq_len; ++k) data.y.push_back(parse_double(cells[1 + data.seq_len + k], "y"));
        ++data.size;
    }
    return data;
}

SSMParams initial_params(const TrainConfig& cfg) {
    validate(cfg.scheme);
    if (cfg.warm_start) {
        const SSMParams& p = *cfg.warm_start;
        validate(p);
        if (p.width() != cfg.width || p.input_dim() != cfg.input_dim || !(p.scheme == cfg.scheme) ||
            p.activation != cfg.activation || p.dt != cfg.dt)
            throw ConfigError("warm start parameters do not match the training config");
        return p;
    }
    const bool cont = cfg.scheme.mode == TimeMode::Continuous;
    const double lo = cfg.init_low.value_or(cont ? -0.99 : 0.01);
    const double hi = cfg.init_high.value_or(cont ? -0.01 : 0.99);
    auto rng = make_rng(cfg.seed, 1);
    std::uniform_real_distribution<double> uniform(lo, hi);
    std::normal_distribution<double> normal(0.0, 1.0);

    const std::size_t m = cfg.width;
    SSMParams p;
    p.scheme = cfg.scheme;
    p.activation = cfg.activation;
    p.dt = cfg.dt;
    std::vector<double> lambda(m);
    for (double& l : lambda) l = uniform(rng);
    p.U = Matrix(m, cfg.input_dim);
    for (double& u : p.U.data) u = normal(rng);
    p.c.resize(m);
    for (double& c : p.c) c = normal(rng) / std::sqrt(static_cast<double>(m));
    p.b.assign(m, 0.0);
    p.w.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        try {
            p.w[i] = invert(cfg.scheme, lambda[i]);
        } catch (const DomainError& e) {
            throw ConfigError(std::string("initial eigenvalue range does not fit the scheme: ") + e.what());
        }
    }
    return p;
}

TrainResult train(const TrainConfig& cfg, const TelemetrySink& sink) {
    validate(cfg);
    if (cfg.loss == LossKind::L1Kernel) return train(cfg, Dataset{}, sink);
    const auto data = generate_dataset(cfg.target, cfg.seq_len, cfg.dataset_size, cfg.dt, cfg.seed, false, cfg.workers);
    return train(cfg, data, sink);
}

TrainResult train(const TrainConfig& cfg_in, const Dataset& data, const TelemetrySink& sink) {
    // The impulse-response loss never reads samples.
    TrainConfig cfg = cfg_in;
    if (cfg.loss == LossKind::MSE) {
        cfg.dataset_size = data.size;
        cfg.seq_len = data.seq_len;
    }
    validate(cfg);

    TrainResult result;
    result.initial = initial_params(cfg);
    SSMParams params = result.initial;
    const Layout L{cfg.width, cfg.input_dim};
    std::vector<double> theta = flatten(params);
    std::vector<double> moment1(L.size(), 0.0), moment2(L.size(), 0.0);

    std::vector<double> target_weights;
    const QuadratureConfig window = training_window(cfg.seq_len, cfg.dt);
    const bool on_grid = cfg.loss == LossKind::L1Kernel && cfg.scheme.mode == TimeMode::Continuous;
    if (on_grid) {
        const auto n = static_cast<std::size_t>(std::llround(window.horizon / window.dt));
        target_weights.resize(n + 1);
        for (std::size_t j = 0; j <= n; ++j) target_weights[j] = eval_kernel(cfg.target, static_cast<double>(j) * window.dt);
    } else if (cfg.loss == LossKind::L1Kernel) {
        target_weights = lag_weights(cfg.target, cfg.seq_len, cfg.dt);
    }

    auto note_marginal = [&] {
        if (params.mode() != TimeMode::Discrete || !result.warnings.empty()) return;
        for (double l : eigenvalues(params)) {
            if (std::abs(l) == 1.0) {
                result.warnings.push_back("eigenvalue on the unit circle (marginally stable)");
                return;
            }
        }
    };
    note_marginal();

    const std::size_t steps_per_epoch = cfg.dataset_size / cfg.batch_size;
    std::size_t total = cfg.epochs * steps_per_epoch;
    if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
    std::vector<std::size_t> order(cfg.dataset_size);

    std::size_t step = 0;
    for (std::size_t epoch = 0; step < total; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto rng = make_rng(cfg.seed, 3, epoch);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < steps_per_epoch && step < total; ++s, ++step) {
            BatchEval eval;
            try {
                if (cfg.loss == LossKind::MSE) {
                    const std::span<const std::size_t> batch(order.data() + s * cfg.batch_size, cfg.batch_size);
                    eval = mse_batch(params, data, batch, cfg.workers);
                } else {
                    eval = on_grid ? l1_kernel_eval_grid(params, target_weights, window.dt)
                                   : l1_kernel_eval(params, target_weights);
                }
            } catch (const NumericError&) {
                eval.loss = kNaN;
            } catch (const DomainError&) {
                eval.loss = kNaN;
            }
            if (!std::isfinite(eval.loss) || !all_finite(eval.grad)) {
                result.status = TrainStatus::Diverged;
                result.diverged_step = step;
                result.params = params;
                return result;
            }
            if (!cfg.train_bias) std::fill_n(eval.grad.begin() + L.b(), L.m, 0.0);

            const auto record = make_record(step, params, eval, cfg, cfg.seq_len);
            result.telemetry.push_back(record);
            if (sink) sink(record);

            if (cfg.optimizer == OptimizerKind::SGD) {
                for (std::size_t i = 0; i < L.size(); ++i) theta[i] -= cfg.lr * eval.grad[i];
            } else {
                const double t = static_cast<double>(step + 1);
                const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
                const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
                for (std::size_t i = 0; i < L.size(); ++i) {
                    const double g = eval.grad[i];
                    moment1[i] = cfg.adam_beta1 * moment1[i] + (1.0 - cfg.adam_beta1) * g;
                    moment2[i] = cfg.adam_beta2 * moment2[i] + (1.0 - cfg.adam_beta2) * g * g;
                    theta[i] -= cfg.lr * (moment1[i] / c1) / (std::sqrt(moment2[i] / c2) + cfg.adam_eps);
                }
            }
            if (!all_finite(theta)) {
                result.status = TrainStatus::Diverged;
                result.diverged_step = step + 1;
                result.params = params;
                return result;
            }
            unflatten(theta, L, params);
            note_marginal();
        }
    }
    result.params = params;
    return result;
}

double dataset_loss(const SSMParams& p, const Dataset& data, int workers) {
    const std::size_t chunks = (data.size + kChunk - 1) / kChunk;
    std::vector<double> partial(chunks, 0.0);
    parallel_for(chunks, workers, [&](std::size_t ci) {
        const std::size_t hi = std::min(data.size, (ci + 1) * kChunk);
        for (std::size_t n = ci * kChunk; n < hi; ++n) {
            const auto traj = forward(p, as_column(data.input(n)));
            const auto label = data.label(n);
            for (std::size_t k = 0; k < data.seq_len; ++k) {
                const double r = traj.y[k] - label[k];
                partial[ci] += r * r;
            }
        }
    });
    const double sum = std::accumulate(partial.begin(), partial.end(), 0.0);
    return sum / static_cast<double>(data.size * data.seq_len);
}

QuadratureConfig training_window(std::size_t seq_len, double dt) {
    QuadratureConfig quad;
    quad.dt = dt / 100.0;
    quad.horizon = static_cast<double>(seq_len) * dt;
    quad.include_tail = false;
    return quad;
}

double kernel_distance_to_target(const SSMParams& params, const MemoryKernel& target, const QuadratureConfig& quad) {
    return kernel_l1_distance(target, model_kernel(params), quad);
}

void write_telemetry_header(std::ostream& out) { out << "step,loss,gow_max,gow_min,max_eig,weight_norm\n"; }

void write_telemetry_row(std::ostream& out, const TelemetryRecord& r) {
    out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.gow_max) << ','
        << format_double(r.gow_min) << ',' << format_double(r.max_eig) << ',' << format_double(r.weight_norm)
        << '\n';
}

} // namespace ssmlab
