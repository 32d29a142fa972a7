#include "ssmlab/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

#include "ssmlab/errors.hpp"
#include "ssmlab/parallel.hpp"

namespace ssmlab {
namespace {

// Per-channel step map h <- decay * h + gain * v and its lambda-derivatives.
struct StepCoefficients {
    std::vector<double> decay;
    std::vector<double> gain;
    std::vector<double> ddecay;
    std::vector<double> dgain;
};

// expm1(z) / z and its derivative, with series near z = 0.
double phi1(double z) { return std::abs(z) < 1e-8 ? 1.0 + 0.5 * z : std::expm1(z) / z; }

double phi1_prime(double z) {
    if (std::abs(z) < 1e-2) return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0 + z * z * z * z / 144.0;
    return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

StepCoefficients step_coefficients(const SSMParams& p) {
    const std::size_t m = p.width();
    StepCoefficients s{std::vector<double>(m), std::vector<double>(m), std::vector<double>(m), std::vector<double>(m)};
    for (std::size_t i = 0; i < m; ++i) {
        const double lambda = apply(p.scheme, p.w[i]);
        if (p.mode() == TimeMode::Discrete) {
            s.decay[i] = lambda;
            s.gain[i] = 1.0;
            s.ddecay[i] = 1.0;
            s.dgain[i] = 0.0;
        } else {
            const double z = lambda * p.dt;
            s.decay[i] = std::exp(z);
            s.gain[i] = p.dt * phi1(z);
            s.ddecay[i] = p.dt * s.decay[i];
            s.dgain[i] = p.dt * p.dt * phi1_prime(z);
        }
    }
    return s;
}

void check_input(const SSMParams& p, const Matrix& x) {
    validate(p);
    if (x.cols != p.input_dim())
        throw ContractError("input has " + std::to_string(x.cols) + " channels, model expects " +
                            std::to_string(p.input_dim()));
    for (double v : x.data) {
        if (!std::isfinite(v)) throw DomainError("non-finite input sample");
    }
}

// v = U x_k + b for one step.
void drive(const SSMParams& p, const Matrix& x, std::size_t k, std::span<double> v) {
    for (std::size_t i = 0; i < p.width(); ++i) {
        double acc = p.b[i];
        for (std::size_t j = 0; j < x.cols; ++j) acc += p.U(i, j) * x(k, j);
        v[i] = acc;
    }
}

double readout(const SSMParams& p, std::span<const double> h) {
    double y = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) y += p.c[i] * activate(p.activation, h[i]);
    return y;
}

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

} // namespace

double activate(Activation act, double z) {
    switch (act) {
    case Activation::Tanh: return std::tanh(z);
    case Activation::Identity: return z;
    case Activation::Sigmoid: return 0.5 * std::tanh(0.5 * z);
    case Activation::Softsign: return z / (1.0 + std::abs(z));
    }
    return z;
}

double activate_derivative(Activation act, double z) {
    switch (act) {
    case Activation::Tanh: {
        const double ch = std::cosh(z);
        return 1.0 / (ch * ch);
    }
    case Activation::Identity: return 1.0;
    case Activation::Sigmoid: {
        const double ch = std::cosh(0.5 * z);
        return 0.25 / (ch * ch);
    }
    case Activation::Softsign: {
        const double d = 1.0 + std::abs(z);
        return 1.0 / (d * d);
    }
    }
    return 1.0;
}

double lipschitz_constant(Activation act) { return act == Activation::Sigmoid ? 0.25 : 1.0; }

std::string_view activation_name(Activation act) {
    switch (act) {
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softsign: return "softsign";
    }
    return "?";
}

Activation parse_activation(std::string_view name) {
    for (Activation a : {Activation::Tanh, Activation::Identity, Activation::Sigmoid, Activation::Softsign}) {
        if (name == activation_name(a)) return a;
    }
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

void validate(const SSMParams& p) {
    validate(p.scheme);
    const std::size_t m = p.width();
    if (p.U.rows != m || p.b.size() != m || p.c.size() != m || p.U.data.size() != m * p.U.cols)
        throw ContractError("SSM parameter dimensions are inconsistent");
    if (p.U.cols == 0) throw ContractError("SSM needs at least one input channel");
    if (!(p.dt > 0.0) || !std::isfinite(p.dt)) throw ConfigError("SSM step dt must be positive");
    auto finite = [](const std::vector<double>& v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    if (!finite(p.w) || !finite(p.U.data) || !finite(p.b) || !finite(p.c))
        throw ConfigError("SSM parameters contain non-finite entries");
}

std::vector<double> eigenvalues(const SSMParams& p) {
    std::vector<double> out(p.width());
    std::transform(p.w.begin(), p.w.end(), out.begin(), [&](double w) { return apply(p.scheme, w); });
    return out;
}

bool has_stable_eigenvalues(const SSMParams& p) {
    const auto lambda = eigenvalues(p);
    return std::all_of(lambda.begin(), lambda.end(), [&](double l) { return is_stable_eigenvalue(p.mode(), l); });
}

Trajectory forward(const SSMParams& p, const Matrix& x) {
    check_input(p, x);
    const std::size_t m = p.width();
    const std::size_t K = x.rows;
    const auto coeff = step_coefficients(p);
    Trajectory out{std::vector<double>(K), Matrix(K, m)};
    std::vector<double> h(m, 0.0), v(m);
    for (std::size_t k = 0; k < K; ++k) {
        std::copy(h.begin(), h.end(), out.h.row(k).begin());
        out.y[k] = readout(p, h);
        drive(p, x, k, v);
        for (std::size_t i = 0; i < m; ++i) {
            h[i] = coeff.decay[i] * h[i] + coeff.gain[i] * v[i];
            if (!std::isfinite(h[i]) && k + 1 < K) throw NumericError("hidden state overflow", k + 1);
        }
    }
    return out;
}

Trajectory forward_scan(const SSMParams& p, const Matrix& x, int workers) {
    check_input(p, x);
    const std::size_t m = p.width();
    const std::size_t K = x.rows;
    const auto coeff = step_coefficients(p);
    std::size_t n = 1;
    while (n < K) n <<= 1;

    // Element k is the affine map h -> decay * h + gain * v_k; identity pads.
    Matrix mul(n, m, 1.0), add(n, m, 0.0);
    parallel_for(K, workers, [&](std::size_t k) {
        auto v = add.row(k);
        drive(p, x, k, v);
        for (std::size_t i = 0; i < m; ++i) {
            v[i] *= coeff.gain[i];
            mul(k, i) = coeff.decay[i];
        }
    });

    // Applying (a1, u1) then (a2, u2) gives (a1 a2, a2 u1 + u2).
    auto combine_into = [&](std::size_t first, std::size_t second) {
        for (std::size_t i = 0; i < m; ++i) {
            add(second, i) = mul(second, i) * add(first, i) + add(second, i);
            mul(second, i) = mul(first, i) * mul(second, i);
        }
    };

    for (std::size_t stride = 1; stride < n; stride <<= 1) {
        parallel_for(n / (2 * stride), workers, [&](std::size_t node) {
            const std::size_t base = node * 2 * stride;
            combine_into(base + stride - 1, base + 2 * stride - 1);
        });
    }
    for (std::size_t i = 0; i < m; ++i) {
        mul(n - 1, i) = 1.0;
        add(n - 1, i) = 0.0;
    }
    for (std::size_t stride = n >> 1; stride >= 1; stride >>= 1) {
        parallel_for(n / (2 * stride), workers, [&](std::size_t node) {
            const std::size_t base = node * 2 * stride;
            const std::size_t left = base + stride - 1;
            const std::size_t right = base + 2 * stride - 1;
            for (std::size_t i = 0; i < m; ++i) {
                const double left_mul = mul(left, i);
                const double left_add = add(left, i);
                mul(left, i) = mul(right, i);
                add(left, i) = add(right, i);
                // prefix(right) = prefix(parent) followed by total(left)
                add(right, i) = left_mul * add(right, i) + left_add;
                mul(right, i) = mul(right, i) * left_mul;
            }
        });
        if (stride == 1) break;
    }

    Trajectory out{std::vector<double>(K), Matrix(K, m)};
    parallel_for(K, workers, [&](std::size_t k) {
        auto h = out.h.row(k);
        for (std::size_t i = 0; i < m; ++i) h[i] = add(k, i);
        out.y[k] = readout(p, h);
    });
    for (std::size_t k = 0; k < K; ++k) {
        for (double hv : out.h.row(k)) {
            if (!std::isfinite(hv)) throw NumericError("hidden state overflow", k);
        }
    }
    return out;
}

Gradients backward(const SSMParams& p, const Matrix& x, const Trajectory& traj, std::span<const double> dloss_dy) {
    check_input(p, x);
    const std::size_t m = p.width();
    const std::size_t K = x.rows;
    if (dloss_dy.size() != K || traj.y.size() != K || traj.h.rows != K || traj.h.cols != m)
        throw ContractError("backward: trajectory or loss gradient does not match the input length");

    const auto coeff = step_coefficients(p);
    Gradients g{std::vector<double>(m, 0.0), Matrix(m, p.input_dim()), std::vector<double>(m, 0.0),
                std::vector<double>(m, 0.0), std::vector<double>(m, 0.0)};
    std::vector<double> adj(m, 0.0), v(m);
    std::vector<double> gdecay(m, 0.0), ggain(m, 0.0);

    for (std::size_t k = K; k-- > 0;) {
        const auto h = traj.h.row(k);
        for (std::size_t i = 0; i < m; ++i) {
            g.c[i] += activate(p.activation, h[i]) * dloss_dy[k];
            adj[i] = coeff.decay[i] * adj[i] + activate_derivative(p.activation, h[i]) * p.c[i] * dloss_dy[k];
        }
        if (k == 0) break;
        // adj is dLoss/dh_k; h_k = decay * h_{k-1} + gain * v_{k-1}.
        const auto hprev = traj.h.row(k - 1);
        drive(p, x, k - 1, v);
        for (std::size_t i = 0; i < m; ++i) {
            gdecay[i] += adj[i] * hprev[i];
            ggain[i] += adj[i] * v[i];
            const double dv = adj[i] * coeff.gain[i];
            g.b[i] += dv;
            for (std::size_t j = 0; j < x.cols; ++j) g.U(i, j) += dv * x(k - 1, j);
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        g.lambda[i] = gdecay[i] * coeff.ddecay[i] + ggain[i] * coeff.dgain[i];
        g.w[i] = derivative(p.scheme, p.w[i]) * g.lambda[i];
    }
    return g;
}

double weight_norm(const SSMParams& p) {
    const auto lambda = eigenvalues(p);
    return std::max({norm2(lambda), norm2(p.U.data), norm2(p.b), norm2(p.c)});
}

double max_eigenvalue(const SSMParams& p) {
    const auto lambda = eigenvalues(p);
    if (lambda.empty()) return 0.0;
    if (p.mode() == TimeMode::Continuous) return *std::max_element(lambda.begin(), lambda.end());
    double best = 0.0;
    for (double l : lambda) best = std::max(best, std::abs(l));
    return best;
}

ModelKernel model_kernel(const SSMParams& p, std::size_t input) {
    validate(p);
    if (input >= p.input_dim()) throw ContractError("model_kernel: input channel out of range");
    ModelKernel k;
    k.lambda = eigenvalues(p);
    k.c.resize(p.width());
    for (std::size_t i = 0; i < p.width(); ++i) k.c[i] = p.c[i] * p.U(i, input);
    k.mode = p.mode();
    k.dt = p.dt;
    return k;
}

std::vector<double> memory_function_estimate(const SSMParams& p, std::size_t steps) {
    if (steps < 2) return {};
    const Matrix zero(steps, p.input_dim(), 0.0);
    const auto baseline = forward(p, zero).y;
    std::vector<double> best(steps - 1, 0.0);
    for (int j = -3; j <= 6; ++j) {
        for (double sign : {1.0, -1.0}) {
            const double amp = sign * std::ldexp(1.0, j);
            const auto y = forward(p, Matrix(steps, p.input_dim(), amp)).y;
            for (std::size_t k = 0; k + 1 < steps; ++k) {
                const double slope = ((y[k + 1] - baseline[k + 1]) - (y[k] - baseline[k])) / p.dt;
                best[k] = std::max(best[k], std::abs(slope) / (std::abs(amp) + 1.0));
            }
        }
    }
    return best;
}

std::string checkpoint_json(const SSMParams& p) {
    validate(p);
    nlohmann::ordered_json j;
    j["scheme"] = to_string(p.scheme);
    j["time_mode"] = std::string(mode_name(p.mode()));
    j["dt"] = p.dt;
    j["activation"] = std::string(activation_name(p.activation));
    j["m"] = p.width();
    j["d"] = p.input_dim();
    j["w"] = p.w;
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < p.U.rows; ++i) {
        const auto r = p.U.row(i);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    j["U"] = std::move(rows);
    j["b"] = p.b;
    j["c"] = p.c;
    return j.dump(2) + "\n";
}

SSMParams params_from_json(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    try {
        SSMParams p;
        p.scheme = parse_scheme(j.at("scheme").get<std::string>());
        if (parse_time_mode(j.at("time_mode").get<std::string>()) != p.scheme.mode)
            throw ConfigError("checkpoint time_mode disagrees with its scheme");
        p.dt = j.at("dt").get<double>();
        p.activation = parse_activation(j.at("activation").get<std::string>());
        const auto m = j.at("m").get<std::size_t>();
        const auto d = j.at("d").get<std::size_t>();
        p.w = j.at("w").get<std::vector<double>>();
        p.b = j.at("b").get<std::vector<double>>();
        p.c = j.at("c").get<std::vector<double>>();
        const auto rows = j.at("U").get<std::vector<std::vector<double>>>();
        if (rows.size() != m) throw ContractError("checkpoint U has the wrong number of rows");
        p.U = Matrix(m, d);
        for (std::size_t i = 0; i < m; ++i) {
            if (rows[i].size() != d) throw ContractError("checkpoint U has the wrong number of columns");
            std::copy(rows[i].begin(), rows[i].end(), p.U.row(i).begin());
        }
        if (p.w.size() != m) throw ContractError("checkpoint w does not have m entries");
        validate(p);
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed checkpoint: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const SSMParams& params) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write checkpoint " + path.string());
    out << checkpoint_json(params);
}

SSMParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint " + path.string());
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return params_from_json(text);
}

} // namespace ssmlab
