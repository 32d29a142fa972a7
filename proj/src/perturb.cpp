#include "ssmlab/perturb.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "ssmlab/errors.hpp"
#include "ssmlab/parallel.hpp"
#include "ssmlab/random.hpp"
#include "ssmlab/text.hpp"

namespace ssmlab {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::size_t direction_size(const SSMParams& p, PerturbSet set) {
    return set == PerturbSet::RecurrentOnly ? p.width() : p.width() * (p.input_dim() + 3);
}

std::vector<std::size_t> group_sizes(const SSMParams& p, PerturbSet set) {
    if (set == PerturbSet::RecurrentOnly) return {p.width()};
    return {p.width(), p.width() * p.input_dim(), p.width(), p.width()};
}

QuadratureConfig window(const SSMParams& p, const PerturbConfig& cfg) {
    if (cfg.quadrature) return *cfg.quadrature;
    QuadratureConfig quad;
    quad.dt = p.dt / 100.0;
    quad.horizon = static_cast<double>(cfg.window_steps) * p.dt;
    quad.include_tail = false;
    return quad;
}

Matrix as_column(std::span<const double> x) {
    Matrix out(x.size(), 1);
    std::copy(x.begin(), x.end(), out.data.begin());
    return out;
}

// Probe inputs and the target's responses, shared by every perturbed model.
struct Probes {
    std::vector<std::vector<double>> inputs;
    std::vector<std::vector<double>> target;
    double dt = 1.0;
};

Probes make_probes(const AnyKernel& target, const PerturbConfig& cfg, double dt) {
    Probes probes;
    probes.dt = dt;
    auto rng = make_rng(cfg.seed, 5);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t p = 0; p < cfg.probe_count; ++p) {
        std::vector<double> x(cfg.window_steps, 1.0);
        if (p > 0) {
            for (double& v : x) v = normal(rng);
        }
        probes.target.push_back(apply_linear_functional(target, x, dt));
        probes.inputs.push_back(std::move(x));
    }
    return probes;
}

// sup_t of the operator-norm error plus the operator-norm error of the time
// derivative, over the probe set.
double sobolev_error(const SSMParams& params, const Probes& probes) {
    const std::size_t K = probes.inputs.empty() ? 0 : probes.inputs.front().size();
    if (K == 0) return 0.0;
    const auto zero = forward(params, Matrix(K, params.input_dim())).y;
    std::vector<double> level(K, 0.0), slope(K, 0.0);
    for (std::size_t p = 0; p < probes.inputs.size(); ++p) {
        const auto& x = probes.inputs[p];
        double sup_x = 0.0;
        for (double v : x) sup_x = std::max(sup_x, std::abs(v));
        const auto y = forward(params, as_column(x)).y;
        std::vector<double> e(K);
        for (std::size_t t = 0; t < K; ++t) e[t] = y[t] - probes.target[p][t];
        for (std::size_t t = 0; t < K; ++t) {
            level[t] = std::max(level[t], std::abs(e[t]) / (sup_x + 1.0));
            if (t + 1 < K) slope[t] = std::max(slope[t], std::abs(e[t + 1] - e[t]) / probes.dt / (sup_x + 1.0));
        }
    }
    double worst = 0.0;
    for (std::size_t t = 0; t < K; ++t) {
        double total = level[t] + std::abs(zero[t]);
        if (t + 1 < K) total += slope[t] + std::abs(zero[t + 1] - zero[t]) / probes.dt;
        worst = std::max(worst, total);
    }
    return worst;
}

bool integrable(const SSMParams& params) {
    try {
        for (double l : eigenvalues(params)) {
            const bool ok = params.mode() == TimeMode::Continuous ? l < 0.0 : std::abs(l) < 1.0;
            if (!ok) return false;
        }
    } catch (const DomainError&) {
        return false;
    }
    return true;
}

double error_with(const SSMParams& params, const AnyKernel& target, const PerturbConfig& cfg, const Probes* probes) {
    if (!integrable(params)) return kInf;
    try {
        if (cfg.metric == ErrorMetric::L1Kernel) return kernel_l1_distance(target, model_kernel(params), window(params, cfg));
        return sobolev_error(params, *probes);
    } catch (const NumericError&) {
        return kInf;
    } catch (const DomainError&) {
        return kInf;
    }
}

void check_metric(const SSMParams& params, const PerturbConfig& cfg) {
    if (cfg.metric == ErrorMetric::L1Kernel && params.activation != Activation::Identity)
        throw ConfigError("perturb: the l1-kernel metric needs an Identity-activation model");
}

} // namespace

std::vector<double> default_beta_grid() { return parse_beta_grid("geo:1e-3:sqrt2:21"); }

std::vector<double> parse_beta_grid(std::string_view spec) {
    std::vector<double> out;
    if (spec.starts_with("geo:")) {
        const auto parts = split(spec.substr(4), ':');
        if (parts.size() != 3) throw ConfigError("beta grid must be geo:start:ratio:count");
        const double start = parse_double(parts[0], "beta grid start");
        const double ratio = parts[1] == "sqrt2" ? std::sqrt(2.0) : parse_double(parts[1], "beta grid ratio");
        const double count = parse_double(parts[2], "beta grid count");
        if (!(start > 0.0) || !(ratio > 1.0) || count < 1 || count != std::floor(count))
            throw ConfigError("beta grid needs start > 0, ratio > 1 and a positive integer count");
        out.push_back(0.0);
        for (int j = 0; j < static_cast<int>(count); ++j) out.push_back(start * std::pow(ratio, j));
    } else {
        for (auto part : split(spec, ',')) {
            while (!part.empty() && part.front() == ' ') part.remove_prefix(1);
            while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
            out.push_back(parse_double(part, "beta"));
        }
    }
    return out;
}

void validate(const PerturbConfig& cfg) {
    if (cfg.betas.empty() || cfg.betas.front() != 0.0) throw ConfigError("perturb: beta grid must start at 0");
    for (std::size_t i = 1; i < cfg.betas.size(); ++i) {
        if (!(cfg.betas[i] > cfg.betas[i - 1]) || !std::isfinite(cfg.betas[i]))
            throw ConfigError("perturb: beta grid must be strictly ascending and finite");
    }
    if (cfg.samples_per_beta < 1) throw ConfigError("perturb: samples_per_beta must be >= 1");
    if (cfg.window_steps < 2) throw ConfigError("perturb: window_steps must be >= 2");
    if (cfg.metric == ErrorMetric::SobolevEmpirical && cfg.probe_count < 1)
        throw ConfigError("perturb: probe_count must be >= 1");
    if (cfg.workers < 1) throw ConfigError("perturb: workers must be >= 1");
}

SSMParams perturb_params(const SSMParams& params, std::span<const double> direction, double beta,
                         const PerturbConfig& cfg) {
    if (direction.size() != direction_size(params, cfg.perturb_set))
        throw ContractError("perturb: direction has the wrong length");
    SSMParams out = params;
    const std::size_t m = params.width();
    if (cfg.space == PerturbSpace::Eigenvalue) {
        out.w = eigenvalues(params);
        out.scheme = make_scheme(Family::Direct, params.mode());
    }
    for (std::size_t i = 0; i < m; ++i) out.w[i] += beta * direction[i];
    if (cfg.perturb_set == PerturbSet::AllWeights) {
        std::size_t at = m;
        for (double& u : out.U.data) u += beta * direction[at++];
        for (double& b : out.b) b += beta * direction[at++];
        for (double& c : out.c) c += beta * direction[at++];
    }
    return out;
}

double model_error(const SSMParams& params, const AnyKernel& target, const PerturbConfig& cfg) {
    check_metric(params, cfg);
    if (cfg.metric == ErrorMetric::L1Kernel) return error_with(params, target, cfg, nullptr);
    const Probes probes = make_probes(target, cfg, params.dt);
    return error_with(params, target, cfg, &probes);
}

PerturbationEstimate estimate_perturbation_error(const SSMParams& params, const AnyKernel& target, double beta,
                                                 const PerturbConfig& cfg) {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("perturb: beta must be finite and >= 0");
    if (cfg.samples_per_beta < 1) throw ConfigError("perturb: samples_per_beta must be >= 1");
    validate(params);
    check_metric(params, cfg);
    std::optional<Probes> probes;
    if (cfg.metric == ErrorMetric::SobolevEmpirical) probes = make_probes(target, cfg, params.dt);
    const Probes* probe_ptr = probes ? &*probes : nullptr;

    const std::size_t n = direction_size(params, cfg.perturb_set);
    if (beta == 0.0) {
        const std::vector<double> none(n, 0.0);
        return {error_with(params, target, cfg, probe_ptr), 1, fnv1a(none)};
    }

    // Antithetic pairs: even samples draw, odd samples negate.
    const auto sizes = group_sizes(params, cfg.perturb_set);
    std::vector<std::vector<double>> directions(cfg.samples_per_beta, std::vector<double>(n));
    auto rng = make_rng(cfg.seed, 4, std::bit_cast<std::uint64_t>(beta));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t s = 0; s < cfg.samples_per_beta; ++s) {
        auto& d = directions[s];
        if (s % 2 == 1) {
            for (std::size_t i = 0; i < n; ++i) d[i] = -directions[s - 1][i];
            continue;
        }
        std::size_t at = 0;
        for (std::size_t size : sizes) {
            double norm = 0.0;
            do {
                norm = 0.0;
                for (std::size_t i = at; i < at + size; ++i) {
                    d[i] = normal(rng);
                    norm += d[i] * d[i];
                }
            } while (norm == 0.0);
            norm = std::sqrt(norm);
            for (std::size_t i = at; i < at + size; ++i) d[i] /= norm;
            at += size;
        }
    }

    std::vector<double> errors(cfg.samples_per_beta);
    parallel_for(cfg.samples_per_beta, cfg.workers, [&](std::size_t s) {
        errors[s] = error_with(perturb_params(params, directions[s], beta, cfg), target, cfg, probe_ptr);
    });
    const auto best = static_cast<std::size_t>(std::max_element(errors.begin(), errors.end()) - errors.begin());
    return {errors[best], cfg.samples_per_beta, fnv1a(directions[best])};
}

PerturbationReport sweep(const std::vector<SSMParams>& checkpoints, const MemoryKernel& target,
                         const PerturbConfig& cfg, std::vector<std::string> ids) {
    validate(cfg);
    if (checkpoints.empty()) throw ConfigError("perturb: no checkpoints");
    if (!ids.empty() && ids.size() != checkpoints.size()) throw ContractError("perturb: one id per checkpoint");
    std::vector<std::size_t> order(checkpoints.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return checkpoints[a].width() < checkpoints[b].width(); });
    for (std::size_t i = 1; i < order.size(); ++i) {
        if (checkpoints[order[i]].width() == checkpoints[order[i - 1]].width())
            throw ConfigError("perturb: checkpoints must have distinct widths");
    }

    PerturbationReport report;
    report.metric = std::string(metric_name(cfg.metric));
    report.seed = cfg.seed;
    for (std::size_t idx : order) {
        if (!ids.empty()) report.checkpoint_ids.push_back(ids[idx]);
        const auto& params = checkpoints[idx];
        double envelope = -kInf;
        for (double beta : cfg.betas) {
            const auto est = estimate_perturbation_error(params, target, beta, cfg);
            PerturbationRow row;
            row.m = params.width();
            row.beta = beta;
            row.e_hat_raw = est.value;
            if (est.value < envelope) ++report.envelope_corrections;
            envelope = std::max(envelope, est.value);
            row.e_hat = envelope;
            row.samples = est.samples;
            row.direction_hash = est.direction_hash;
            report.rows.push_back(row);
        }
    }

    const std::size_t nb = cfg.betas.size();
    for (std::size_t c = 0; c + 1 < order.size(); ++c) {
        Crossing cross{report.rows[c * nb].m, report.rows[(c + 1) * nb].m, std::nullopt};
        for (std::size_t j = 0; j < nb; ++j) {
            if (report.rows[(c + 1) * nb + j].e_hat >= report.rows[c * nb + j].e_hat) {
                cross.beta = cfg.betas[j];
                report.rows[c * nb + j].crossing = true;
                break;
            }
        }
        report.crossings.push_back(cross);
    }
    return report;
}

void write_report_csv(std::ostream& out, const PerturbationReport& report) {
    out << "m,beta,e_hat,e_hat_raw,samples,crossing_flag\n";
    for (const auto& row : report.rows) {
        out << row.m << ',' << format_double(row.beta) << ',' << format_double(row.e_hat) << ','
            << format_double(row.e_hat_raw) << ',' << row.samples << ',' << (row.crossing ? 1 : 0) << '\n';
    }
}

std::string_view metric_name(ErrorMetric metric) {
    return metric == ErrorMetric::L1Kernel ? "l1_kernel" : "sobolev_empirical";
}

ErrorMetric parse_metric(std::string_view name) {
    if (name == "l1_kernel" || name == "l1") return ErrorMetric::L1Kernel;
    if (name == "sobolev_empirical" || name == "sobolev") return ErrorMetric::SobolevEmpirical;
    throw ConfigError("unknown error metric '" + std::string(name) + "' (l1_kernel, sobolev_empirical)");
}

std::string_view perturb_set_name(PerturbSet set) {
    return set == PerturbSet::RecurrentOnly ? "recurrent_only" : "all_weights";
}

PerturbSet parse_perturb_set(std::string_view name) {
    if (name == "recurrent_only" || name == "recurrent") return PerturbSet::RecurrentOnly;
    if (name == "all_weights" || name == "all") return PerturbSet::AllWeights;
    throw ConfigError("unknown perturb set '" + std::string(name) + "' (recurrent_only, all_weights)");
}

std::string_view perturb_space_name(PerturbSpace space) {
    return space == PerturbSpace::Weight ? "weight" : "eigenvalue";
}

PerturbSpace parse_perturb_space(std::string_view name) {
    if (name == "weight" || name == "w") return PerturbSpace::Weight;
    if (name == "eigenvalue" || name == "lambda") return PerturbSpace::Eigenvalue;
    throw ConfigError("unknown perturbation space '" + std::string(name) + "' (weight, eigenvalue)");
}

} // namespace ssmlab
