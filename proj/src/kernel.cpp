#include "ssmlab/kernel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "ssmlab/errors.hpp"

namespace ssmlab {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::size_t kBlock = 1024;
constexpr int kMaxHorizonDoublings = 12;

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

bool is_discrete(const AnyKernel& k) {
    const auto* model = std::get_if<ModelKernel>(&k);
    return model != nullptr && model->mode == TimeMode::Discrete;
}

void validate_any(const AnyKernel& k) {
    std::visit([](const auto& kk) { validate(kk); }, k);
}

// Integral of the piecewise-linear interpolant over [0, x], clamped to the table.
double tabulated_primitive(const Tabulated& tab, double x) {
    if (x <= 0.0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < tab.t.size(); ++i) {
        const double t0 = tab.t[i];
        const double t1 = tab.t[i + 1];
        if (x >= t1) {
            acc += 0.5 * (tab.values[i] + tab.values[i + 1]) * (t1 - t0);
            continue;
        }
        const double frac = (x - t0) / (t1 - t0);
        const double vx = tab.values[i] + frac * (tab.values[i + 1] - tab.values[i]);
        acc += 0.5 * (tab.values[i] + vx) * (x - t0);
        break;
    }
    return acc;
}

double tabulated_value(const Tabulated& tab, double t) {
    if (t > tab.t.back()) return 0.0;
    const auto it = std::upper_bound(tab.t.begin(), tab.t.end(), t);
    if (it == tab.t.end()) return tab.values.back();
    const std::size_t hi = static_cast<std::size_t>(it - tab.t.begin());
    const std::size_t lo = hi - 1;
    const double frac = (t - tab.t[lo]) / (tab.t[hi] - tab.t[lo]);
    return tab.values[lo] + frac * (tab.values[hi] - tab.values[lo]);
}

// Value at t for continuous-time kernels, zero past a tabulated horizon.
double value_or_zero(const AnyKernel& k, double t) {
    if (const auto* mk = std::get_if<MemoryKernel>(&k)) {
        if (const auto* tab = std::get_if<Tabulated>(&mk->kind())) return tabulated_value(*tab, t);
        return eval_kernel(*mk, t);
    }
    const auto& model = std::get<ModelKernel>(k);
    double sum = 0.0;
    for (std::size_t i = 0; i < model.c.size(); ++i) sum += model.c[i] * std::exp(model.lambda[i] * t);
    return sum;
}

// Fills out[i] = k((j0 + i) dt) for a continuous-time kernel.
void eval_block(const AnyKernel& k, std::size_t j0, std::size_t count, double dt, double* out) {
    if (const auto* model = std::get_if<ModelKernel>(&k)) {
        std::fill(out, out + count, 0.0);
        const double t0 = static_cast<double>(j0) * dt;
        for (std::size_t i = 0; i < model->c.size(); ++i) {
            const double ratio = std::exp(model->lambda[i] * dt);
            double term = model->c[i] * std::exp(model->lambda[i] * t0);
            for (std::size_t j = 0; j < count; ++j) {
                out[j] += term;
                term *= ratio;
            }
        }
        return;
    }
    for (std::size_t j = 0; j < count; ++j) out[j] = value_or_zero(k, static_cast<double>(j0 + j) * dt);
}

// int_T^inf k for a continuous-time kernel.
double continuous_tail(const AnyKernel& k, double T) {
    return std::visit(
        Overloaded{
            [&](const MemoryKernel& mk) {
                return std::visit(Overloaded{
                                      [&](const PolyDecay& p) { return std::pow(T + 1.0, 1.0 - p.gamma) / (p.gamma - 1.0); },
                                      [&](const ExpDecay& e) { return std::exp(-e.rate * T) / e.rate; },
                                      [&](const Tabulated& tab) {
                                          return tabulated_primitive(tab, tab.t.back()) - tabulated_primitive(tab, T);
                                      },
                                  },
                                  mk.kind());
            },
            [&](const ModelKernel& model) {
                double sum = 0.0;
                for (std::size_t i = 0; i < model.c.size(); ++i)
                    sum += model.c[i] * std::exp(model.lambda[i] * T) / -model.lambda[i];
                return sum;
            },
        },
        k);
}

// Upper bound on int_T^inf |k| for model kernels; zero for the others, whose
// tails are single-signed or end at the table horizon.
double model_tail_mass(const AnyKernel& k, double T) {
    const auto* model = std::get_if<ModelKernel>(&k);
    if (model == nullptr) return 0.0;
    double sum = 0.0;
    if (model->mode == TimeMode::Continuous) {
        for (std::size_t i = 0; i < model->c.size(); ++i)
            sum += std::abs(model->c[i]) * std::exp(model->lambda[i] * T) / std::abs(model->lambda[i]);
    } else {
        const double steps = std::round(T / model->dt);
        for (std::size_t i = 0; i < model->c.size(); ++i) {
            const double r = std::abs(model->lambda[i]);
            sum += std::abs(model->c[i]) * std::pow(r, steps) / (1.0 - r);
        }
    }
    return sum;
}

// Horizon at which every operand's tail mass is within tolerance.
double resolve_horizon(std::initializer_list<const AnyKernel*> kernels, const QuadratureConfig& quad) {
    double T = quad.horizon;
    for (const AnyKernel* k : kernels) {
        if (const auto* mk = std::get_if<MemoryKernel>(k)) {
            if (const auto* tab = std::get_if<Tabulated>(&mk->kind()))
                T = std::max(T, std::ceil(tab->t.back() / quad.dt) * quad.dt);
        }
    }
    if (!quad.include_tail) return T;
    for (const AnyKernel* k : kernels) {
        if (const auto* model = std::get_if<ModelKernel>(k); model && !is_integrable(*model))
            throw DomainError("kernel is not integrable on [0, inf)");
    }
    for (int doubling = 0;; ++doubling) {
        double mass = 0.0;
        for (const AnyKernel* k : kernels) mass += model_tail_mass(*k, T);
        if (mass <= quad.tail_tolerance) return T;
        if (doubling == kMaxHorizonDoublings)
            throw DomainError("kernel tail mass stays above tolerance within 2^12 times the horizon");
        T *= 2.0;
    }
}

double continuous_distance(const AnyKernel& a, const AnyKernel& b, const QuadratureConfig& quad) {
    const double T = resolve_horizon({&a, &b}, quad);
    const auto n = static_cast<std::size_t>(std::llround(T / quad.dt));
    std::vector<double> va(kBlock), vb(kBlock);
    double sum = 0.0;
    for (std::size_t j0 = 0; j0 <= n; j0 += kBlock) {
        const std::size_t count = std::min(kBlock, n + 1 - j0);
        eval_block(a, j0, count, quad.dt, va.data());
        eval_block(b, j0, count, quad.dt, vb.data());
        for (std::size_t j = 0; j < count; ++j) {
            const double weight = (j0 + j == 0 || j0 + j == n) ? 0.5 : 1.0;
            sum += weight * std::abs(va[j] - vb[j]);
        }
    }
    sum *= quad.dt;
    if (quad.include_tail) sum += std::abs(continuous_tail(a, T) - continuous_tail(b, T));
    return sum;
}

double discrete_tail(const ModelKernel& k, double steps) {
    double sum = 0.0;
    for (std::size_t i = 0; i < k.c.size(); ++i) sum += k.c[i] * std::pow(k.lambda[i], steps) / (1.0 - k.lambda[i]);
    return sum;
}

double lag_distance(const AnyKernel& a, const AnyKernel& b, const QuadratureConfig& quad) {
    double step = 0.0;
    for (const AnyKernel* k : {&a, &b}) {
        if (!is_discrete(*k)) continue;
        const double kdt = std::get<ModelKernel>(*k).dt;
        if (step != 0.0 && step != kdt) throw ContractError("discrete kernels with different step sizes");
        step = kdt;
    }
    QuadratureConfig stepped = quad;
    stepped.dt = step;
    stepped.horizon = std::ceil(quad.horizon / step) * step;
    const double T = resolve_horizon({&a, &b}, stepped);
    const auto n = static_cast<std::size_t>(std::llround(T / step));
    const auto wa = lag_weights(a, n + 1, step);
    const auto wb = lag_weights(b, n + 1, step);
    double sum = 0.0;
    for (std::size_t j = 1; j <= n; ++j) sum += std::abs(wa[j] - wb[j]);
    if (quad.include_tail) {
        auto tail = [&](const AnyKernel& k) {
            return is_discrete(k) ? discrete_tail(std::get<ModelKernel>(k), static_cast<double>(n))
                                  : continuous_tail(k, T);
        };
        sum += std::abs(tail(a) - tail(b));
    }
    return sum;
}

// int_lo^hi k for continuous-time kernels.
double cell_integral(const AnyKernel& k, double lo, double hi) {
    return std::visit(
        Overloaded{
            [&](const MemoryKernel& mk) {
                return std::visit(
                    Overloaded{
                        [&](const PolyDecay& p) {
                            const double e = 1.0 - p.gamma;
                            return (std::pow(lo + 1.0, e) - std::pow(hi + 1.0, e)) / (p.gamma - 1.0);
                        },
                        [&](const ExpDecay& d) {
                            return std::exp(-d.rate * lo) * -std::expm1(-d.rate * (hi - lo)) / d.rate;
                        },
                        [&](const Tabulated& tab) { return tabulated_primitive(tab, hi) - tabulated_primitive(tab, lo); },
                    },
                    mk.kind());
            },
            [&](const ModelKernel& model) {
                double sum = 0.0;
                for (std::size_t i = 0; i < model.c.size(); ++i) {
                    const double l = model.lambda[i];
                    if (l == 0.0) sum += model.c[i] * (hi - lo);
                    else sum += model.c[i] * std::exp(l * lo) * std::expm1(l * (hi - lo)) / l;
                }
                return sum;
            },
        },
        k);
}

double parse_number(std::string_view text, std::string_view what) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size())
        throw ConfigError("cannot parse " + std::string(what) + " from '" + std::string(text) + "'");
    return v;
}

} // namespace

MemoryKernel MemoryKernel::poly_decay(double gamma) {
    MemoryKernel k(PolyDecay{gamma});
    validate(k);
    return k;
}

MemoryKernel MemoryKernel::exp_decay(double rate) {
    MemoryKernel k(ExpDecay{rate});
    validate(k);
    return k;
}

MemoryKernel MemoryKernel::tabulated(std::vector<double> t, std::vector<double> values) {
    MemoryKernel k(Tabulated{std::move(t), std::move(values)});
    validate(k);
    return k;
}

void validate(const MemoryKernel& k) {
    std::visit(Overloaded{
                   [](const PolyDecay& p) {
                       if (!(p.gamma > 1.0) || !std::isfinite(p.gamma))
                           throw ConfigError("poly decay kernel needs gamma > 1");
                   },
                   [](const ExpDecay& e) {
                       if (!(e.rate > 0.0) || !std::isfinite(e.rate)) throw ConfigError("exp decay kernel needs rate > 0");
                   },
                   [](const Tabulated& tab) {
                       if (tab.t.size() < 2 || tab.t.size() != tab.values.size())
                           throw ConfigError("tabulated kernel needs at least two (t, rho) pairs");
                       if (tab.t.front() != 0.0) throw ConfigError("tabulated kernel grid must start at t = 0");
                       for (std::size_t i = 0; i < tab.t.size(); ++i) {
                           if (!std::isfinite(tab.t[i]) || !std::isfinite(tab.values[i]))
                               throw ConfigError("tabulated kernel contains non-finite entries");
                           if (i > 0 && !(tab.t[i] > tab.t[i - 1]))
                               throw ConfigError("tabulated kernel grid must be strictly increasing");
                       }
                   },
               },
               k.kind());
}

void validate(const ModelKernel& k) {
    if (k.c.size() != k.lambda.size()) throw ContractError("model kernel: c and lambda differ in length");
    if (!(k.dt > 0.0)) throw ConfigError("model kernel: dt must be positive");
    for (std::size_t i = 0; i < k.c.size(); ++i) {
        if (!std::isfinite(k.c[i]) || !std::isfinite(k.lambda[i]))
            throw ConfigError("model kernel contains non-finite entries");
    }
}

void validate(const QuadratureConfig& quad) {
    if (!(quad.dt > 0.0) || !(quad.horizon > 0.0) || !(quad.tail_tolerance > 0.0))
        throw ConfigError("quadrature: dt, horizon and tail_tolerance must be positive");
    const double ratio = quad.horizon / quad.dt;
    if (std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
        throw ConfigError("quadrature: horizon must be an integer multiple of dt");
}

double eval_kernel(const MemoryKernel& k, double t) {
    if (!(t >= 0.0)) throw DomainError("kernel evaluated at negative time");
    return std::visit(Overloaded{
                          [&](const PolyDecay& p) { return std::pow(t + 1.0, -p.gamma); },
                          [&](const ExpDecay& e) { return std::exp(-e.rate * t); },
                          [&](const Tabulated& tab) {
                              if (t > tab.t.back()) throw DomainError("tabulated kernel evaluated past its horizon");
                              return tabulated_value(tab, t);
                          },
                      },
                      k.kind());
}

double eval_kernel(const ModelKernel& k, double t) {
    if (!(t >= 0.0)) throw DomainError("kernel evaluated at negative time");
    double sum = 0.0;
    if (k.mode == TimeMode::Continuous) {
        for (std::size_t i = 0; i < k.c.size(); ++i) sum += k.c[i] * std::exp(k.lambda[i] * t);
        return sum;
    }
    if (t != std::floor(t)) throw DomainError("discrete kernel evaluated at a non-integer step");
    for (std::size_t i = 0; i < k.c.size(); ++i) sum += k.c[i] * std::pow(k.lambda[i], t);
    return sum;
}

double eval_kernel(const AnyKernel& k, double t) {
    return std::visit([&](const auto& kk) { return eval_kernel(kk, t); }, k);
}

bool is_integrable(const ModelKernel& k) {
    for (double l : k.lambda) {
        if (k.mode == TimeMode::Continuous ? !(l < 0.0) : !(std::abs(l) < 1.0)) return false;
    }
    return true;
}

double model_l1_mass(const ModelKernel& k) {
    if (!is_integrable(k)) return kInf;
    double sum = 0.0;
    for (std::size_t i = 0; i < k.c.size(); ++i) {
        sum += k.mode == TimeMode::Continuous ? std::abs(k.c[i]) / std::abs(k.lambda[i])
                                              : std::abs(k.c[i]) / (1.0 - std::abs(k.lambda[i]));
    }
    return sum;
}

double kernel_l1_distance(const AnyKernel& a, const AnyKernel& b, const QuadratureConfig& quad) {
    validate(quad);
    validate_any(a);
    validate_any(b);
    if (is_discrete(a) || is_discrete(b)) return lag_distance(a, b, quad);
    return continuous_distance(a, b, quad);
}

double kernel_l1_norm(const AnyKernel& k, const QuadratureConfig& quad) {
    ModelKernel zero;
    if (const auto* model = std::get_if<ModelKernel>(&k)) {
        zero.mode = model->mode;
        zero.dt = model->dt;
    }
    return kernel_l1_distance(k, zero, quad);
}

std::vector<double> lag_weights(const AnyKernel& k, std::size_t count, double dt) {
    if (!(dt > 0.0)) throw ConfigError("lag weights: dt must be positive");
    validate_any(k);
    std::vector<double> weights(count, 0.0);
    if (is_discrete(k)) {
        const auto& model = std::get<ModelKernel>(k);
        for (std::size_t i = 0; i < model.c.size(); ++i) {
            double power = model.c[i];
            for (std::size_t n = 1; n < count; ++n) {
                weights[n] += power;
                power *= model.lambda[i];
            }
        }
        return weights;
    }
    for (std::size_t n = 1; n < count; ++n)
        weights[n] = cell_integral(k, static_cast<double>(n - 1) * dt, static_cast<double>(n) * dt);
    return weights;
}

std::vector<double> apply_linear_functional(const AnyKernel& k, std::span<const double> x, double dt) {
    for (double v : x) {
        if (!std::isfinite(v)) throw DomainError("linear functional: non-finite input sample");
    }
    const auto weights = lag_weights(k, x.size(), dt);
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t t = 1; t < x.size(); ++t) {
        double acc = 0.0;
        for (std::size_t n = 1; n <= t; ++n) acc += weights[n] * x[t - n];
        y[t] = acc;
    }
    return y;
}

double memory_function(const AnyKernel& k, double t) { return std::abs(eval_kernel(k, t)); }

MemoryKernel parse_kernel_spec(std::string_view spec) {
    const auto colon = spec.find(':');
    if (colon == std::string_view::npos)
        throw ConfigError("kernel spec '" + std::string(spec) + "' must look like poly:<gamma>, expdecay:<rate> or csv:<path>");
    const auto kind = spec.substr(0, colon);
    const auto arg = spec.substr(colon + 1);
    if (kind == "poly") return MemoryKernel::poly_decay(parse_number(arg, "gamma"));
    if (kind == "expdecay") return MemoryKernel::exp_decay(parse_number(arg, "rate"));
    if (kind == "csv") {
        auto tab = read_kernel_csv(std::filesystem::path(std::string(arg)));
        return MemoryKernel::tabulated(std::move(tab.t), std::move(tab.values));
    }
    throw ConfigError("unknown kernel kind '" + std::string(kind) + "'");
}

Tabulated read_kernel_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open kernel file " + path.string());
    std::string line;
    if (!std::getline(in, line) || (line != "t,rho" && line != "t,rho\r"))
        throw ConfigError("kernel file " + path.string() + " must start with the header 't,rho'");
    Tabulated tab;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw ConfigError("kernel file line " + std::to_string(lineno) + ": expected two columns");
        std::string_view view(line);
        tab.t.push_back(parse_number(view.substr(0, comma), "t"));
        tab.values.push_back(parse_number(view.substr(comma + 1), "rho"));
    }
    validate(MemoryKernel::tabulated(tab.t, tab.values));
    return tab;
}

void write_kernel_csv(const std::filesystem::path& path, const Tabulated& table) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write kernel file " + path.string());
    out << "t,rho\n" << std::setprecision(17);
    for (std::size_t i = 0; i < table.t.size(); ++i) out << table.t[i] << ',' << table.values[i] << '\n';
}

} // namespace ssmlab
