#include "ssmlab/reparam.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <string>

#include "ssmlab/errors.hpp"

namespace ssmlab {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// log(1 + e^w) without overflow.
double softplus(double w) {
    return w > 30.0 ? w + std::log1p(std::exp(-w)) : std::log1p(std::exp(w));
}

double sigmoid(double w) {
    if (w >= 0.0) return 1.0 / (1.0 + std::exp(-w));
    const double e = std::exp(w);
    return e / (1.0 + e);
}

void require_finite(double w) {
    if (!std::isfinite(w)) throw DomainError("reparameterization: non-finite weight");
}

double best_denominator(const Scheme& s, double w) { return s.a * w * w + s.b; }

std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

double parse_double(std::string_view text, std::string_view what) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size())
        throw ConfigError("scheme spec: cannot parse " + std::string(what) + " from '" + std::string(text) + "'");
    return v;
}

} // namespace

std::string_view family_name(Family family) {
    switch (family) {
    case Family::Direct: return "direct";
    case Family::ReLU: return "relu";
    case Family::Exp: return "exp";
    case Family::Softplus: return "softplus";
    case Family::Tanh: return "tanh";
    case Family::Best: return "best";
    }
    return "?";
}

std::string_view mode_name(TimeMode mode) { return mode == TimeMode::Continuous ? "cont" : "disc"; }

TimeMode parse_time_mode(std::string_view token) {
    if (token == "cont" || token == "continuous") return TimeMode::Continuous;
    if (token == "disc" || token == "discrete") return TimeMode::Discrete;
    throw ConfigError("unknown time mode '" + std::string(token) + "' (expected cont or disc)");
}

void validate(const Scheme& s) {
    if (s.family == Family::Tanh && s.mode != TimeMode::Discrete)
        throw ConfigError("tanh reparameterization is only defined in discrete time");
    if (s.family != Family::Best) return;
    if (!std::isfinite(s.a) || !std::isfinite(s.b)) throw ConfigError("best: a and b must be finite");
    if (s.a <= 0.0) throw ConfigError("best: a must be positive");
    if (s.mode == TimeMode::Continuous && s.b <= 0.0) throw ConfigError("best (continuous): b must be positive");
    if (s.mode == TimeMode::Discrete && s.b < 0.5)
        throw ConfigError("best (discrete): b must be >= 0.5 so that f(w) stays in [-1, 1)");
}

Scheme make_scheme(Family family, TimeMode mode, double a, double b) {
    Scheme s{family, mode, a, b};
    validate(s);
    return s;
}

Scheme parse_scheme(std::string_view spec) {
    const auto at = spec.rfind('@');
    if (at == std::string_view::npos)
        throw ConfigError("scheme spec '" + std::string(spec) + "' is missing '@cont' or '@disc'");
    const TimeMode mode = parse_time_mode(spec.substr(at + 1));
    std::string_view head = spec.substr(0, at);
    std::string_view params;
    if (const auto colon = head.find(':'); colon != std::string_view::npos) {
        params = head.substr(colon + 1);
        head = head.substr(0, colon);
    }

    Family family{};
    bool found = false;
    for (Family f : {Family::Direct, Family::ReLU, Family::Exp, Family::Softplus, Family::Tanh, Family::Best}) {
        if (head == family_name(f)) {
            family = f;
            found = true;
        }
    }
    if (!found) throw ConfigError("unknown reparameterization family '" + std::string(head) + "'");

    Scheme s{family, mode};
    if (!params.empty()) {
        if (family != Family::Best) throw ConfigError("only the best family takes parameters");
        while (!params.empty()) {
            const auto comma = params.find(',');
            std::string_view item = params.substr(0, comma);
            params = comma == std::string_view::npos ? std::string_view{} : params.substr(comma + 1);
            const auto eq = item.find('=');
            if (eq == std::string_view::npos) throw ConfigError("scheme parameter '" + std::string(item) + "' lacks '='");
            const auto key = item.substr(0, eq);
            const double value = parse_double(item.substr(eq + 1), key);
            if (key == "a") s.a = value;
            else if (key == "b") s.b = value;
            else throw ConfigError("unknown scheme parameter '" + std::string(key) + "'");
        }
    }
    validate(s);
    return s;
}

std::string to_string(const Scheme& s) {
    std::string out(family_name(s.family));
    if (s.family == Family::Best) out += ":a=" + format_double(s.a) + ",b=" + format_double(s.b);
    out += '@';
    out += mode_name(s.mode);
    return out;
}

double apply(const Scheme& s, double w) {
    require_finite(w);
    const bool cont = s.mode == TimeMode::Continuous;
    double lambda = 0.0;
    switch (s.family) {
    case Family::Direct: lambda = w; break;
    case Family::ReLU: lambda = cont ? -std::max(w, 0.0) : std::exp(-std::max(w, 0.0)); break;
    case Family::Exp: lambda = cont ? -std::exp(w) : std::exp(-std::exp(w)); break;
    case Family::Softplus: lambda = cont ? -softplus(w) : sigmoid(-w); break;
    case Family::Tanh: lambda = std::tanh(w); break;
    case Family::Best: lambda = cont ? -1.0 / best_denominator(s, w) : 1.0 - 1.0 / best_denominator(s, w); break;
    }
    if (!std::isfinite(lambda)) throw DomainError("reparameterization overflow at w = " + format_double(w));
    return lambda;
}

double derivative(const Scheme& s, double w) {
    require_finite(w);
    const bool cont = s.mode == TimeMode::Continuous;
    switch (s.family) {
    case Family::Direct: return 1.0;
    case Family::ReLU:
        if (w <= 0.0) return 0.0;
        return cont ? -1.0 : -std::exp(-w);
    case Family::Exp: return cont ? -std::exp(w) : -std::exp(w - std::exp(w));
    case Family::Softplus: return cont ? -sigmoid(w) : -sigmoid(w) * sigmoid(-w);
    case Family::Tanh: {
        const double ch = std::cosh(w);
        return 1.0 / (ch * ch);
    }
    case Family::Best: {
        const double den = best_denominator(s, w);
        return 2.0 * s.a * w / (den * den);
    }
    }
    return 0.0;
}

double complement(const Scheme& s, double w) {
    require_finite(w);
    const bool cont = s.mode == TimeMode::Continuous;
    switch (s.family) {
    case Family::Direct: return 1.0 - w;
    case Family::ReLU: return cont ? 1.0 + std::max(w, 0.0) : -std::expm1(-std::max(w, 0.0));
    case Family::Exp: return cont ? 1.0 + std::exp(w) : -std::expm1(-std::exp(w));
    case Family::Softplus: return cont ? 1.0 + softplus(w) : sigmoid(w);
    case Family::Tanh:
        if (w >= 0.0) {
            const double e = std::exp(-2.0 * w);
            return 2.0 * e / (1.0 + e);
        }
        return 2.0 / (1.0 + std::exp(2.0 * w));
    case Family::Best:
        return cont ? 1.0 + 1.0 / best_denominator(s, w) : 1.0 / best_denominator(s, w);
    }
    return 0.0;
}

double gradient_scale(const Scheme& s, double w) {
    const double slope = std::abs(derivative(s, w));
    const double denom = s.mode == TimeMode::Continuous ? apply(s, w) : complement(s, w);
    if (denom == 0.0) {
        if (s.family == Family::ReLU && w <= 0.0) return 0.0;
        throw DomainError("gradient scale is singular at w = " + format_double(w));
    }
    return slope / std::abs(denom) / std::abs(denom);
}

std::optional<double> tabulated_gradient_scale(const Scheme& s, double w) {
    require_finite(w);
    if (s.mode == TimeMode::Continuous) {
        switch (s.family) {
        case Family::ReLU: return w > 0.0 ? 1.0 / (w * w) : 0.0;
        case Family::Exp: return std::exp(-w);
        case Family::Softplus: {
            const double sp = softplus(w);
            return sigmoid(w) / (sp * sp);
        }
        case Family::Best: return 2.0 * s.a * std::abs(w);
        default: return std::nullopt;
        }
    }
    switch (s.family) {
    case Family::ReLU: {
        if (w <= 0.0) return 0.0;
        const double d = std::expm1(-w);
        return std::exp(-w) / (d * d);
    }
    case Family::Exp: {
        const double d = std::expm1(-std::exp(w));
        return std::exp(w - std::exp(w)) / (d * d);
    }
    case Family::Softplus: return std::exp(-w);
    case Family::Tanh: return std::exp(2.0 * w);
    case Family::Best: return 2.0 * s.a * std::abs(w);
    default: return std::nullopt;
    }
}

double stability_gap(const Scheme& s, double w, double beta) {
    validate(s);
    if (s.mode != TimeMode::Continuous) throw ConfigError("stability gap is defined for continuous-time schemes");
    require_finite(w);
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw DomainError("stability gap: beta must be a finite nonnegative number");

    const double base = apply(s, w);
    if (!(base < 0.0)) return kInf;

    // The integral equals |1/|f(v)| - 1/|f(w)||; the ratio is monotone in v
    // for every family except Best, whose even symmetry adds v = 0.
    std::array<double, 3> probes{w - beta, w + beta, 0.0};
    std::size_t count = 2;
    if (s.family == Family::Best && std::abs(w) <= beta) probes[count++] = 0.0;

    double gap = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double v = probes[i];
        const double perturbed = std::isfinite(v) ? apply(s, v) : 0.0;
        if (!(perturbed < 0.0)) return kInf;
        gap = std::max(gap, std::abs(base / perturbed - 1.0));
    }
    return gap;
}

double stability_bound_g(const Scheme& s, double w, double beta) {
    validate(s);
    if (!(beta >= 0.0)) throw DomainError("stability bound: beta must be nonnegative");
    if (s.mode != TimeMode::Continuous) throw ConfigError("stability bound: continuous-time schemes only");
    switch (s.family) {
    case Family::Exp:
    case Family::Softplus: return std::expm1(beta);
    case Family::Best: return s.a * (beta * beta + 2.0 * beta * std::abs(w)) / s.b;
    default:
        throw ConfigError("no stability certificate for family '" + std::string(family_name(s.family)) + "'");
    }
}

double stability_bound_g_uniform(const Scheme& s, double w_max, double beta) {
    return stability_bound_g(s, std::abs(w_max), beta);
}

Scheme derive_best_scheme(double l_over_c, double b, TimeMode mode) {
    if (!(l_over_c > 0.0)) throw ConfigError("derive_best_scheme: L/C must be positive");
    const Scheme s = make_scheme(Family::Best, mode, l_over_c, b);
    std::size_t probe = 0;
    for (double w = -5.0; w <= 5.0 + 1e-9; w += 0.25, ++probe) {
        const double expected = 2.0 * s.a * std::abs(w);
        if (std::abs(gradient_scale(s, w) - expected) > 1e-9 * std::max(1.0, expected))
            throw NumericError("derived scheme violates G(w) = 2a|w|", probe);
    }
    return s;
}

double invert(const Scheme& s, double lambda) {
    validate(s);
    if (!std::isfinite(lambda)) throw DomainError("invert: non-finite eigenvalue");
    const bool cont = s.mode == TimeMode::Continuous;
    auto out_of_range = [&] {
        return DomainError("eigenvalue " + format_double(lambda) + " is outside the range of " + to_string(s));
    };
    switch (s.family) {
    case Family::Direct: return lambda;
    case Family::ReLU:
        if (cont) {
            if (lambda > 0.0) throw out_of_range();
            return -lambda;
        }
        if (!(lambda > 0.0 && lambda <= 1.0)) throw out_of_range();
        return -std::log(lambda);
    case Family::Exp:
        if (cont) {
            if (!(lambda < 0.0)) throw out_of_range();
            return std::log(-lambda);
        }
        if (!(lambda > 0.0 && lambda < 1.0)) throw out_of_range();
        return std::log(-std::log(lambda));
    case Family::Softplus: {
        if (cont) {
            if (!(lambda < 0.0)) throw out_of_range();
            const double sp = -lambda;
            return sp > 30.0 ? sp + std::log(-std::expm1(-sp)) : std::log(std::expm1(sp));
        }
        if (!(lambda > 0.0 && lambda < 1.0)) throw out_of_range();
        return std::log1p(-lambda) - std::log(lambda);
    }
    case Family::Tanh:
        if (!(lambda > -1.0 && lambda < 1.0)) throw out_of_range();
        return std::atanh(lambda);
    case Family::Best: {
        double q = 0.0;
        if (cont) {
            if (!(lambda < 0.0)) throw out_of_range();
            q = -1.0 / lambda - s.b;
        } else {
            if (!(lambda < 1.0)) throw out_of_range();
            q = 1.0 / (1.0 - lambda) - s.b;
        }
        if (q < 0.0) {
            if (q > -1e-12 * s.b) q = 0.0;
            else throw out_of_range();
        }
        return std::sqrt(q / s.a);
    }
    }
    throw out_of_range();
}

bool is_stable_eigenvalue(TimeMode mode, double lambda) {
    return mode == TimeMode::Continuous ? lambda < 0.0 : std::abs(lambda) <= 1.0;
}

} // namespace ssmlab
