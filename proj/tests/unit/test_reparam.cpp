#include "doctest.h"

#include <boost/math/quadrature/exp_sinh.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "ssmlab/errors.hpp"
#include "ssmlab/reparam.hpp"

using namespace ssmlab;

namespace {

std::vector<double> w_grid() {
    std::vector<double> g;
    for (int j = -50; j <= 50; ++j) g.push_back(j / 10.0);
    return g;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus(double x) { return std::log1p(std::exp(x)); }

// Closed forms written out independently of the library.
double closed_form(const Scheme& s, double w) {
    const bool cont = s.mode == TimeMode::Continuous;
    switch (s.family) {
    case Family::ReLU:
        if (cont) return w > 0.0 ? 1.0 / (w * w) : 0.0;
        return w > 0.0 ? std::exp(-w) / std::pow(std::expm1(-w), 2) : 0.0;
    case Family::Exp:
        return cont ? std::exp(-w) : std::exp(w - std::exp(w)) / std::pow(std::expm1(-std::exp(w)), 2);
    case Family::Softplus: return cont ? sigmoid(w) / std::pow(softplus(w), 2) : std::exp(-w);
    case Family::Tanh: return std::exp(2.0 * w);
    case Family::Best: return 2.0 * s.a * std::abs(w);
    case Family::Direct: return cont ? 1.0 / (w * w) : 1.0 / ((1.0 - w) * (1.0 - w));
    }
    return 0.0;
}

std::vector<Scheme> all_schemes() {
    std::vector<Scheme> out;
    for (auto fam : {Family::Direct, Family::ReLU, Family::Exp, Family::Softplus, Family::Best}) {
        out.push_back(make_scheme(fam, TimeMode::Continuous));
        out.push_back(make_scheme(fam, TimeMode::Discrete));
    }
    out.push_back(make_scheme(Family::Tanh, TimeMode::Discrete));
    out.push_back(make_scheme(Family::Best, TimeMode::Continuous, 2.5, 0.7));
    out.push_back(make_scheme(Family::Best, TimeMode::Discrete, 0.3, 1.5));
    return out;
}

bool singular(const Scheme& s, double w) {
    if (s.family != Family::Direct) return false;
    return s.mode == TimeMode::Continuous ? w == 0.0 : w == 1.0;
}

// |f(w)| * int_0^inf |exp(f(v) t) - exp(f(w) t)| dt by quadrature.
double gap_by_quadrature(const Scheme& s, double w, double v) {
    const double a = apply(s, w), b = apply(s, v);
    if (!(b < 0.0)) return std::numeric_limits<double>::infinity();
    boost::math::quadrature::exp_sinh<double> integrator;
    const double integral =
        integrator.integrate([&](double t) { return std::abs(std::exp(b * t) - std::exp(a * t)); }, 1e-13);
    return std::abs(a) * integral;
}

} // namespace

TEST_CASE("gradient scale matches the tabulated closed forms") {
    for (const auto& s : all_schemes()) {
        for (double w : w_grid()) {
            if (singular(s, w)) {
                CHECK_THROWS_AS(gradient_scale(s, w), DomainError);
                continue;
            }
            const double expected = closed_form(s, w);
            const double got = gradient_scale(s, w);
            INFO(to_string(s), " w=", w);
            CHECK(std::abs(got - expected) <= 1e-10 * std::max(1.0, std::abs(expected)));
            if (s.family != Family::Direct) {
                const auto tab = tabulated_gradient_scale(s, w);
                REQUIRE(tab.has_value());
                CHECK(std::abs(*tab - expected) <= 1e-10 * std::max(1.0, std::abs(expected)));
            } else {
                CHECK_FALSE(tabulated_gradient_scale(s, w).has_value());
            }
        }
    }
}

TEST_CASE("gradient scale is |f'| / f^2 or |f'| / (1 - f)^2") {
    for (const auto& s : all_schemes()) {
        for (double w : w_grid()) {
            if (singular(s, w)) continue;
            const double f = apply(s, w);
            const double denom = s.mode == TimeMode::Continuous ? f * f : std::pow(1.0 - f, 2);
            if (denom == 0.0) continue; // 0/0 region of ReLU
            const double raw = std::abs(derivative(s, w)) / denom;
            INFO(to_string(s), " w=", w);
            CHECK(gradient_scale(s, w) == doctest::Approx(raw).epsilon(1e-9));
        }
    }
}

TEST_CASE("derivative matches central differences") {
    const double h = 1e-6;
    for (const auto& s : all_schemes()) {
        for (double w : w_grid()) {
            if (s.family == Family::ReLU && w == 0.0) continue; // kink
            const double fd = (apply(s, w + h) - apply(s, w - h)) / (2.0 * h);
            const double d = derivative(s, w);
            INFO(to_string(s), " w=", w, " fd=", fd, " d=", d);
            if (d == 0.0) {
                CHECK(std::abs(fd) <= 1e-9);
            } else {
                CHECK(std::abs(fd - d) / std::abs(d) < 1e-6);
            }
        }
    }
}

TEST_CASE("best scheme has a gradient scale of exactly 2a|w|") {
    const Scheme s = derive_best_scheme(1.7, 0.9, TimeMode::Continuous);
    CHECK(s.family == Family::Best);
    CHECK(s.a == 1.7);
    for (double w : w_grid()) CHECK(std::abs(gradient_scale(s, w) - 2.0 * 1.7 * std::abs(w)) < 1e-12 * std::max(1.0, std::abs(w)));
    CHECK_THROWS_AS(derive_best_scheme(-1.0, 0.5, TimeMode::Continuous), ConfigError);
}

TEST_CASE("stability gap equals the quadrature sup over the ball") {
    const std::vector<Scheme> schemes = {make_scheme(Family::Exp, TimeMode::Continuous),
                                         make_scheme(Family::Softplus, TimeMode::Continuous),
                                         make_scheme(Family::Best, TimeMode::Continuous, 1.0, 1.0),
                                         make_scheme(Family::Direct, TimeMode::Continuous)};
    for (const auto& s : schemes) {
        for (double w = -3.0; w <= 3.0; w += 0.75) {
            if (s.family == Family::Direct && w >= -0.5) continue;
            for (double beta : {0.01, 0.1, 0.5}) {
                double sup = 0.0;
                for (int j = 0; j <= 100; ++j) sup = std::max(sup, gap_by_quadrature(s, w, w - beta + 2.0 * beta * j / 100.0));
                INFO(to_string(s), " w=", w, " beta=", beta);
                CHECK(stability_gap(s, w, beta) == doctest::Approx(sup).epsilon(1e-8));
            }
        }
    }
}

TEST_CASE("stable families stay under their certificate") {
    const std::vector<Scheme> schemes = {make_scheme(Family::Exp, TimeMode::Continuous),
                                         make_scheme(Family::Softplus, TimeMode::Continuous),
                                         make_scheme(Family::Best, TimeMode::Continuous, 1.0, 1.0),
                                         make_scheme(Family::Best, TimeMode::Continuous, 3.0, 0.25)};
    for (const auto& s : schemes) {
        for (double w : w_grid()) {
            for (double beta : {0.01, 0.1, 0.5, 1.0}) {
                INFO(to_string(s), " w=", w, " beta=", beta);
                CHECK(stability_gap(s, w, beta) <= stability_bound_g(s, w, beta) + 1e-9);
            }
        }
    }
    // the uniform Best certificate dominates the pointwise one on its weight set
    const auto best = make_scheme(Family::Best, TimeMode::Continuous, 1.0, 1.0);
    CHECK(stability_bound_g_uniform(best, 2.0, 0.1) >= stability_bound_g(best, -2.0, 0.1));
}

TEST_CASE("direct scheme gap is 1/eps next to the boundary") {
    const auto s = make_scheme(Family::Direct, TimeMode::Continuous);
    const double beta = 1e-3;
    for (double eps : {1.0, 0.1, 0.01, 1e-3}) {
        const double w = -beta * (1.0 + eps);
        // independent form: beta / (-w - beta)
        CHECK(stability_gap(s, w, beta) == doctest::Approx(beta / (-w - beta)).epsilon(1e-6));
        CHECK(stability_gap(s, w, beta) == doctest::Approx(1.0 / eps).epsilon(1e-6));
    }
    CHECK(std::isinf(stability_gap(s, -0.5 * beta, beta)));
    CHECK(stability_gap(s, -1.0, 0.0) == 0.0);
}

TEST_CASE("invert is a right inverse") {
    struct Case {
        const char* spec;
        double lambda, w;
    };
    for (auto c : {Case{"exp@cont", -1.0, 0.0}, Case{"softplus@cont", -std::log(2.0), 0.0},
                   Case{"best:a=1,b=0.5@disc", 0.0, std::sqrt(0.5)}}) {
        CHECK(invert(parse_scheme(c.spec), c.lambda) == doctest::Approx(c.w).epsilon(1e-12));
    }
    for (const auto& s : all_schemes()) {
        for (double lambda : {-0.9, -0.5, -0.01, 0.01, 0.5, 0.95}) {
            double w = 0.0;
            try {
                w = invert(s, lambda);
            } catch (const DomainError&) {
                continue; // outside the range of f
            }
            INFO(to_string(s), " lambda=", lambda);
            CHECK(std::abs(apply(s, w) - lambda) <= 1e-12);
            if (s.family == Family::Best) CHECK(w >= 0.0);
        }
    }
    CHECK_THROWS_AS(invert(parse_scheme("exp@cont"), 0.5), DomainError);
    CHECK_THROWS_AS(invert(parse_scheme("tanh@disc"), 1.0), DomainError);
}

TEST_CASE("scheme specs parse and print") {
    const auto s = parse_scheme("best:a=2,b=0.75@disc");
    CHECK(s.family == Family::Best);
    CHECK(s.mode == TimeMode::Discrete);
    CHECK(s.a == 2.0);
    CHECK(s.b == 0.75);
    CHECK(parse_scheme(to_string(s)) == s);
    CHECK(parse_scheme("softplus@cont") == make_scheme(Family::Softplus, TimeMode::Continuous));
    CHECK_THROWS_AS(parse_scheme("tanh@cont"), ConfigError);
    CHECK_THROWS_AS(parse_scheme("best:a=-1@cont"), ConfigError);
    CHECK_THROWS_AS(parse_scheme("best:a=1,b=0.2@disc"), ConfigError);
    CHECK_THROWS_AS(parse_scheme("exp"), ConfigError);
    CHECK_THROWS_AS(apply(parse_scheme("exp@cont"), 1000.0), DomainError);
    CHECK_THROWS_AS(apply(parse_scheme("exp@cont"), std::nan("")), DomainError);
}

TEST_CASE("stable eigenvalue regions") {
    CHECK(is_stable_eigenvalue(TimeMode::Continuous, -1e-9));
    CHECK_FALSE(is_stable_eigenvalue(TimeMode::Continuous, 0.0));
    CHECK(is_stable_eigenvalue(TimeMode::Discrete, -0.99));
    CHECK_FALSE(is_stable_eigenvalue(TimeMode::Discrete, 1.01));
}
