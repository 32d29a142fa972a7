#include "doctest.h"

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "ssmlab/errors.hpp"
#include "ssmlab/kernel.hpp"

using namespace ssmlab;
using boost::math::quadrature::exp_sinh;
using boost::math::quadrature::gauss_kronrod;

namespace {

double model_value(const ModelKernel& k, double t) {
    double v = 0.0;
    for (std::size_t i = 0; i < k.c.size(); ++i) v += k.c[i] * std::exp(k.lambda[i] * t);
    return v;
}

} // namespace

TEST_CASE("polynomial kernel mass and lag weights") {
    const auto poly = MemoryKernel::poly_decay(1.1);
    CHECK(std::abs(kernel_l1_norm(poly) - 10.0) <= 2e-4);
    CHECK(kernel_l1_norm(MemoryKernel::poly_decay(2.0)) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(kernel_l1_norm(MemoryKernel::exp_decay(0.5)) == doctest::Approx(2.0).epsilon(1e-4));

    for (double dt : {1.0, 0.25}) {
        const auto w = lag_weights(poly, 50, dt);
        CHECK(w[0] == 0.0);
        for (std::size_t n = 1; n < w.size(); ++n) {
            const double lo = (n - 1) * dt, hi = n * dt;
            const double cell = gauss_kronrod<double, 31>::integrate([](double t) { return std::pow(t + 1.0, -1.1); }, lo, hi);
            CHECK(w[n] == doctest::Approx(cell).epsilon(1e-12));
        }
    }
}

TEST_CASE("step response of the polynomial functional") {
    const auto poly = MemoryKernel::poly_decay(1.1);
    const std::vector<double> ones(100, 1.0);
    const auto y = apply_linear_functional(poly, ones, 1.0);
    for (std::size_t t : {0u, 1u, 9u, 50u, 99u}) CHECK(y[t] == doctest::Approx(10.0 * (1.0 - std::pow(t + 1.0, -0.1))).epsilon(1e-12));
    CHECK(std::abs(y[99] - 3.6904) < 1e-4);
    const std::vector<double> zeros(40, 0.0);
    for (double v : apply_linear_functional(poly, zeros, 1.0)) CHECK(v == 0.0);
}

TEST_CASE("linear functional equals brute-force convolution") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> normal;
    const auto kernel = MemoryKernel::exp_decay(0.3);
    std::vector<double> x(60);
    for (double& v : x) v = normal(rng);
    const double dt = 0.5;
    const auto y = apply_linear_functional(kernel, x, dt);
    for (std::size_t k = 0; k < x.size(); ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            // input x_j is held on [j dt, (j+1) dt); output read at k dt
            acc += x[j] * gauss_kronrod<double, 31>::integrate([](double t) { return std::exp(-0.3 * t); },
                                                               (k - j - 1) * dt, (k - j) * dt);
        }
        CHECK(y[k] == doctest::Approx(acc).epsilon(1e-11));
    }
}

TEST_CASE("continuous model kernel distance against quadrature") {
    ModelKernel a{{1.0, -0.4}, {-0.5, -2.0}};
    ModelKernel b{{0.7}, {-0.8}};
    exp_sinh<double> integrator;
    const double oracle = integrator.integrate([&](double t) { return std::abs(model_value(a, t) - model_value(b, t)); }, 1e-12);
    CHECK(kernel_l1_distance(a, b) == doctest::Approx(oracle).epsilon(1e-5));
    CHECK(kernel_l1_distance(a, b) == doctest::Approx(kernel_l1_distance(b, a)).epsilon(1e-14));
    CHECK(kernel_l1_distance(a, a) == 0.0);

    const auto target = MemoryKernel::poly_decay(1.5);
    const double oracle2 = integrator.integrate(
        [&](double t) { return std::abs(std::pow(t + 1.0, -1.5) - model_value(b, t)); }, 1e-12);
    QuadratureConfig quad;
    quad.dt = 0.005;
    quad.horizon = 20000.0;
    CHECK(kernel_l1_distance(target, b, quad) == doctest::Approx(oracle2).epsilon(1e-4));

    // finite window: no tail
    QuadratureConfig window;
    window.horizon = 10.0;
    window.include_tail = false;
    const double oracle3 = gauss_kronrod<double, 61>::integrate(
        [&](double t) { return std::abs(model_value(a, t) - model_value(b, t)); }, 0.0, 10.0, 15, 1e-13);
    CHECK(kernel_l1_distance(a, b, window) == doctest::Approx(oracle3).epsilon(1e-5));
}

TEST_CASE("model kernel mass, horizon doubling and integrability") {
    ModelKernel slow{{1.0}, {-1e-3}};
    CHECK(model_l1_mass(slow) == doctest::Approx(1000.0));
    CHECK(kernel_l1_norm(slow) == doctest::Approx(1000.0).epsilon(1e-6));
    ModelKernel unstable{{1.0}, {0.1}};
    CHECK_FALSE(is_integrable(unstable));
    CHECK(std::isinf(model_l1_mass(unstable)));
    CHECK_THROWS_AS(kernel_l1_norm(unstable), DomainError);
    QuadratureConfig window;
    window.horizon = 5.0;
    window.include_tail = false;
    CHECK(kernel_l1_norm(unstable, window) == doctest::Approx(10.0 * std::expm1(0.5)).epsilon(1e-5));
}

TEST_CASE("discrete model kernels use lag weights") {
    ModelKernel d{{1.0, 0.5}, {0.9, -0.3}, TimeMode::Discrete};
    const auto w = lag_weights(d, 30, 1.0);
    CHECK(w[0] == 0.0);
    for (std::size_t n = 1; n < w.size(); ++n)
        CHECK(w[n] == doctest::Approx(std::pow(0.9, n - 1.0) + 0.5 * std::pow(-0.3, n - 1.0)).epsilon(1e-13));
    CHECK(eval_kernel(d, 3.0) == doctest::Approx(std::pow(0.9, 3) + 0.5 * std::pow(-0.3, 3)));
    CHECK_THROWS_AS(eval_kernel(d, 2.5), DomainError);

    ModelKernel e{{0.8}, {0.95}, TimeMode::Discrete};
    double oracle = 0.0;
    for (int n = 0; n < 20000; ++n) oracle += std::abs(std::pow(0.9, n) + 0.5 * std::pow(-0.3, n) - 0.8 * std::pow(0.95, n));
    CHECK(kernel_l1_distance(d, e) == doctest::Approx(oracle).epsilon(1e-6));
    CHECK(model_l1_mass(d) == doctest::Approx(1.0 / 0.1 + 0.5 / 0.7));
}

TEST_CASE("tabulated kernels and CSV round trip") {
    const auto tri = MemoryKernel::tabulated({0.0, 1.0, 2.0}, {0.0, 2.0, 0.0});
    CHECK(eval_kernel(tri, 0.5) == doctest::Approx(1.0));
    CHECK_THROWS_AS(eval_kernel(tri, 3.0), DomainError);
    CHECK(kernel_l1_norm(tri) == doctest::Approx(2.0).epsilon(1e-9));
    const auto w = lag_weights(tri, 4, 1.0);
    CHECK(w[1] == doctest::Approx(1.0));
    CHECK(w[2] == doctest::Approx(1.0));
    CHECK(w[3] == doctest::Approx(0.0));

    const auto path = std::filesystem::temp_directory_path() / "ssmlab_kernel_roundtrip.csv";
    write_kernel_csv(path, Tabulated{{0.0, 0.5, 2.0}, {1.0, 0.25, 0.125}});
    const auto back = read_kernel_csv(path);
    CHECK(back.t == std::vector<double>{0.0, 0.5, 2.0});
    CHECK(back.values == std::vector<double>{1.0, 0.25, 0.125});
    const auto parsed = parse_kernel_spec("csv:" + path.string());
    CHECK(eval_kernel(parsed, 1.25) == doctest::Approx(0.1875));
    std::filesystem::remove(path);
}

TEST_CASE("kernel specs and validation") {
    CHECK(eval_kernel(parse_kernel_spec("poly:2"), 1.0) == doctest::Approx(0.25));
    CHECK(eval_kernel(parse_kernel_spec("expdecay:2"), 1.0) == doctest::Approx(std::exp(-2.0)));
    CHECK_THROWS_AS(parse_kernel_spec("poly:1"), ConfigError);
    CHECK_THROWS_AS(parse_kernel_spec("poly"), ConfigError);
    CHECK_THROWS_AS(parse_kernel_spec("gauss:1"), ConfigError);
    CHECK_THROWS_AS(parse_kernel_spec("csv:/nonexistent/file.csv"), ConfigError);
    CHECK_THROWS_AS(MemoryKernel::tabulated({0.0, 0.0}, {1.0, 1.0}), ConfigError);
    QuadratureConfig bad;
    bad.dt = 0.3;
    bad.horizon = 1.0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    CHECK(memory_function(MemoryKernel::poly_decay(1.1), 1.0) == doctest::Approx(std::pow(2.0, -1.1)));
}
