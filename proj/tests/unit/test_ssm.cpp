#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "ssmlab/errors.hpp"
#include "ssmlab/ssm.hpp"

using namespace ssmlab;

namespace {

SSMParams random_params(const std::string& scheme, Activation act, std::size_t m, std::size_t d, double dt,
                        unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> uni(0.05, 0.95);
    SSMParams p;
    p.scheme = parse_scheme(scheme);
    p.activation = act;
    p.dt = dt;
    p.U = Matrix(m, d);
    for (std::size_t i = 0; i < m; ++i) {
        const double lambda = p.scheme.mode == TimeMode::Continuous ? -uni(rng) : uni(rng) * (i % 2 ? -1.0 : 1.0);
        double w;
        try {
            w = invert(p.scheme, lambda);
        } catch (const DomainError&) {
            w = invert(p.scheme, std::abs(lambda));
        }
        p.w.push_back(w);
        p.b.push_back(0.3 * normal(rng));
        p.c.push_back(normal(rng));
        for (std::size_t j = 0; j < d; ++j) p.U(i, j) = normal(rng);
    }
    return p;
}

Matrix random_input(std::size_t k, std::size_t d, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Matrix x(k, d);
    for (double& v : x.data) v = normal(rng);
    return x;
}

// Straight recursion, written without the library's helpers.
std::vector<double> naive_outputs(const SSMParams& p, const Matrix& x) {
    const std::size_t m = p.width();
    std::vector<double> h(m, 0.0), y;
    for (std::size_t k = 0; k < x.rows; ++k) {
        double out = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            double z = h[i], s;
            switch (p.activation) {
            case Activation::Identity: s = z; break;
            case Activation::Tanh: s = std::tanh(z); break;
            case Activation::Sigmoid: s = 1.0 / (1.0 + std::exp(-z)) - 0.5; break;
            default: s = z / (1.0 + std::abs(z)); break;
            }
            out += p.c[i] * s;
        }
        y.push_back(out);
        for (std::size_t i = 0; i < m; ++i) {
            const double lambda = apply(p.scheme, p.w[i]);
            double v = p.b[i];
            for (std::size_t j = 0; j < x.cols; ++j) v += p.U(i, j) * x(k, j);
            if (p.mode() == TimeMode::Discrete) {
                h[i] = lambda * h[i] + v;
            } else {
                const double a = std::exp(lambda * p.dt);
                h[i] = a * h[i] + (a - 1.0) / lambda * v;
            }
        }
    }
    return y;
}

double weighted_loss(const SSMParams& p, const Matrix& x, const std::vector<double>& r) {
    const auto y = forward(p, x).y;
    double s = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) s += r[k] * y[k];
    return s;
}

} // namespace

TEST_CASE("activations") {
    for (auto act : {Activation::Tanh, Activation::Identity, Activation::Sigmoid, Activation::Softsign}) {
        CHECK(activate(act, 0.0) == 0.0);
        for (double z : {-2.0, -0.3, 0.4, 1.7}) {
            const double fd = (activate(act, z + 1e-6) - activate(act, z - 1e-6)) / 2e-6;
            CHECK(activate_derivative(act, z) == doctest::Approx(fd).epsilon(1e-7));
            CHECK(activate_derivative(act, z) <= lipschitz_constant(act) + 1e-15);
        }
        CHECK(parse_activation(activation_name(act)) == act);
    }
    CHECK(lipschitz_constant(Activation::Sigmoid) == 0.25);
    CHECK_THROWS_AS(parse_activation("relu6"), ConfigError);
}

TEST_CASE("forward matches a plain recursion") {
    for (const char* scheme : {"exp@cont", "softplus@disc", "direct@cont", "tanh@disc", "best:a=1,b=0.5@disc"}) {
        for (auto act : {Activation::Tanh, Activation::Identity, Activation::Sigmoid, Activation::Softsign}) {
            const auto p = random_params(scheme, act, 5, 2, 0.7, 3);
            const auto x = random_input(40, 2, 4);
            const auto y = forward(p, x).y;
            const auto oracle = naive_outputs(p, x);
            INFO(scheme);
            for (std::size_t k = 0; k < y.size(); ++k) CHECK(y[k] == doctest::Approx(oracle[k]).epsilon(1e-12));
            CHECK(y[0] == 0.0);
        }
    }
}

TEST_CASE("linear continuous model is a convolution with its kernel cells") {
    auto p = random_params("exp@cont", Activation::Identity, 4, 1, 0.5, 8);
    std::fill(p.b.begin(), p.b.end(), 0.0);
    const auto x = random_input(50, 1, 9);
    const auto y = forward(p, x).y;
    const auto lambda = eigenvalues(p);
    for (std::size_t k = 0; k < x.rows; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double n = static_cast<double>(k - j);
            for (std::size_t i = 0; i < 4; ++i) {
                const double cell = (std::exp(lambda[i] * n * p.dt) - std::exp(lambda[i] * (n - 1.0) * p.dt)) / lambda[i];
                acc += p.c[i] * p.U(i, 0) * cell * x(j, 0);
            }
        }
        CHECK(y[k] == doctest::Approx(acc).epsilon(1e-10));
    }
}

TEST_CASE("scan agrees with the sequential pass and ignores worker count") {
    for (const char* scheme : {"softplus@cont", "exp@disc"}) {
        const auto p = random_params(scheme, Activation::Tanh, 7, 3, 0.3, 12);
        for (std::size_t len : {1u, 2u, 17u, 64u, 257u}) {
            const auto x = random_input(len, 3, 13);
            const auto seq = forward(p, x);
            const auto base = forward_scan(p, x, 1);
            for (std::size_t k = 0; k < len; ++k) CHECK(base.y[k] == doctest::Approx(seq.y[k]).epsilon(1e-11));
            for (std::size_t k = 0; k < seq.h.data.size(); ++k)
                CHECK(base.h.data[k] == doctest::Approx(seq.h.data[k]).epsilon(1e-11).scale(1.0));
            for (int workers : {2, 3, 8}) {
                const auto other = forward_scan(p, x, workers);
                CHECK(other.y == base.y);
                CHECK(other.h == base.h);
            }
        }
    }
}

TEST_CASE("backpropagation matches finite differences") {
    const double h = 1e-6;
    for (const char* scheme : {"direct@cont", "relu@cont", "exp@cont", "softplus@cont", "best:a=1,b=1@cont",
                               "direct@disc", "exp@disc", "softplus@disc", "tanh@disc", "best:a=1,b=0.5@disc"}) {
        for (auto act : {Activation::Tanh, Activation::Identity, Activation::Sigmoid, Activation::Softsign}) {
            auto p = random_params(scheme, act, 3, 2, 0.8, 21);
            const auto x = random_input(25, 2, 22);
            std::vector<double> r(25);
            std::mt19937_64 rng(23);
            std::normal_distribution<double> normal;
            for (double& v : r) v = normal(rng);
            const auto g = backward(p, x, forward(p, x), r);
            INFO(scheme, " ", activation_name(act));

            auto check = [&](double& slot, double analytic) {
                const double keep = slot;
                slot = keep + h;
                const double up = weighted_loss(p, x, r);
                slot = keep - h;
                const double down = weighted_loss(p, x, r);
                slot = keep;
                const double fd = (up - down) / (2.0 * h);
                CHECK(std::abs(fd - analytic) <= 1e-6 * std::max(1.0, std::abs(fd)));
            };
            for (std::size_t i = 0; i < p.width(); ++i) {
                if (!(std::string(scheme).starts_with("relu") && p.w[i] == 0.0)) check(p.w[i], g.w[i]);
                check(p.b[i], g.b[i]);
                check(p.c[i], g.c[i]);
                for (std::size_t j = 0; j < 2; ++j) check(p.U(i, j), g.U(i, j));
                const double dl = derivative(p.scheme, p.w[i]);
                if (dl != 0.0) CHECK(g.w[i] == doctest::Approx(g.lambda[i] * dl).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("norms, eigenvalues and kernels") {
    SSMParams p;
    p.scheme = parse_scheme("direct@disc");
    p.activation = Activation::Identity;
    p.w = {0.5, -0.8};
    p.U = Matrix(2, 1);
    p.U(0, 0) = 3.0;
    p.U(1, 0) = 4.0;
    p.b = {0.0, 0.0};
    p.c = {1.0, 1.0};
    CHECK(max_eigenvalue(p) == 0.8);
    CHECK(weight_norm(p) == doctest::Approx(5.0));
    CHECK(has_stable_eigenvalues(p));
    const auto k = model_kernel(p);
    CHECK(k.c == std::vector<double>{3.0, 4.0});
    CHECK(k.mode == TimeMode::Discrete);
    p.w[1] = -1.5;
    CHECK_FALSE(has_stable_eigenvalues(p));

    const auto mem = memory_function_estimate(random_params("exp@cont", Activation::Identity, 3, 1, 1.0, 5), 20);
    auto lin = random_params("exp@cont", Activation::Identity, 3, 1, 1.0, 5);
    const auto w = lag_weights(model_kernel(lin), 21, 1.0);
    // for a linear readout the largest amplitude wins: 64 / 65 of the lag weight
    for (std::size_t k2 = 0; k2 < mem.size(); ++k2) CHECK(mem[k2] == doctest::Approx(64.0 / 65.0 * std::abs(w[k2 + 1])).epsilon(1e-9));
}

TEST_CASE("checkpoints round trip exactly") {
    const auto p = random_params("best:a=2,b=0.75@disc", Activation::Softsign, 6, 2, 1.0, 31);
    CHECK(params_from_json(checkpoint_json(p)) == p);
    const auto path = std::filesystem::temp_directory_path() / "ssmlab_ckpt_roundtrip.json";
    save_checkpoint(path, p);
    CHECK(load_checkpoint(path) == p);
    std::filesystem::remove(path);
    CHECK_THROWS(params_from_json("{\"scheme\": 3}"));
}

TEST_CASE("invalid models are rejected") {
    auto p = random_params("exp@cont", Activation::Tanh, 3, 1, 1.0, 41);
    p.c.pop_back();
    CHECK_THROWS_AS(validate(p), ContractError);
    auto q = random_params("exp@cont", Activation::Tanh, 3, 1, 1.0, 41);
    q.b[0] = std::nan("");
    CHECK_THROWS_AS(validate(q), ConfigError);

    SSMParams blow;
    blow.scheme = parse_scheme("direct@disc");
    blow.activation = Activation::Identity;
    blow.w = {1.5};
    blow.U = Matrix(1, 1, 1.0);
    blow.b = {0.0};
    blow.c = {1.0};
    const Matrix x(3000, 1, 1.0);
    CHECK_THROWS_AS(forward(blow, x), NumericError);
    CHECK_THROWS_AS(forward_scan(blow, x, 2), NumericError);
}
