#include "doctest.h"

#include <cmath>
#include <sstream>

#include "ssmlab/errors.hpp"
#include "ssmlab/perturb.hpp"

using namespace ssmlab;

namespace {

SSMParams single_unit(const char* scheme, double lambda) {
    SSMParams p;
    p.scheme = parse_scheme(scheme);
    p.activation = Activation::Identity;
    p.w = {invert(p.scheme, lambda)};
    p.U = Matrix(1, 1, 1.0);
    p.b = {0.0};
    p.c = {1.0};
    return p;
}

SSMParams unit_block(std::size_t m, double spread) {
    SSMParams p;
    p.scheme = parse_scheme("exp@cont");
    p.activation = Activation::Identity;
    p.U = Matrix(m, 1, 1.0);
    for (std::size_t i = 0; i < m; ++i) {
        p.w.push_back(invert(p.scheme, -spread * (i + 1.0)));
        p.b.push_back(0.0);
        p.c.push_back(0.5 / m);
    }
    return p;
}

PerturbConfig exact_quadrature() {
    PerturbConfig c;
    QuadratureConfig q;
    q.dt = 0.001;
    q.horizon = 50.0;
    q.tail_tolerance = 1e-9;
    q.include_tail = true;
    c.quadrature = q;
    return c;
}

} // namespace

TEST_CASE("beta grids") {
    const auto g = default_beta_grid();
    REQUIRE(g.size() == 22);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1e-3);
    CHECK(g[21] == doctest::Approx(1e-3 * 1024.0));
    CHECK(parse_beta_grid("geo:0.001:sqrt2:21") == g);
    CHECK(parse_beta_grid("0,0.1,0.2") == std::vector<double>{0.0, 0.1, 0.2});
    PerturbConfig c;
    c.betas = {0.1, 0.2};
    CHECK_THROWS_AS(validate(c), ConfigError);
    c.betas = {0.0, 0.2, 0.1};
    CHECK_THROWS_AS(validate(c), ConfigError);
    c.betas = {0.0, 0.1};
    c.samples_per_beta = 0;
    CHECK_THROWS_AS(validate(c), ConfigError);
    CHECK_THROWS(parse_beta_grid("geo:0.1:x:3"));
}

TEST_CASE("a single unit reaches e^beta - 1 with two samples") {
    const auto p = single_unit("exp@cont", -1.0);
    const AnyKernel target = model_kernel(p);
    auto cfg = exact_quadrature();
    cfg.samples_per_beta = 2;
    for (double beta : {0.01, 0.1, 0.5}) {
        const auto est = estimate_perturbation_error(p, target, beta, cfg);
        // int |e^{-a t} - e^{-t}| = |1/a - 1| with a = e^{-beta} on the worse side
        CHECK(est.value == doctest::Approx(std::expm1(beta)).epsilon(1e-6));
        CHECK(est.samples == 2);
    }
    const auto zero = estimate_perturbation_error(p, target, 0.0, cfg);
    CHECK(zero.value == 0.0);
    CHECK(zero.samples == 1);
}

TEST_CASE("beta = 0 reproduces the unperturbed error") {
    const auto p = unit_block(3, 0.2);
    const auto target = MemoryKernel::poly_decay(1.1);
    PerturbConfig cfg;
    const auto est = estimate_perturbation_error(p, target, 0.0, cfg);
    CHECK(est.value == model_error(p, target, cfg));
    cfg.metric = ErrorMetric::SobolevEmpirical;
    CHECK(estimate_perturbation_error(p, target, 0.0, cfg).value == model_error(p, target, cfg));
}

TEST_CASE("each parameter group moves by exactly beta") {
    auto p = unit_block(3, 0.3);
    p.U = Matrix(3, 1, 0.7);
    PerturbConfig cfg;
    cfg.perturb_set = PerturbSet::AllWeights;
    std::vector<double> d(12);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::sin(1.0 + i);
    for (std::size_t g = 0; g < 4; ++g) {
        const double n = std::hypot(d[3 * g], d[3 * g + 1], d[3 * g + 2]);
        for (std::size_t i = 0; i < 3; ++i) d[3 * g + i] /= n;
    }
    const double beta = 0.25;
    const auto q = perturb_params(p, d, beta, cfg);
    auto group_norm = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(s);
    };
    CHECK(group_norm(q.w, p.w) == doctest::Approx(beta));
    CHECK(group_norm(q.U.data, p.U.data) == doctest::Approx(beta));
    CHECK(group_norm(q.b, p.b) == doctest::Approx(beta));
    CHECK(group_norm(q.c, p.c) == doctest::Approx(beta));

    cfg.perturb_set = PerturbSet::RecurrentOnly;
    const auto r = perturb_params(p, std::span<const double>(d.data(), 3), beta, cfg);
    CHECK(group_norm(r.w, p.w) == doctest::Approx(beta));
    CHECK(r.c == p.c);

    cfg.space = PerturbSpace::Eigenvalue;
    const auto e = perturb_params(p, std::span<const double>(d.data(), 3), beta, cfg);
    CHECK(e.scheme.family == Family::Direct);
    CHECK(group_norm(eigenvalues(e), eigenvalues(p)) == doctest::Approx(beta));
}

TEST_CASE("leaving the integrable region gives infinity") {
    const auto p = single_unit("direct@cont", -0.05);
    PerturbConfig cfg;
    cfg.samples_per_beta = 2;
    CHECK(std::isinf(estimate_perturbation_error(p, MemoryKernel::poly_decay(1.1), 0.1, cfg).value));
    CHECK(std::isfinite(estimate_perturbation_error(p, MemoryKernel::poly_decay(1.1), 0.01, cfg).value));
    const auto q = single_unit("direct@disc", 0.95);
    CHECK(std::isinf(estimate_perturbation_error(q, MemoryKernel::poly_decay(1.1), 0.05, cfg).value));
    cfg.metric = ErrorMetric::SobolevEmpirical;
    CHECK(std::isinf(estimate_perturbation_error(p, MemoryKernel::poly_decay(1.1), 0.1, cfg).value));
}

TEST_CASE("estimates depend on the seed and beta only") {
    const auto p = unit_block(4, 0.1);
    const auto target = MemoryKernel::poly_decay(1.1);
    PerturbConfig cfg;
    cfg.samples_per_beta = 6;
    const auto a = estimate_perturbation_error(p, target, 0.1, cfg);
    cfg.workers = 3;
    const auto b = estimate_perturbation_error(p, target, 0.1, cfg);
    CHECK(a.value == b.value);
    CHECK(a.direction_hash == b.direction_hash);
    cfg.seed = 1;
    CHECK(estimate_perturbation_error(p, target, 0.1, cfg).direction_hash != a.direction_hash);

    cfg.seed = 0;
    SSMParams tanh = p;
    tanh.activation = Activation::Tanh;
    CHECK_THROWS_AS(model_error(tanh, target, cfg), ConfigError);
    cfg.metric = ErrorMetric::SobolevEmpirical;
    CHECK(std::isfinite(model_error(tanh, target, cfg)));
}

TEST_CASE("metrics rank a common direction the same way") {
    const auto p = unit_block(3, 0.15);
    const auto target = MemoryKernel::poly_decay(1.1);
    const std::vector<double> d{1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0)};
    PerturbConfig l1, sob;
    sob.metric = ErrorMetric::SobolevEmpirical;
    double prev_l1 = -1.0, prev_sob = -1.0;
    for (double beta : {0.0, 0.2, 0.5, 1.0}) {
        const auto q = perturb_params(p, d, beta, l1);
        const double e1 = model_error(q, target, l1), e2 = model_error(q, target, sob);
        CHECK(e1 > prev_l1);
        CHECK(e2 > prev_sob);
        prev_l1 = e1;
        prev_sob = e2;
    }
}

TEST_CASE("sweep keeps a monotone envelope and finds crossings") {
    const std::vector<SSMParams> models{unit_block(4, 0.1), unit_block(2, 0.3)};
    PerturbConfig cfg;
    cfg.betas = {0.0, 0.05, 0.1, 0.2, 0.4, 0.8};
    cfg.samples_per_beta = 4;
    const auto report = sweep(models, MemoryKernel::poly_decay(1.1), cfg, {"a", "b"});
    REQUIRE(report.rows.size() == 12);
    CHECK(report.rows[0].m == 2);
    CHECK(report.checkpoint_ids == std::vector<std::string>{"b", "a"});
    std::size_t corrections = 0;
    for (std::size_t g = 0; g < 2; ++g) {
        for (std::size_t j = 0; j < 6; ++j) {
            const auto& row = report.rows[g * 6 + j];
            CHECK(row.beta == cfg.betas[j]);
            CHECK(row.e_hat >= row.e_hat_raw);
            if (j > 0) {
                const auto& prev = report.rows[g * 6 + j - 1];
                CHECK(row.e_hat >= prev.e_hat);
                if (row.e_hat_raw < prev.e_hat) ++corrections;
            }
        }
    }
    CHECK(report.envelope_corrections == corrections);

    REQUIRE(report.crossings.size() == 1);
    const auto& cross = report.crossings[0];
    CHECK(cross.m == 2);
    CHECK(cross.next_m == 4);
    std::optional<double> expected;
    for (std::size_t j = 0; j < 6 && !expected; ++j)
        if (report.rows[6 + j].e_hat >= report.rows[j].e_hat) expected = cfg.betas[j];
    CHECK(cross.beta == expected);
    for (std::size_t j = 0; j < 6; ++j) CHECK(report.rows[j].crossing == (expected && *expected == cfg.betas[j]));

    std::ostringstream csv;
    write_report_csv(csv, report);
    CHECK(csv.str().rfind("m,beta,e_hat,e_hat_raw,samples,crossing_flag", 0) == 0);
    CHECK_THROWS_AS(sweep({models[0], models[0]}, MemoryKernel::poly_decay(1.1), cfg), ConfigError);
}

TEST_CASE("enum names round trip") {
    for (auto m : {ErrorMetric::L1Kernel, ErrorMetric::SobolevEmpirical}) CHECK(parse_metric(metric_name(m)) == m);
    for (auto s : {PerturbSet::RecurrentOnly, PerturbSet::AllWeights}) CHECK(parse_perturb_set(perturb_set_name(s)) == s);
    for (auto s : {PerturbSpace::Weight, PerturbSpace::Eigenvalue}) CHECK(parse_perturb_space(perturb_space_name(s)) == s);
    CHECK_THROWS_AS(parse_metric("l2"), ConfigError);
}
