#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ssmlab/kernel.hpp"
#include "ssmlab/ssm.hpp"

namespace ssmlab {

enum class PerturbSet { RecurrentOnly, AllWeights };
enum class ErrorMetric { L1Kernel, SobolevEmpirical };
/// Weight perturbs w before f is applied; Eigenvalue perturbs lambda directly.
enum class PerturbSpace { Weight, Eigenvalue };

/// 0 followed by 1e-3 * sqrt(2)^j, j = 0..20.
std::vector<double> default_beta_grid();

/// `geo:start:ratio:count` (ratio may be `sqrt2`) gives 0 followed by count
/// geometric points; anything else is a comma separated list.
std::vector<double> parse_beta_grid(std::string_view spec);

struct PerturbConfig {
    std::vector<double> betas = default_beta_grid();
    std::size_t samples_per_beta = 30;
    PerturbSet perturb_set = PerturbSet::RecurrentOnly;
    ErrorMetric metric = ErrorMetric::L1Kernel;
    PerturbSpace space = PerturbSpace::Weight;
    std::uint64_t seed = 0;
    /// Window for the L1 kernel metric. Unset: [0, window_steps * dt], no tail.
    std::optional<QuadratureConfig> quadrature;
    std::size_t window_steps = 100;
    /// Probe inputs for the empirical Sobolev metric (length window_steps).
    std::size_t probe_count = 64;
    int workers = 1;
};

/// Throws ConfigError unless the grid is ascending, starts at 0 and samples >= 1.
void validate(const PerturbConfig& config);

/// Perturbed model theta + beta * d for a direction d with one block per
/// parameter group (w, then U, b, c for AllWeights), each of unit norm.
SSMParams perturb_params(const SSMParams& params, std::span<const double> direction, double beta,
                         const PerturbConfig& config);

/// Error of a (possibly perturbed) model against the target. +inf when some
/// eigenvalue leaves the integrable region.
double model_error(const SSMParams& params, const AnyKernel& target, const PerturbConfig& config);

struct PerturbationEstimate {
    /// Largest sampled error: a lower bound on the sup over the ball.
    double value = 0.0;
    std::size_t samples = 0;
    /// FNV-1a of the direction that attained the maximum.
    std::uint64_t direction_hash = 0;
};

/// Samples directions uniformly on the sphere of radius beta (antithetic
/// pairs d, -d). The draws depend on (seed, beta) only.
PerturbationEstimate estimate_perturbation_error(const SSMParams& params, const AnyKernel& target, double beta,
                                                 const PerturbConfig& config);

struct PerturbationRow {
    std::size_t m = 0;
    double beta = 0.0;
    /// Running max over the grid (monotone envelope).
    double e_hat = 0.0;
    double e_hat_raw = 0.0;
    std::size_t samples = 0;
    std::uint64_t direction_hash = 0;
    /// Set on the row of model m at the beta where the next larger model's
    /// curve first reaches it.
    bool crossing = false;
};

struct Crossing {
    std::size_t m = 0;
    std::size_t next_m = 0;
    /// Smallest grid beta with E(next_m) >= E(m); unset when the curves never meet.
    std::optional<double> beta;
};

struct PerturbationReport {
    std::vector<PerturbationRow> rows;
    std::vector<Crossing> crossings;
    std::string metric;
    std::uint64_t seed = 0;
    std::vector<std::string> checkpoint_ids;
    /// Rows where the raw estimate dropped below an earlier one.
    std::size_t envelope_corrections = 0;
};

/// Full (m, beta) table. Checkpoints are ordered by width, which must be distinct.
PerturbationReport sweep(const std::vector<SSMParams>& checkpoints, const MemoryKernel& target,
                         const PerturbConfig& config, std::vector<std::string> checkpoint_ids = {});

/// `m,beta,e_hat,e_hat_raw,samples,crossing_flag`.
void write_report_csv(std::ostream& out, const PerturbationReport& report);

std::string_view metric_name(ErrorMetric metric);
ErrorMetric parse_metric(std::string_view name);
std::string_view perturb_set_name(PerturbSet set);
PerturbSet parse_perturb_set(std::string_view name);
std::string_view perturb_space_name(PerturbSpace space);
PerturbSpace parse_perturb_space(std::string_view name);

} // namespace ssmlab
