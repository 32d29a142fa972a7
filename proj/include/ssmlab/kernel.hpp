#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ssmlab/reparam.hpp"

namespace ssmlab {

/// rho(t) = (t + 1)^(-gamma), gamma > 1.
struct PolyDecay {
    double gamma = 1.1;
};

/// rho(t) = exp(-rate t), rate > 0.
struct ExpDecay {
    double rate = 1.0;
};

/// Piecewise-linear kernel through (t[i], values[i]); t[0] = 0, strictly increasing.
/// Zero beyond the last grid point.
struct Tabulated {
    std::vector<double> t;
    std::vector<double> values;
};

/// A target memory kernel: the density of the representing measure of a
/// linear functional.
class MemoryKernel {
public:
    using Kind = std::variant<PolyDecay, ExpDecay, Tabulated>;

    static MemoryKernel poly_decay(double gamma);
    static MemoryKernel exp_decay(double rate);
    static MemoryKernel tabulated(std::vector<double> t, std::vector<double> values);

    const Kind& kind() const { return kind_; }

private:
    explicit MemoryKernel(Kind kind) : kind_(std::move(kind)) {}
    Kind kind_;
};

/// The kernel realized by a linear diagonal SSM: sum_i c_i exp(lambda_i t)
/// (continuous) or sum_i c_i lambda_i^k at step k (discrete).
///
/// `dt` is the duration of one discrete step; it only matters when a
/// discrete kernel is compared against a continuous-time one.
struct ModelKernel {
    std::vector<double> c;
    std::vector<double> lambda;
    TimeMode mode = TimeMode::Continuous;
    double dt = 1.0;
};

using AnyKernel = std::variant<MemoryKernel, ModelKernel>;

struct QuadratureConfig {
    double dt = 0.01;
    double horizon = 1000.0;
    /// Maximum absolute mass a model kernel may keep beyond the horizon; the
    /// horizon is doubled until this holds.
    double tail_tolerance = 1e-4;
    /// When false the integral stops at the horizon (finite-window norm).
    bool include_tail = true;
};

/// Throws ConfigError unless dt, horizon and tail_tolerance are positive and
/// horizon / dt is an integer.
void validate(const QuadratureConfig& quad);

/// Throws ConfigError when kernel parameters violate their invariants.
void validate(const MemoryKernel& k);
void validate(const ModelKernel& k);

double eval_kernel(const MemoryKernel& k, double t);
/// Discrete kernels are evaluated at step t, which must be a nonnegative integer.
double eval_kernel(const ModelKernel& k, double t);
double eval_kernel(const AnyKernel& k, double t);

/// sum |c_i| / |lambda_i| (continuous) or sum |c_i| / (1 - |lambda_i|)
/// (discrete); +inf for non-integrable kernels. Upper bound on the L1 norm,
/// exact when all c_i share a sign.
double model_l1_mass(const ModelKernel& k);

bool is_integrable(const ModelKernel& k);

/// L1 norm on [0, inf): composite trapezoid on [0, T] plus the analytic tail.
double kernel_l1_norm(const AnyKernel& k, const QuadratureConfig& quad = {});

/// L1 distance on [0, inf). Two continuous-time kernels are compared by
/// trapezoid on [0, T] plus the difference of their analytic tails. When a
/// discrete kernel is involved the comparison runs over per-step lag weights.
double kernel_l1_distance(const AnyKernel& a, const AnyKernel& b, const QuadratureConfig& quad = {});

/// Lag weights W[0..count) of the sampled functional with zero-order-hold
/// inputs: W[0] = 0 and W[n] = int_{(n-1)dt}^{n dt} rho for continuous
/// kernels, W[n] = rho[n-1] for discrete ones.
std::vector<double> lag_weights(const AnyKernel& k, std::size_t count, double dt);

/// y_k = sum_{n=1..k} W[n] x_{k-n}: the convolution integral of a
/// piecewise-constant input held over each step. Inputs before index 0 are zero.
std::vector<double> apply_linear_functional(const AnyKernel& k, std::span<const double> x, double dt);

/// |rho(t)|: for a linear functional the supremum over Heaviside amplitudes
/// of |d/dt H_t(u^x)| / (|x| + 1) equals |rho(t)|.
double memory_function(const AnyKernel& k, double t);

/// `poly:<gamma>`, `expdecay:<rate>`, or `csv:<path>` (two-column `t,rho`).
MemoryKernel parse_kernel_spec(std::string_view spec);

Tabulated read_kernel_csv(const std::filesystem::path& path);
void write_kernel_csv(const std::filesystem::path& path, const Tabulated& table);

} // namespace ssmlab
