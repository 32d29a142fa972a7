#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssmlab/kernel.hpp"
#include "ssmlab/matrix.hpp"
#include "ssmlab/reparam.hpp"

namespace ssmlab {

/// Pointwise readout nonlinearities. All satisfy sigma(0) = 0; Sigmoid is the
/// logistic function shifted down by 1/2.
enum class Activation { Tanh, Identity, Sigmoid, Softsign };

double activate(Activation act, double z);
double activate_derivative(Activation act, double z);
/// Lipschitz constant L0 (sup of sigma').
double lipschitz_constant(Activation act);
std::string_view activation_name(Activation act);
Activation parse_activation(std::string_view name);

/// Trainable tuple (w, U, b, c) of a width-m diagonal SSM with d inputs.
///
/// Dynamics, with lambda = f(w) and v_k = U x_k + b:
///   discrete:   h_{k+1} = lambda * h_k + v_k
///   continuous: h_{k+1} = e^{lambda dt} h_k + (e^{lambda dt} - 1) / lambda * v_k
/// and readout y_k = c^T sigma(h_k), taken before x_k is consumed (h_0 = 0).
struct SSMParams {
    std::vector<double> w;
    Matrix U;
    std::vector<double> b;
    std::vector<double> c;
    Scheme scheme;
    Activation activation = Activation::Tanh;
    double dt = 1.0;

    std::size_t width() const { return w.size(); }
    std::size_t input_dim() const { return U.cols; }
    TimeMode mode() const { return scheme.mode; }

    bool operator==(const SSMParams&) const = default;
};

/// Throws ContractError on inconsistent dimensions and ConfigError on
/// non-finite entries or an invalid scheme.
void validate(const SSMParams& params);

std::vector<double> eigenvalues(const SSMParams& params);

/// True when every eigenvalue sits inside the stable region of the time mode.
bool has_stable_eigenvalues(const SSMParams& params);

/// Hidden trajectory h_0..h_{K-1} (K x m) and outputs y_0..y_{K-1}.
struct Trajectory {
    std::vector<double> y;
    Matrix h;
};

struct Gradients {
    std::vector<double> w;
    Matrix U;
    std::vector<double> b;
    std::vector<double> c;
    /// Gradient with respect to the eigenvalues, before the chain rule through f.
    std::vector<double> lambda;
};

/// Sequential evaluation. x is K x d. Throws NumericError naming the first
/// step whose hidden state is not finite.
Trajectory forward(const SSMParams& params, const Matrix& x);

/// Same result as `forward`, computed by a work-efficient (Blelloch) prefix
/// scan. The schedule does not depend on `workers`, so outputs are
/// bit-identical for every worker count.
Trajectory forward_scan(const SSMParams& params, const Matrix& x, int workers = 1);

/// Reverse-mode gradients of a scalar loss given dLoss/dy (length K).
Gradients backward(const SSMParams& params, const Matrix& x, const Trajectory& trajectory,
                   std::span<const double> dloss_dy);

/// max(|lambda|_2, |U|_2, |b|_2, |c|_2) with |U|_2 the Frobenius norm.
double weight_norm(const SSMParams& params);

/// max_i lambda_i (continuous) or max_i |lambda_i| (discrete).
double max_eigenvalue(const SSMParams& params);

/// Kernel of the linear part seen from input channel `input`:
/// coefficients c_i U_{i,input}, rates lambda_i. The bias is not part of it.
ModelKernel model_kernel(const SSMParams& params, std::size_t input = 0);

/// Estimated memory function at steps 0..K-2 for a model with nonlinear
/// readout: max over Heaviside amplitudes x in {+-2^j, j = -3..6} of
/// |(y_{k+1} - y_k) / dt| / (|x| + 1), after removing the zero-input response.
std::vector<double> memory_function_estimate(const SSMParams& params, std::size_t steps);

/// Flat JSON checkpoint {scheme, time_mode, dt, activation, m, d, w, U, b, c}.
std::string checkpoint_json(const SSMParams& params);
SSMParams params_from_json(std::string_view text);
void save_checkpoint(const std::filesystem::path& path, const SSMParams& params);
SSMParams load_checkpoint(const std::filesystem::path& path);

} // namespace ssmlab
