#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ssmlab/kernel.hpp"
#include "ssmlab/ssm.hpp"

namespace ssmlab {

enum class OptimizerKind { SGD, Adam };
enum class LossKind { MSE, L1Kernel };

struct TrainConfig {
    MemoryKernel target = MemoryKernel::poly_decay(1.1);
    std::size_t width = 16;
    std::size_t input_dim = 1;
    Scheme scheme = make_scheme(Family::Exp, TimeMode::Continuous);
    Activation activation = Activation::Tanh;
    std::size_t seq_len = 100;
    std::size_t dataset_size = 153600;
    std::size_t batch_size = 512;
    double lr = 0.01;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t epochs = 1;
    /// Stop after this many optimizer steps; 0 means run all epochs.
    std::size_t max_steps = 0;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::MSE;
    double dt = 1.0;
    bool train_bias = true;
    /// Initial eigenvalues are drawn uniformly from [init_low, init_high].
    /// Unset bounds default to [-0.99, -0.01] (continuous) or [0.01, 0.99] (discrete).
    std::optional<double> init_low;
    std::optional<double> init_high;
    int workers = 1;
    /// Start from these parameters instead of a fresh draw (must match the
    /// width, input dimension, scheme, activation and dt above).
    std::optional<SSMParams> warm_start;
};

/// Throws ConfigError for invalid combinations (N not divisible by B, lr < 0, ...).
void validate(const TrainConfig& config);

/// N input/label sequences of length K with a single input channel, row-major.
struct Dataset {
    std::size_t size = 0;
    std::size_t seq_len = 0;
    std::vector<double> x;
    std::vector<double> y;

    std::span<const double> input(std::size_t n) const { return {x.data() + n * seq_len, seq_len}; }
    std::span<const double> label(std::size_t n) const { return {y.data() + n * seq_len, seq_len}; }
    bool operator==(const Dataset&) const = default;
};

/// Inputs i.i.d. standard normal per step, labels from the target functional.
/// With `heaviside_probe` sample 0 is replaced by the unit step input.
Dataset generate_dataset(const MemoryKernel& target, std::size_t seq_len, std::size_t size, double dt,
                         std::uint64_t seed, bool heaviside_probe = false, int workers = 1);

/// Wide CSV: `sample,x0..x{K-1},y0..y{K-1}`.
void write_dataset_csv(std::ostream& out, const Dataset& data);
Dataset read_dataset_csv(const std::filesystem::path& path);

/// Initial parameters. Eigenvalues, U and c are drawn from the seed alone and
/// w = f^{-1}(lambda), so runs that differ only in the scheme start from the
/// same effective model.
SSMParams initial_params(const TrainConfig& config);

struct TelemetryRecord {
    std::size_t step = 0;
    double loss = 0.0;
    /// max / min of |dLoss/dw_i| / |w_i| over recurrent weights with |w_i| > 1e-12.
    double gow_max = 0.0;
    double gow_min = 0.0;
    std::size_t gow_excluded = 0;
    /// Same ratio over every trainable parameter.
    double gow_all_max = 0.0;
    double gow_all_min = 0.0;
    double max_eig = 0.0;
    double weight_norm = 0.0;
    /// Gradient-bound check |dLoss/dw_i| <= bound_constant * G_f(w_i), where
    /// bound_constant = max_i |c_i| * batch_mass * eigen_factor.
    double max_abs_c = 0.0;
    double batch_mass = 0.0;
    double eigen_factor = 0.0;
    double bound_constant = 0.0;
    std::size_t bound_violations = 0;
    /// max_i |dLoss/dw_i| / (max|c| * batch_mass * G_f(w_i)), the same check
    /// without the eigenvalue factor.
    double bound_ratio_max = 0.0;
    /// Weights where G_f is singular and the check was skipped.
    std::size_t bound_skipped = 0;
};

enum class TrainStatus { Completed, Diverged };

struct TrainResult {
    SSMParams initial;
    SSMParams params;
    std::vector<TelemetryRecord> telemetry;
    TrainStatus status = TrainStatus::Completed;
    std::optional<std::size_t> diverged_step;
    std::vector<std::string> warnings;
};

using TelemetrySink = std::function<void(const TelemetryRecord&)>;

TrainResult train(const TrainConfig& config, const TelemetrySink& sink = {});
/// Trains on a prepared dataset (its size and length override the config;
/// the l1-kernel loss ignores the dataset).
TrainResult train(const TrainConfig& config, const Dataset& data, const TelemetrySink& sink = {});

/// Mean squared error of the model on the dataset.
double dataset_loss(const SSMParams& params, const Dataset& data, int workers = 1);

/// Finite-window L1 distance between the model kernel and the target over
/// [0, seq_len * dt], the horizon the training data observes.
QuadratureConfig training_window(std::size_t seq_len, double dt);
double kernel_distance_to_target(const SSMParams& params, const MemoryKernel& target, const QuadratureConfig& quad);

/// `step,loss,gow_max,gow_min,max_eig,weight_norm`.
void write_telemetry_header(std::ostream& out);
void write_telemetry_row(std::ostream& out, const TelemetryRecord& record);

} // namespace ssmlab
