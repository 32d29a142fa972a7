#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ssmlab {

enum class Family { Direct, ReLU, Exp, Softplus, Tanh, Best };
enum class TimeMode { Continuous, Discrete };

/// A map f: w -> lambda from a trainable weight to a recurrent eigenvalue.
///
/// `a` and `b` are only read for the Best family. Construct through
/// `make_scheme` or `parse_scheme` to get validated instances.
struct Scheme {
    Family family = Family::Exp;
    TimeMode mode = TimeMode::Continuous;
    double a = 1.0;
    double b = 0.5;

    bool operator==(const Scheme&) const = default;
};

/// Throws ConfigError if the family/mode/parameter combination is invalid.
void validate(const Scheme& scheme);

Scheme make_scheme(Family family, TimeMode mode, double a = 1.0, double b = 0.5);

/// Parses `family[:a=<float>,b=<float>]@{cont|disc}`, e.g. `best:a=1,b=0.5@disc`.
Scheme parse_scheme(std::string_view spec);
std::string to_string(const Scheme& scheme);

std::string_view family_name(Family family);
std::string_view mode_name(TimeMode mode);
TimeMode parse_time_mode(std::string_view token);

/// lambda = f(w).
double apply(const Scheme& scheme, double w);

/// f'(w). At the ReLU kink the left derivative (0) is returned.
double derivative(const Scheme& scheme, double w);

/// 1 - f(w), evaluated without cancellation where the family allows it.
double complement(const Scheme& scheme, double w);

/// |f'(w)| / f(w)^2 (continuous) or |f'(w)| / (1 - f(w))^2 (discrete).
///
/// ReLU weights in the flat region (w <= 0) return 0, matching the indicator
/// in the closed form. Other singular points throw DomainError.
double gradient_scale(const Scheme& scheme, double w);

/// Simplified closed form of the gradient scale as tabulated for the named
/// families. Direct has no tabulated row and returns nullopt.
std::optional<double> tabulated_gradient_scale(const Scheme& scheme, double w);

/// |f(w)| * sup_{|v - w| <= beta} int_0^inf |exp(f(v) t) - exp(f(w) t)| dt,
/// evaluated in closed form. Returns +inf when f reaches 0 inside the ball.
/// Continuous mode only.
double stability_gap(const Scheme& scheme, double w, double beta);

/// Certified g(beta) for the stable families: e^beta - 1 for Exp and
/// Softplus, a (beta^2 + 2 beta |w|) / b for continuous Best.
double stability_bound_g(const Scheme& scheme, double w, double beta);

/// Best-family certificate made uniform over the weight set |w| <= w_max.
double stability_bound_g_uniform(const Scheme& scheme, double w_max, double beta);

/// Builds the Best scheme with curvature a = l_over_c and offset b, and checks
/// on a probe grid that its gradient scale is 2a|w|.
Scheme derive_best_scheme(double l_over_c, double b, TimeMode mode);

/// Closed-form inverse of f. Best is even in w; the nonnegative root is returned.
double invert(const Scheme& scheme, double lambda);

/// True when lambda is a stable eigenvalue for the scheme's time mode
/// (lambda < 0 continuous, |lambda| <= 1 discrete).
bool is_stable_eigenvalue(TimeMode mode, double lambda);

} // namespace ssmlab
