#pragma once

// Velocity averaging of the interference signal. The polarizability phase
// scales as 1/v, so a beam with finite parallel speed ratio sees a shifted
// effective phase and a reduced fringe contrast:
//
//   C(phi_m) = integral P(v) exp(i phi_m u / v) dv
//   visibility ratio = |C|,   effective phase = continuous arg C.

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>

#include "lipol/errors.hpp"
#include "lipol/physics_core.hpp"
#include "lipol/quadrature.hpp"

namespace lipol {

struct VelocityDistribution {
    double u = 1.0;            // most probable velocity, m/s
    double speed_ratio = 8.0;  // S_par
    bool include_v3_prefactor = false;

    void validate() const {
        if (!(u > 0)) throw UsageError("velocity distribution requires u > 0");
        if (!(speed_ratio > 1)) throw UsageError("velocity distribution requires S_par > 1");
    }

    /// Integration window u(1 -+ 6/S). The lower edge is kept at or above
    /// 0.05 u so that the 1/v phase stays bounded for small speed ratios.
    double window_lo() const { return u * std::max(1.0 - 6.0 / speed_ratio, 0.05); }
    double window_hi() const { return u * (1.0 + 6.0 / speed_ratio); }
};

/// Shared numerical settings for the dispersion integrals.
struct DispersionOptions {
    double abs_tolerance = 1e-10;  // on each of Re C and Im C
    double max_phase_step = pi / 4; // continuation grid in phi_m
};

namespace detail {

inline double gaussian_weight(double v, const VelocityDistribution& d) {
    const double x = (v - d.u) * d.speed_ratio / d.u;
    return d.speed_ratio / (d.u * std::sqrt(pi)) * std::exp(-x * x);
}

inline double unnormalized_weight(double v, const VelocityDistribution& d) {
    const double w = gaussian_weight(v, d);
    if (!d.include_v3_prefactor) return w;
    const double r = v / d.u;
    return r * r * r * w;
}

/// Normalization of the weight over the window. Exactly 1 (up to 1e-16
/// truncation) without the v^3 prefactor.
inline double weight_normalization(const VelocityDistribution& d, double tol) {
    if (!d.include_v3_prefactor) return 1.0;
    auto res = quadrature::integrate<double>(
        [&](double v) { return unnormalized_weight(v, d); }, d.window_lo(), d.window_hi(),
        {.abs_tolerance = tol * 1e-2});
    if (!res.converged) {
        throw QuadratureError("velocity normalization did not converge", res.error);
    }
    return res.value;
}

} // namespace detail

/// Probability density of the atom velocity, s/m.
inline double velocity_pdf(double v, const VelocityDistribution& dist,
                           const DispersionOptions& opts = {}) {
    dist.validate();
    if (!(v > 0)) throw UsageError("velocity_pdf requires v > 0");
    if (!dist.include_v3_prefactor) return detail::gaussian_weight(v, dist);
    return detail::unnormalized_weight(v, dist) /
           detail::weight_normalization(dist, opts.abs_tolerance);
}

struct FringeAverage {
    double effective_phase = 0;  // rad
    double visibility_ratio = 1; // V / V0
    double error = 0;            // largest quadrature error estimate along the continuation
};

/// Velocity-averaged complex fringe factor. The phase is tracked by
/// continuation from phi_m = 0 on a grid no coarser than max_phase_step;
/// internally the integrand carries exp(i phi (u/v - 1)) so only the
/// dispersion-induced deviation from phi_m is unwrapped.
inline FringeAverage complex_fringe_average(double phi_m, const VelocityDistribution& dist,
                                            const DispersionOptions& opts = {}) {
    dist.validate();
    if (!std::isfinite(phi_m)) throw UsageError("phi_m must be finite");
    if (phi_m == 0.0) return {};

    const double norm = detail::weight_normalization(dist, opts.abs_tolerance);
    const double lo = dist.window_lo();
    const double hi = dist.window_hi();
    const quadrature::Options qopts{.abs_tolerance = opts.abs_tolerance};

    auto evaluate = [&](double phi) {
        auto res = quadrature::integrate<std::complex<double>>(
            [&](double v) {
                const double w = detail::unnormalized_weight(v, dist);
                const double arg = phi * (dist.u / v - 1.0);
                return std::complex<double>(w * std::cos(arg), w * std::sin(arg));
            },
            lo, hi, qopts);
        if (!res.converged) {
            throw QuadratureError("fringe average did not converge at phi = " + std::to_string(phi),
                                  res.error);
        }
        res.value /= norm;
        return res;
    };

    const int steps =
        std::max(1, static_cast<int>(std::ceil(std::abs(phi_m) / opts.max_phase_step)));
    double deviation = 0;
    double worst_error = 0;
    std::complex<double> c{1.0, 0.0};
    for (int k = 1; k <= steps; ++k) {
        const double phi = phi_m * static_cast<double>(k) / steps;
        auto res = evaluate(phi);
        c = res.value;
        worst_error = std::max(worst_error, res.error);
        deviation += std::remainder(std::arg(c) - deviation, two_pi);
    }
    return {phi_m + deviation, std::abs(c), worst_error};
}

/// Expected counts I0 [1 + V0 (V/V0) cos(psi + effective phase)] for a
/// precomputed fringe average.
inline double dispersed_signal(double psi, double I0, double base_visibility,
                               const FringeAverage& avg) {
    if (!(I0 >= 0)) throw UsageError("I0 must be nonnegative");
    if (!(base_visibility >= 0 && base_visibility <= 1)) {
        throw UsageError("base visibility must lie in [0, 1]");
    }
    return I0 * (1.0 + base_visibility * avg.visibility_ratio * std::cos(psi + avg.effective_phase));
}

inline double dispersed_signal(double psi, double I0, double base_visibility, double phi_m,
                               const VelocityDistribution& dist,
                               const DispersionOptions& opts = {}) {
    return dispersed_signal(psi, I0, base_visibility, complex_fringe_average(phi_m, dist, opts));
}

/// Closed form obtained by expanding u/v = 1 - d + d^2 with d = (v - u)/u
/// and integrating the Gaussian exactly over all d:
///
///   C = exp(i phi) S / sqrt(S^2 - i phi) exp(-phi^2 / (4 (S^2 - i phi))).
///
/// Ignores the v^3 prefactor. Valid for S_par >~ 3; a regression check on
/// the quadrature, never used for fitting.
inline FringeAverage second_order_approximation(double phi_m, const VelocityDistribution& dist) {
    dist.validate();
    const double s2 = dist.speed_ratio * dist.speed_ratio;
    const double s4 = s2 * s2;
    const double phi2 = phi_m * phi_m;
    const double denom = s4 + phi2;
    // arg and modulus of S / sqrt(S^2 - i phi) and of the Gaussian factor.
    const double phase = phi_m + 0.5 * std::atan2(phi_m, s2) - phi2 * phi_m / (4.0 * denom);
    const double ratio = std::sqrt(s2 / std::sqrt(denom)) * std::exp(-phi2 * s2 / (4.0 * denom));
    return {phase, ratio, 0.0};
}

} // namespace lipol
