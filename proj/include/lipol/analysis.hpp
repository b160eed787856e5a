#pragma once

// Campaign-level estimation: drift-cancelling phase shifts, the joint
// phase + visibility fit for {phi_m / V0^2, S_par}, beam velocity
// combination and the polarizability with its uncertainty budget.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lipol/errors.hpp"
#include "lipol/fringe_fit.hpp"
#include "lipol/least_squares.hpp"
#include "lipol/physics_core.hpp"
#include "lipol/signal_model.hpp"

namespace lipol {

struct Measured {
    double value = 0;
    double sigma = 0;

    double relative() const { return sigma / std::abs(value); }
};

//
// Phase shifts
//

struct ShiftPoint {
    int index = 0;
    double voltage = 0;
    double phase_shift = 0; // rad
    double phase_sigma = 0;
    double visibility_ratio = 0;
    double visibility_sigma = 0;
    bool branch_ambiguous = false;
};

enum class VisibilityReference {
    bracketing, // interpolate V between the neighbouring field-off fits
    global,     // divide by a fixed V0
};

struct ShiftOptions {
    VisibilityReference reference = VisibilityReference::bracketing;
    double global_visibility = 0.62;
    double global_visibility_sigma = 0.0;
};

/// phi(V0) = <psi_i> - (<psi_{i-1}> + <psi_{i+1}>) / 2 for a field-on fit
/// bracketed by two field-off fits. Inputs must already be branch aligned.
/// Fit errors are taken as independent.
inline ShiftPoint phase_shift_estimator(const FringeFit& prev, const FringeFit& on,
                                        const FringeFit& next, const ShiftOptions& opts = {}) {
    if (prev.voltage != 0.0 || next.voltage != 0.0) {
        throw UsageError("phase shift of recording " + std::to_string(on.index) +
                         ": bracketing recordings must be field-off");
    }
    if (!(prev.start_time <= on.start_time && on.start_time <= next.start_time)) {
        throw UsageError("phase shift of recording " + std::to_string(on.index) +
                         ": bracketing recordings are not ordered in time");
    }

    ShiftPoint p;
    p.index = on.index;
    p.voltage = on.voltage;
    p.phase_shift = on.mean_phase - 0.5 * (prev.mean_phase + next.mean_phase);
    p.phase_sigma = std::sqrt(on.mean_phase_sigma * on.mean_phase_sigma +
                              0.25 * (prev.mean_phase_sigma * prev.mean_phase_sigma +
                                      next.mean_phase_sigma * next.mean_phase_sigma));

    double ref = 0, ref_sigma = 0;
    if (opts.reference == VisibilityReference::bracketing) {
        const double span = next.start_time - prev.start_time;
        const double w = span > 0 ? (on.start_time - prev.start_time) / span : 0.5;
        ref = (1.0 - w) * prev.visibility + w * next.visibility;
        ref_sigma = std::hypot((1.0 - w) * prev.visibility_sigma, w * next.visibility_sigma);
    } else {
        ref = opts.global_visibility;
        ref_sigma = opts.global_visibility_sigma;
    }
    if (!(ref > 0)) throw NumericalError("reference visibility is not positive");
    p.visibility_ratio = on.visibility / ref;
    p.visibility_sigma =
        std::hypot(on.visibility_sigma / ref, p.visibility_ratio * ref_sigma / ref);
    return p;
}

/// Nominal model used only to pick the 2 pi branch of each field-on phase.
struct ExpectedShiftModel {
    double phase_coefficient = 1.387e-4; // rad/V^2
    double speed_ratio = 8.0;

    double expected_shift(double voltage, const DispersionOptions& d = {}) const {
        return complex_fringe_average(phase_coefficient * voltage * voltage,
                                      {1.0, speed_ratio, false}, d)
            .effective_phase;
    }
};

struct ShiftTable {
    std::vector<ShiftPoint> points;
    std::vector<std::string> warnings;
};

/// Branch-aligns a campaign of fits and applies the estimator to every
/// field-on recording bracketed by field-off neighbours (index i-1, i+1).
/// Field-off phases are unwrapped sequentially; each field-on phase is put
/// on the branch closest to the nominal model prediction.
inline ShiftTable build_shift_table(std::vector<FringeFit> fits, const ExpectedShiftModel& model,
                                    const ShiftOptions& opts = {}) {
    std::sort(fits.begin(), fits.end(),
              [](const FringeFit& x, const FringeFit& y) { return x.index < y.index; });
    ShiftTable table;

    std::map<int, FringeFit> off;
    const FringeFit* last_off = nullptr;
    for (const auto& f : fits) {
        if (f.voltage != 0.0) continue;
        FringeFit aligned =
            last_off ? phase_branch_align(f, last_off->mean_phase, 0.0).fit : f;
        auto [it, inserted] = off.emplace(f.index, aligned);
        if (!inserted) throw UsageError("duplicate recording index " + std::to_string(f.index));
        last_off = &it->second;
    }

    for (const auto& f : fits) {
        if (f.voltage == 0.0) continue;
        auto prev = off.find(f.index - 1);
        auto next = off.find(f.index + 1);
        if (prev == off.end() || next == off.end()) {
            table.warnings.push_back("recording " + std::to_string(f.index) +
                                     ": missing field-off bracket, rejected");
            continue;
        }
        const double reference = 0.5 * (prev->second.mean_phase + next->second.mean_phase);
        const BranchAlignment al =
            phase_branch_align(f, reference, model.expected_shift(f.voltage));
        ShiftPoint p = phase_shift_estimator(prev->second, al.fit, next->second, opts);
        p.branch_ambiguous = al.ambiguous;
        if (al.ambiguous) {
            table.warnings.push_back("recording " + std::to_string(f.index) +
                                     ": 2 pi branch ambiguous, needs manual resolution");
        }
        table.points.push_back(p);
    }
    return table;
}

//
// Joint fit of phase and visibility versus voltage
//

enum class ErrorMode {
    as_reported,      // per-point errors from the fringe fits only
    scatter_inflated, // add a common extra phase variance so the phase chi2 matches its dof
};

struct JointFitOptions {
    ErrorMode mode = ErrorMode::scatter_inflated;
    std::optional<double> initial_phase_coefficient;
    std::optional<double> initial_speed_ratio;
    bool include_v3_prefactor = false;
    DispersionOptions dispersion;
    lsq::Options lsq{.max_iterations = 100,
                     .gradient_tolerance = 1e-8,
                     .step_tolerance = 1e-12,
                     .cost_tolerance = 1e-14,
                     .initial_damping = 1e-3};
};

struct JointFitResult {
    Measured phase_coefficient; // rad/V^2
    Measured speed_ratio;
    double correlation = 0;
    double chi2_phase = 0;
    double chi2_visibility = 0;
    int dof = 0;
    double extra_phase_sigma = 0; // rad, nonzero only in scatter_inflated mode
    int iterations = 0;
    bool converged = false;
    std::vector<double> model_phase;      // per point
    std::vector<double> model_visibility; // per point
};

namespace detail {

inline std::pair<double, double> joint_initial_guess(const std::vector<ShiftPoint>& pts) {
    double num = 0, den = 0;
    for (const auto& p : pts) {
        const double v2 = p.voltage * p.voltage;
        const double w = v2 * v2 / (p.phase_sigma * p.phase_sigma);
        num += w * p.phase_shift / v2;
        den += w;
    }
    const double k = num / den;
    double s2_sum = 0;
    int s2_count = 0;
    for (const auto& p : pts) {
        if (p.visibility_ratio > 0.05 && p.visibility_ratio < 0.95) {
            const double phi = k * p.voltage * p.voltage;
            s2_sum += phi * phi / (-4.0 * std::log(p.visibility_ratio));
            ++s2_count;
        }
    }
    const double s = s2_count > 0 ? std::sqrt(s2_sum / s2_count) : 8.0;
    return {k, std::max(s, 1.5)};
}

/// Extra variance s^2 >= 0 with sum e_i^2 / (sigma_i^2 + s^2) = target.
inline double solve_extra_variance(const std::vector<double>& e, const std::vector<double>& sigma,
                                   double target) {
    auto chi2 = [&](double s2) {
        double sum = 0;
        for (std::size_t i = 0; i < e.size(); ++i) sum += e[i] * e[i] / (sigma[i] * sigma[i] + s2);
        return sum;
    };
    if (target <= 0 || chi2(0.0) <= target) return 0.0;
    double lo = 0, hi = 1e-12;
    while (chi2(hi) > target) hi *= 4.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (chi2(mid) > target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace detail

/// Two-parameter weighted least squares of the measured phase shifts and
/// visibility ratios against the velocity-averaged model
/// (effective_phase, visibility_ratio)(k V0^2, S_par).
inline JointFitResult joint_fit(const std::vector<ShiftPoint>& points,
                                const JointFitOptions& opts = {}) {
    if (points.size() < 3) throw UsageError("joint fit needs at least 3 shift points");
    std::set<double> voltages;
    for (const auto& p : points) {
        if (!(p.phase_sigma > 0 && p.visibility_sigma > 0)) {
            throw UsageError("joint fit needs positive per-point errors (recording " +
                             std::to_string(p.index) + ")");
        }
        voltages.insert(p.voltage);
    }
    if (voltages.size() < 2) throw UsageError("joint fit needs at least two distinct voltages");

    auto [k0, s0] = detail::joint_initial_guess(points);
    if (opts.initial_phase_coefficient) k0 = *opts.initial_phase_coefficient;
    if (opts.initial_speed_ratio) s0 = *opts.initial_speed_ratio;

    double v_max = 0;
    for (double v : voltages) v_max = std::max(v_max, std::abs(v));
    if (std::abs(k0) * v_max * v_max < 0.1) {
        throw NumericalError(
            "joint fit: all phases below 0.1 rad, speed ratio is not identifiable");
    }

    const std::size_t n = points.size();
    std::vector<double> phase_sigma(n);
    for (std::size_t i = 0; i < n; ++i) phase_sigma[i] = points[i].phase_sigma;
    double extra_var = 0;

    auto model = [&](const Eigen::VectorXd& x, std::size_t i) {
        return complex_fringe_average(x(0) * points[i].voltage * points[i].voltage,
                                      {1.0, x(1), opts.include_v3_prefactor}, opts.dispersion);
    };
    auto residuals = [&](const Eigen::VectorXd& x) {
        Eigen::VectorXd r(2 * n);
        if (!(x(1) > 1.0)) {
            r.setConstant(NAN);
            return r;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const FringeAverage m = model(x, i);
            const double sp = std::sqrt(phase_sigma[i] * phase_sigma[i] + extra_var);
            r(static_cast<Eigen::Index>(i)) = (points[i].phase_shift - m.effective_phase) / sp;
            r(static_cast<Eigen::Index>(n + i)) =
                (points[i].visibility_ratio - m.visibility_ratio) / points[i].visibility_sigma;
        }
        return r;
    };
    auto jacobian = [&](const Eigen::VectorXd& x) { return lsq::numeric_jacobian(residuals, x); };

    Eigen::VectorXd x(2);
    x << k0, s0;
    lsq::Result res;
    int total_iterations = 0;
    for (int pass = 0; pass < 20; ++pass) {
        res = lsq::levenberg_marquardt(residuals, jacobian, x, opts.lsq);
        total_iterations += res.iterations;
        if (!res.converged) {
            throw NumericalError(std::string("joint fit did not converge (stop=") +
                                 lsq::to_string(res.stop) + ")");
        }
        x = res.x;
        if (opts.mode != ErrorMode::scatter_inflated) break;

        std::vector<double> e(n);
        for (std::size_t i = 0; i < n; ++i) e[i] = points[i].phase_shift - model(x, i).effective_phase;
        const double updated =
            detail::solve_extra_variance(e, phase_sigma, static_cast<double>(n) - 1.0);
        const bool settled = std::abs(updated - extra_var) <= 1e-6 * std::max(updated, 1e-30);
        extra_var = updated;
        if (settled) {
            res = lsq::levenberg_marquardt(residuals, jacobian, x, opts.lsq);
            break;
        }
    }

    JointFitResult out;
    out.iterations = total_iterations;
    out.converged = res.converged;
    out.extra_phase_sigma = std::sqrt(extra_var);
    const Eigen::MatrixXd J = jacobian(res.x);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(J.transpose() * J);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        throw NumericalError("joint fit: singular normal matrix");
    }
    const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(2, 2));
    out.phase_coefficient = {res.x(0), std::sqrt(cov(0, 0))};
    out.speed_ratio = {res.x(1), std::sqrt(cov(1, 1))};
    out.correlation = cov(0, 1) / std::sqrt(cov(0, 0) * cov(1, 1));
    const Eigen::VectorXd r = residuals(res.x);
    out.chi2_phase = r.head(static_cast<Eigen::Index>(n)).squaredNorm();
    out.chi2_visibility = r.tail(static_cast<Eigen::Index>(n)).squaredNorm();
    out.dof = static_cast<int>(2 * n) - 2;
    for (std::size_t i = 0; i < n; ++i) {
        const FringeAverage m = model(res.x, i);
        out.model_phase.push_back(m.effective_phase);
        out.model_visibility.push_back(m.visibility_ratio);
    }
    return out;
}

//
// Beam velocity
//

struct VelocityMeasurement {
    std::string method; // doppler | bragg | supersonic | ...
    double u = 0;       // m/s
    double sigma = 0;   // m/s
};

/// Inverse-variance weighted mean of the selected measurements. With no
/// explicit subset, every method except "supersonic" (a consistency check
/// only) is used.
inline Measured combine_velocities(const std::vector<VelocityMeasurement>& measurements,
                                   const std::optional<std::vector<std::string>>& use = {}) {
    double num = 0, den = 0;
    for (const auto& m : measurements) {
        const bool selected =
            use ? std::find(use->begin(), use->end(), m.method) != use->end()
                : m.method != "supersonic";
        if (!selected) continue;
        if (!(m.sigma > 0)) throw UsageError("velocity measurement '" + m.method + "' has sigma <= 0");
        const double w = 1.0 / (m.sigma * m.sigma);
        num += w * m.u;
        den += w;
    }
    if (den == 0) throw UsageError("no velocity measurement selected");
    return {num / den, 1.0 / std::sqrt(den)};
}

//
// Polarizability
//

struct BudgetTerm {
    std::string source;
    double relative = 0; // contribution to sigma_alpha / alpha
};

struct MeasurementResult {
    Measured phase_coefficient; // rad/V^2
    Measured speed_ratio;
    Measured u;                 // m/s
    Measured alpha;             // m^3
    double effective_length = 0;
    std::vector<BudgetTerm> budget;    // summed in quadrature into alpha.sigma
    std::vector<BudgetTerm> neglected; // reported orders of magnitude, not in the total
};

/// alpha = k hbar u <h>^2 / (2 pi eps0 L_eff) with first-order propagation.
/// <h> enters both <h>^2 and L_eff = 2a - 2<h>/pi, so its sensitivity is
/// d ln(alpha) / d<h> = 2/<h> + 2/(pi L_eff).
inline MeasurementResult extract_polarizability(const Measured& phase_coeff, const Measured& u,
                                                const CapacitorGeometry& geom,
                                                const GeometryUncertainty& geom_sigma,
                                                const PhysicalConstants& k,
                                                const Measured& speed_ratio = {}) {
    if (!(phase_coeff.sigma >= 0 && u.sigma >= 0 && geom_sigma.full_length >= 0 &&
          geom_sigma.gap_h >= 0)) {
        throw UsageError("uncertainties must be nonnegative");
    }
    if (!(u.value > 0)) throw UsageError("velocity must be positive");
    const double leff = effective_length(geom);
    const double h = geom.gap_h;

    MeasurementResult out;
    out.phase_coefficient = phase_coeff;
    out.speed_ratio = speed_ratio;
    out.u = u;
    out.effective_length = leff;
    const double alpha = phase_coeff.value * k.hbar * u.value * h * h / (two_pi * k.epsilon0 * leff);

    out.budget = {
        {"phase_coefficient", phase_coeff.sigma / std::abs(phase_coeff.value)},
        {"velocity", u.sigma / u.value},
        {"electrode_length", geom_sigma.full_length / leff},
        {"gap", geom_sigma.gap_h * (2.0 / h + 2.0 / (pi * leff))},
    };
    double rel2 = 0;
    for (const auto& t : out.budget) rel2 += t.relative * t.relative;
    out.alpha = {alpha, std::abs(alpha) * std::sqrt(rel2)};

    const CorrectionBounds cb = correction_bounds(geom);
    out.neglected = {{"gap_nonuniformity", cb.gap_variance},
                     {"fringe_field_exponential", cb.exp_correction},
                     {"septum_offset_order", cb.offset_correction}};
    return out;
}

} // namespace lipol
