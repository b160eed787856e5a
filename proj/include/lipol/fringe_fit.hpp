#pragma once

// Weighted least-squares fit of one fringe recording to
//
//   I(n) = I0 [1 + V cos(a + b n + c n^2)],   n = 0 .. N-1,
//
// with Poisson weights, and extraction of the channel-averaged mean phase.

#include <algorithm>
#include <cmath>
#include <complex>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lipol/errors.hpp"
#include "lipol/least_squares.hpp"
#include "lipol/physics_core.hpp"
#include "lipol/synthetic_experiment.hpp"

namespace lipol {

struct FringeFit {
    int index = 0;
    double voltage = 0;
    double start_time = 0;
    int n_channels = 0;

    double I0 = 0;         // counts per channel
    double visibility = 0;
    double a = 0;          // rad
    double b = 0;          // rad/channel
    double c = 0;          // rad/channel^2
    Eigen::MatrixXd covariance; // over (I0, V, a[, b, c])

    double mean_phase = 0; // <psi>, rad
    double mean_phase_sigma = 0;
    double visibility_sigma = 0;
    bool fixed_ramp = false;

    double chi2 = 0;
    int dof = 0;
    int iterations = 0;
    bool converged = false;
    std::string stop;

    double reduced_chi2() const { return dof > 0 ? chi2 / dof : 0.0; }
};

struct FitOptions {
    lsq::Options lsq;
    /// Multiply the covariance by max(1, chi2/dof) so that overdispersed
    /// data never report errors below their observed scatter.
    bool scale_covariance_by_chi2 = true;
    /// A fringe whose visibility is below this many sigma is degenerate.
    double degeneracy_threshold = 5.0;
};

/// Average of a + b n + c n^2 over n = 0 .. N-1.
inline double mean_phase_of(double a, double b, double c, int n_channels) {
    const double N = n_channels;
    return a + b * (N - 1.0) / 2.0 + c * (N - 1.0) * (2.0 * N - 1.0) / 6.0;
}

namespace detail {

struct Fringe {
    std::vector<double> counts;
    std::vector<double> inv_sigma; // 1 / sqrt(max(counts, 1))
};

inline Fringe prepare(const Recording& rec) {
    rec.validate();
    if (rec.counts.size() < 5) throw UsageError("fringe fit needs at least 5 channels");
    Fringe f{rec.counts, {}};
    f.inv_sigma.reserve(rec.counts.size());
    double lo = rec.counts.front(), hi = rec.counts.front();
    for (double y : rec.counts) {
        f.inv_sigma.push_back(1.0 / std::sqrt(std::max(y, 1.0)));
        lo = std::min(lo, y);
        hi = std::max(hi, y);
    }
    if (hi == lo) {
        throw DegenerateFringeError("recording " + std::to_string(rec.index) +
                                    " has constant counts: no fringe");
    }
    return f;
}

/// Least squares of y on {1, cos psi, sin psi}: returns {A, B, C, ssr}.
/// Weighted when inv_sigma is non-empty.
template <class PhaseFn>
std::array<double, 4> linear_sinusoid(const std::vector<double>& y,
                                      const std::vector<double>& inv_sigma, PhaseFn&& phase) {
    Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
    Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
    const std::size_t n = y.size();
    std::vector<Eigen::Vector3d> rows(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double w = inv_sigma.empty() ? 1.0 : inv_sigma[k];
        const double psi = phase(static_cast<double>(k));
        rows[k] = Eigen::Vector3d(w, w * std::cos(psi), w * std::sin(psi));
        A += rows[k] * rows[k].transpose();
        rhs += rows[k] * (w * y[k]);
    }
    const Eigen::Vector3d p = A.ldlt().solve(rhs);
    double ssr = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const double w = inv_sigma.empty() ? 1.0 : inv_sigma[k];
        const double e = w * y[k] - rows[k].dot(p);
        ssr += e * e;
    }
    return {p(0), p(1), p(2), ssr};
}

/// Starting values {I0, V, a, b}: dominant DFT bin, then a scan of the
/// linear sinusoid fit over +-1 bin and a golden-section refinement.
inline std::array<double, 4> initial_guess(const std::vector<double>& y) {
    const std::size_t n = y.size();
    double mean = 0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(n);

    std::size_t best_bin = 1;
    double best_power = -1;
    for (std::size_t k = 1; k <= n / 2; ++k) {
        std::complex<double> s{};
        const double w = two_pi * static_cast<double>(k) / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
            s += (y[j] - mean) * std::polar(1.0, -w * static_cast<double>(j));
        }
        if (std::norm(s) > best_power) {
            best_power = std::norm(s);
            best_bin = k;
        }
    }

    auto ssr_at = [&](double b) {
        return linear_sinusoid(y, {}, [b](double k) { return b * k; })[3];
    };
    const double bin = two_pi / static_cast<double>(n);
    const double lo = std::max(bin * (static_cast<double>(best_bin) - 1.0), 0.1 * bin);
    const double hi = bin * (static_cast<double>(best_bin) + 1.0);
    constexpr int scan = 80;
    double best_b = lo, best_ssr = INFINITY;
    for (int j = 0; j <= scan; ++j) {
        const double b = lo + (hi - lo) * j / scan;
        const double s = ssr_at(b);
        if (s < best_ssr) {
            best_ssr = s;
            best_b = b;
        }
    }
    // Golden section on the bracketing scan cell.
    const double step = (hi - lo) / scan;
    double left = best_b - step, right = best_b + step;
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = right - g * (right - left), x2 = left + g * (right - left);
    double f1 = ssr_at(x1), f2 = ssr_at(x2);
    for (int it = 0; it < 40; ++it) {
        if (f1 < f2) {
            right = x2;
            x2 = x1;
            f2 = f1;
            x1 = right - g * (right - left);
            f1 = ssr_at(x1);
        } else {
            left = x1;
            x1 = x2;
            f1 = f2;
            x2 = left + g * (right - left);
            f2 = ssr_at(x2);
        }
    }
    const double b = 0.5 * (left + right);
    const auto [A, B, C, ssr] = linear_sinusoid(y, {}, [b](double k) { return b * k; });
    return {A, std::hypot(B, C) / A, std::atan2(-C, B), b};
}

/// Solve, check and package. `free_ramp` selects the 5-parameter model.
inline FringeFit solve(const Recording& rec, const Fringe& f, Eigen::VectorXd x0, bool free_ramp,
                       double b_fixed, double c_fixed, const FitOptions& opts) {
    const int N = static_cast<int>(f.counts.size());
    const Eigen::Index p = x0.size();

    auto ramp = [&](const Eigen::VectorXd& x, double n) {
        const double b = free_ramp ? x(3) : b_fixed;
        const double c = free_ramp ? x(4) : c_fixed;
        return x(2) + b * n + c * n * n;
    };
    auto residuals = [&](const Eigen::VectorXd& x) {
        Eigen::VectorXd r(N);
        for (int n = 0; n < N; ++n) {
            const double model = x(0) * (1.0 + x(1) * std::cos(ramp(x, n)));
            r(n) = (f.counts[static_cast<std::size_t>(n)] - model) *
                   f.inv_sigma[static_cast<std::size_t>(n)];
        }
        return r;
    };
    auto jacobian = [&](const Eigen::VectorXd& x) {
        Eigen::MatrixXd J(N, p);
        for (int n = 0; n < N; ++n) {
            const double w = f.inv_sigma[static_cast<std::size_t>(n)];
            const double psi = ramp(x, n);
            const double cs = std::cos(psi), sn = std::sin(psi);
            const double dpsi = x(0) * x(1) * sn * w; // d(-model)/d psi, weighted
            J(n, 0) = -(1.0 + x(1) * cs) * w;
            J(n, 1) = -x(0) * cs * w;
            J(n, 2) = dpsi;
            if (free_ramp) {
                J(n, 3) = dpsi * n;
                J(n, 4) = dpsi * n * static_cast<double>(n);
            }
        }
        return J;
    };

    lsq::Result res = lsq::levenberg_marquardt(residuals, jacobian, std::move(x0), opts.lsq);

    FringeFit fit;
    fit.index = rec.index;
    fit.voltage = rec.voltage;
    fit.start_time = rec.start_time;
    fit.n_channels = N;
    fit.fixed_ramp = !free_ramp;
    fit.iterations = res.iterations;
    fit.converged = res.converged;
    fit.stop = lsq::to_string(res.stop);
    fit.chi2 = res.chi2;
    fit.dof = N - static_cast<int>(p);

    if (!res.converged) {
        std::ostringstream msg;
        msg << "fringe fit of recording " << rec.index << " did not converge (stop="
            << fit.stop << ", iterations=" << res.iterations
            << ", gradient cosine=" << res.gradient_cosine << ")";
        throw NumericalError(msg.str());
    }

    Eigen::VectorXd x = res.x;
    if (x(1) < 0) { // V < 0 is V > 0 with a shifted by pi
        x(1) = -x(1);
        x(2) += pi;
    }
    const double wrapped = std::remainder(x(2), two_pi);
    x(2) = wrapped;

    fit.I0 = x(0);
    fit.visibility = x(1);
    fit.a = x(2);
    fit.b = free_ramp ? x(3) : b_fixed;
    fit.c = free_ramp ? x(4) : c_fixed;

    Eigen::LDLT<Eigen::MatrixXd> ldlt(res.jtj);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        throw NumericalError("singular normal matrix in fit of recording " +
                             std::to_string(rec.index));
    }
    Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
    cov = 0.5 * (cov + cov.transpose());
    if (opts.scale_covariance_by_chi2) cov *= std::max(1.0, fit.reduced_chi2());
    fit.covariance = cov;

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(p);
    grad(2) = 1.0;
    if (free_ramp) {
        grad(3) = (N - 1.0) / 2.0;
        grad(4) = (N - 1.0) * (2.0 * N - 1.0) / 6.0;
    }
    fit.mean_phase = mean_phase_of(fit.a, fit.b, fit.c, N);
    fit.mean_phase_sigma = std::sqrt(grad.dot(cov * grad));
    fit.visibility_sigma = std::sqrt(cov(1, 1));

    if (!(fit.visibility > opts.degeneracy_threshold * fit.visibility_sigma)) {
        std::ostringstream msg;
        msg << "recording " << rec.index << ": visibility " << fit.visibility
            << " is consistent with zero (sigma " << fit.visibility_sigma
            << "); phase unreliable";
        throw DegenerateFringeError(msg.str());
    }
    return fit;
}

} // namespace detail

/// Five-parameter fit {I0, V, a, b, c} of a field-off (reference) recording.
inline FringeFit fit_reference(const Recording& rec, const FitOptions& opts = {}) {
    const detail::Fringe f = detail::prepare(rec);
    const auto [I0, V, a, b] = detail::initial_guess(f.counts);
    if (!(I0 > 0) || !(V > 0) || !std::isfinite(a)) {
        throw DegenerateFringeError("recording " + std::to_string(rec.index) +
                                    ": no fringe component found");
    }
    Eigen::VectorXd x0(5);
    x0 << I0, V, a, b, 0.0;
    return detail::solve(rec, f, std::move(x0), true, 0.0, 0.0, opts);
}

/// Three-parameter fit {I0, V, a} with the ramp (b, c) held at given values,
/// normally those of the preceding field-off recording.
inline FringeFit fit_fixed_ramp(const Recording& rec, double b_fixed, double c_fixed,
                                const FitOptions& opts = {}) {
    const detail::Fringe f = detail::prepare(rec);
    const auto [A, B, C, ssr] = detail::linear_sinusoid(
        f.counts, f.inv_sigma, [&](double n) { return b_fixed * n + c_fixed * n * n; });
    if (!(A > 0)) {
        throw DegenerateFringeError("recording " + std::to_string(rec.index) +
                                    ": nonpositive mean intensity");
    }
    Eigen::VectorXd x0(3);
    x0 << A, std::hypot(B, C) / A, std::atan2(-C, B);
    return detail::solve(rec, f, std::move(x0), false, b_fixed, c_fixed, opts);
}

struct BranchAlignment {
    FringeFit fit;
    int turns = 0;          // multiples of 2 pi added
    bool ambiguous = false; // runner-up branch within the margin
};

/// Moves mean_phase (and a) by the multiple of 2 pi that brings
/// mean_phase - reference_phase closest to expected_shift. The choice is
/// ambiguous when the two nearest branches are within `margin` rad of being
/// equally close.
inline BranchAlignment phase_branch_align(const FringeFit& fit, double reference_phase,
                                          double expected_shift, double margin = 0.5) {
    const double target = reference_phase + expected_shift;
    const long k0 = std::lround((target - fit.mean_phase) / two_pi);
    long best = k0;
    double d_best = INFINITY, d_second = INFINITY;
    for (long k = k0 - 1; k <= k0 + 1; ++k) {
        const double d = std::abs(fit.mean_phase + two_pi * static_cast<double>(k) - target);
        if (d < d_best) {
            d_second = d_best;
            d_best = d;
            best = k;
        } else if (d < d_second) {
            d_second = d;
        }
    }
    BranchAlignment out{fit, static_cast<int>(best), d_second - d_best < margin};
    out.fit.mean_phase += two_pi * static_cast<double>(best);
    out.fit.a += two_pi * static_cast<double>(best);
    return out;
}

} // namespace lipol
