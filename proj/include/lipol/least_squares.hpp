#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

namespace lipol::lsq {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct Options {
    int max_iterations = 200;
    double gradient_tolerance = 1e-10; // max cosine between residual and Jacobian columns
    double step_tolerance = 1e-14;     // relative parameter step (scaled norm)
    double cost_tolerance = 1e-15;     // relative cost reduction of an accepted step
    double initial_damping = 1e-3;
};

enum class Stop { gradient, step, cost, zero_residual, max_iterations, damping_overflow, not_finite };

inline const char* to_string(Stop s) {
    switch (s) {
    case Stop::gradient: return "gradient";
    case Stop::step: return "step";
    case Stop::cost: return "cost";
    case Stop::zero_residual: return "zero_residual";
    case Stop::max_iterations: return "max_iterations";
    case Stop::damping_overflow: return "damping_overflow";
    case Stop::not_finite: return "not_finite";
    }
    return "unknown";
}

struct Result {
    Vector x;
    Vector residuals;
    Matrix jtj;           // J^T J at the solution
    double chi2 = 0;      // sum of squared residuals
    int iterations = 0;
    bool converged = false;
    Stop stop = Stop::max_iterations;
    double gradient_cosine = 0;
};

namespace detail {

inline double gradient_cosine(const Matrix& J, const Vector& r, const Vector& g) {
    const double rn = r.norm();
    if (rn == 0) return 0;
    double worst = 0;
    for (Eigen::Index j = 0; j < J.cols(); ++j) {
        const double cn = J.col(j).norm();
        if (cn > 0) worst = std::max(worst, std::abs(g(j)) / (cn * rn));
    }
    return worst;
}

} // namespace detail

/// Damped Gauss-Newton (Levenberg-Marquardt with Marquardt's diagonal
/// scaling) for min |r(x)|^2. `residuals(x)` returns r, `jacobian(x)` dr/dx.
template <class ResidualFn, class JacobianFn>
Result levenberg_marquardt(ResidualFn&& residuals, JacobianFn&& jacobian, Vector x,
                           const Options& opts = {}) {
    Result out;
    Vector r = residuals(x);
    if (!r.allFinite()) {
        out.x = x;
        out.residuals = r;
        out.stop = Stop::not_finite;
        return out;
    }
    Matrix J = jacobian(x);
    double cost = r.squaredNorm();
    double lambda = opts.initial_damping;

    auto finish = [&](Stop s, bool ok) {
        out.x = x;
        out.residuals = r;
        out.jtj = J.transpose() * J;
        out.chi2 = cost;
        out.stop = s;
        out.converged = ok;
        out.gradient_cosine = detail::gradient_cosine(J, r, J.transpose() * r);
        return out;
    };

    for (int it = 0; it < opts.max_iterations; ++it) {
        out.iterations = it + 1;
        if (cost == 0) return finish(Stop::zero_residual, true);
        const Vector g = J.transpose() * r;
        if (detail::gradient_cosine(J, r, g) <= opts.gradient_tolerance) {
            return finish(Stop::gradient, true);
        }
        const Matrix A = J.transpose() * J;
        const Vector diag = A.diagonal().cwiseMax(1e-300);

        bool accepted = false;
        while (!accepted) {
            Matrix damped = A;
            damped.diagonal() += lambda * diag;
            const Vector step = damped.ldlt().solve(-g);
            const Vector x_new = x + step;
            const Vector r_new = residuals(x_new);
            const double cost_new = r_new.allFinite() ? r_new.squaredNorm() : INFINITY;
            if (cost_new < cost) {
                const double reduction = (cost - cost_new) / cost;
                // Step measured in the Marquardt scaling so all parameters weigh alike.
                const Vector scale = diag.cwiseSqrt();
                const bool small_step = scale.cwiseProduct(step).norm() <=
                                        opts.step_tolerance * scale.cwiseProduct(x).norm();
                x = x_new;
                r = r_new;
                cost = cost_new;
                J = jacobian(x);
                lambda = std::max(lambda / 10.0, 1e-15);
                accepted = true;
                if (small_step) return finish(Stop::step, true);
                if (reduction <= opts.cost_tolerance) return finish(Stop::cost, true);
            } else {
                lambda *= 10.0;
                if (lambda > 1e16) {
                    // No descent possible: converged only if already at a stationary point.
                    const bool stationary = detail::gradient_cosine(J, r, g) <= 1e-6;
                    return finish(Stop::damping_overflow, stationary);
                }
            }
        }
    }
    return finish(Stop::max_iterations, false);
}

/// Central-difference Jacobian with per-parameter relative steps.
template <class ResidualFn>
Matrix numeric_jacobian(ResidualFn&& residuals, const Vector& x, double rel_step = 1e-6) {
    Matrix J;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        const double h = rel_step * std::max(std::abs(x(j)), 1e-8);
        Vector xp = x, xm = x;
        xp(j) += h;
        xm(j) -= h;
        const Vector rp = residuals(xp);
        if (j == 0) J.resize(rp.size(), x.size());
        J.col(j) = (rp - residuals(xm)) / (2.0 * h);
    }
    return J;
}

} // namespace lipol::lsq
