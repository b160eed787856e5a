#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <queue>
#include <vector>

namespace lipol::quadrature {

namespace detail {

// 15-point Kronrod abscissae on [-1, 1] (nonnegative half) and weights.
inline constexpr std::array<double, 8> kronrod_nodes = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
inline constexpr std::array<double, 8> kronrod_weights = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
// Embedded 7-point Gauss weights, paired with kronrod_nodes[1], [3], [5], [7].
inline constexpr std::array<double, 4> gauss_weights = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

inline double component_error(double x) { return std::abs(x); }
inline double component_error(const std::complex<double>& z) {
    return std::max(std::abs(z.real()), std::abs(z.imag()));
}

template <class T>
struct Panel {
    double lo;
    double hi;
    T value;
    double error;
    bool operator<(const Panel& other) const { return error < other.error; }
};

template <class T, class F>
Panel<T> gauss_kronrod15(F& f, double lo, double hi) {
    const double center = 0.5 * (lo + hi);
    const double half = 0.5 * (hi - lo);
    const T fc = f(center);
    T kronrod = fc * kronrod_weights[7];
    T gauss = fc * gauss_weights[3];
    for (std::size_t j = 0; j < 7; ++j) {
        const double dx = half * kronrod_nodes[j];
        const T pair = f(center - dx) + f(center + dx);
        kronrod += pair * kronrod_weights[j];
        if (j % 2 == 1) gauss += pair * gauss_weights[j / 2];
    }
    kronrod *= half;
    gauss *= half;
    return {lo, hi, kronrod, component_error(kronrod - gauss)};
}

} // namespace detail

template <class T>
struct Result {
    T value{};
    double error = 0;     // estimated absolute error (max over components)
    int evaluations = 0;
    bool converged = false;
};

struct Options {
    double abs_tolerance = 1e-10;
    int initial_panels = 8;
    int max_panels = 4000;
};

/// Globally adaptive Gauss-Kronrod (7/15) integration of f over [lo, hi].
/// The panel with the largest error estimate is bisected until the summed
/// estimate falls below the absolute tolerance. Works for real and complex
/// integrands; for complex values the tolerance applies to Re and Im separately.
template <class T, class F>
Result<T> integrate(F&& f, double lo, double hi, const Options& opts = {}) {
    using Panel = detail::Panel<T>;
    std::priority_queue<Panel> panels;
    Result<T> out;
    T total{};
    double total_error = 0;

    const int n0 = std::max(1, opts.initial_panels);
    const double width = (hi - lo) / n0;
    for (int i = 0; i < n0; ++i) {
        const double a = lo + i * width;
        const double b = (i + 1 == n0) ? hi : a + width;
        Panel p = detail::gauss_kronrod15<T>(f, a, b);
        total += p.value;
        total_error += p.error;
        panels.push(p);
    }
    int count = n0;

    while (total_error > opts.abs_tolerance && count < opts.max_panels) {
        Panel worst = panels.top();
        panels.pop();
        const double mid = 0.5 * (worst.lo + worst.hi);
        Panel left = detail::gauss_kronrod15<T>(f, worst.lo, mid);
        Panel right = detail::gauss_kronrod15<T>(f, mid, worst.hi);
        total += left.value + right.value - worst.value;
        total_error += left.error + right.error - worst.error;
        panels.push(left);
        panels.push(right);
        ++count;
    }

    // Re-sum from the panels: the running total accumulates rounding.
    total = T{};
    total_error = 0;
    while (!panels.empty()) {
        total += panels.top().value;
        total_error += panels.top().error;
        panels.pop();
    }
    out.value = total;
    out.error = total_error;
    out.evaluations = 15 * (n0 + 2 * (count - n0));
    out.converged = total_error <= opts.abs_tolerance;
    return out;
}

} // namespace lipol::quadrature
