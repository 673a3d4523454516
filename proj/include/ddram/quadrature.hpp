#pragma once

// Adaptive Gauss-Kronrod (7/15) quadrature with declared breakpoints, and a
// bracketed root finder. Rule tables come from Boost.Math; root finding is
// Boost's TOMS 748 (an inverse-cubic / secant / bisection hybrid).

#include "ddram/core.hpp"

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/toms748_solve.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <sstream>
#include <vector>

namespace ddram {

struct QuadratureOptions {
    double abs_tol = 1e-12;
    int max_subdivisions = 200;
    double rel_tol = 1e-12;  // also accept error <= rel_tol |value|, for large-magnitude integrands
};

struct QuadratureResult {
    double value = 0.0;
    double error = 0.0;
    int evaluations = 0;
};

namespace detail {

struct Panel {
    double a, b, value, error;
    bool operator<(const Panel& o) const { return error < o.error; }
};

template <class F>
Panel gk15(F& f, double a, double b, int& evals) {
    using kronrod = boost::math::quadrature::gauss_kronrod<double, 15>;
    using gauss = boost::math::quadrature::gauss<double, 7>;
    const auto& x = kronrod::abscissa();
    const auto& wk = kronrod::weights();
    const auto& wg = gauss::weights();
    const double mid = 0.5 * (a + b);
    const double half = 0.5 * (b - a);
    const double f0 = f(mid);
    double k = wk[0] * f0;
    double g = wg[0] * f0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        const double s = f(mid - half * x[i]) + f(mid + half * x[i]);
        k += wk[i] * s;
        if (i % 2 == 0) g += wg[i / 2] * s;
    }
    evals += 15;
    return {a, b, k * half, std::abs((k - g) * half)};
}

inline void check_panel(const Panel& p) {
    if (std::isfinite(p.value) && std::isfinite(p.error)) return;
    std::ostringstream msg;
    msg.precision(17);
    msg << "quadrature: integrand not finite on subinterval [" << p.a << ", " << p.b << "]";
    throw NumericError(msg.str());
}

}  // namespace detail

/// Integral of f over [a, b] (a > b allowed, giving the negated integral).
/// Interior breakpoints split the range before adaptive bisection starts.
template <class F>
QuadratureResult integrate(F f, double a, double b, const std::vector<double>& breakpoints = {},
                           const QuadratureOptions& opt = {}) {
    if (a == b) return {};
    const double sign = a < b ? 1.0 : -1.0;
    const double lo = std::min(a, b), hi = std::max(a, b);

    std::vector<double> cuts{lo};
    for (double p : breakpoints)
        if (p > lo && p < hi) cuts.push_back(p);
    cuts.push_back(hi);
    std::sort(cuts.begin(), cuts.end());

    QuadratureResult res;
    std::priority_queue<detail::Panel> heap;
    double total = 0.0, err = 0.0;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        auto p = detail::gk15(f, cuts[i], cuts[i + 1], res.evaluations);
        detail::check_panel(p);
        total += p.value;
        err += p.error;
        heap.push(p);
    }
    int splits = 0;
    while (err > std::max(opt.abs_tol, opt.rel_tol * std::abs(total))) {
        if (splits >= opt.max_subdivisions) {
            const auto& worst = heap.top();
            std::ostringstream msg;
            msg.precision(17);
            msg << "quadrature did not reach tolerance " << opt.abs_tol << " after " << splits
                << " subdivisions; worst subinterval [" << worst.a << ", " << worst.b
                << "] error estimate " << worst.error;
            throw NumericError(msg.str());
        }
        const auto worst = heap.top();
        heap.pop();
        const double mid = 0.5 * (worst.a + worst.b);
        if (!(mid > worst.a && mid < worst.b)) {
            // Interval exhausted at machine resolution; accept what we have.
            heap.push({worst.a, worst.b, worst.value, 0.0});
            err -= worst.error;
            continue;
        }
        const auto left = detail::gk15(f, worst.a, mid, res.evaluations);
        const auto right = detail::gk15(f, mid, worst.b, res.evaluations);
        detail::check_panel(left);
        detail::check_panel(right);
        total += left.value + right.value - worst.value;
        err += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
        ++splits;
    }
    res.value = sign * total;
    res.error = err;
    return res;
}

struct RootResult {
    double root = 0.0;
    int iterations = 0;
};

/// Root of f on the bracket [a, b]; f(a) and f(b) must differ in sign.
template <class F>
RootResult find_root(F f, double a, double b, double tol = 1e-12, int max_iter = 60) {
    if (a > b) std::swap(a, b);
    const double fa = f(a), fb = f(b);
    if (fa == 0.0) return {a, 0};
    if (fb == 0.0) return {b, 0};
    if ((fa > 0.0) == (fb > 0.0)) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "root bracket [" << a << ", " << b << "] does not change sign (f = " << fa << ", " << fb << ")";
        throw SpecError(msg.str());
    }
    std::uintmax_t iters = static_cast<std::uintmax_t>(max_iter);
    auto done = [tol](double x, double y) { return std::abs(x - y) <= tol; };
    const auto [l, r] = boost::math::tools::toms748_solve(f, a, b, fa, fb, done, iters);
    if (iters >= static_cast<std::uintmax_t>(max_iter) && !done(l, r))
        throw NumericError("root finder did not converge within the iteration budget");
    return {0.5 * (l + r), static_cast<int>(iters)};
}

}  // namespace ddram
