#pragma once

// Time grids. Algorithmic grids run forward 0 = t_0 < ... < t_N = T - delta;
// process grids list times of a (c, sigma) process, usually decreasing.

#include "ddram/core.hpp"
#include "ddram/process.hpp"
#include "ddram/quadrature.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace ddram {

enum class ScheduleAxis { algorithmic, process };

struct StepSchedule {
    ScheduleAxis axis = ScheduleAxis::algorithmic;
    double horizon = 0.0;  // T for algorithmic grids
    std::vector<double> times;

    std::size_t steps() const { return times.empty() ? 0 : times.size() - 1; }
    double step(std::size_t k) const { return times.at(k + 1) - times.at(k); }
    double end_gap() const { return horizon - times.back(); }

    void validate() const {
        if (times.empty()) throw DomainError("schedule: empty grid");
        if (axis == ScheduleAxis::algorithmic) {
            if (times.front() != 0.0) throw DomainError("schedule: algorithmic grid must start at 0");
            for (std::size_t k = 1; k < times.size(); ++k)
                if (!(times[k] > times[k - 1])) throw DomainError("schedule: grid not strictly increasing");
            if (!(times.back() < horizon)) throw DomainError("schedule: grid must end before the horizon");
        } else {
            if (times.size() < 2) return;
            const bool down = times[1] < times[0];
            for (std::size_t k = 1; k < times.size(); ++k)
                if (down ? !(times[k] < times[k - 1]) : !(times[k] > times[k - 1]))
                    throw DomainError("schedule: process grid not strictly monotone");
        }
    }

    nlohmann::json to_json() const {
        return {{"axis", axis == ScheduleAxis::algorithmic ? "algorithmic" : "process"},
                {"horizon", horizon},
                {"times", times}};
    }

    static StepSchedule from_json(const nlohmann::json& j) {
        for (const auto& [key, _] : j.items())
            if (key != "axis" && key != "horizon" && key != "times")
                throw DomainError("schedule: unknown key '" + key + "'");
        StepSchedule s;
        const auto axis = j.value("axis", std::string("algorithmic"));
        if (axis == "algorithmic")
            s.axis = ScheduleAxis::algorithmic;
        else if (axis == "process")
            s.axis = ScheduleAxis::process;
        else
            throw DomainError("schedule: unknown axis '" + axis + "'");
        s.horizon = j.value("horizon", 0.0);
        s.times = j.at("times").get<std::vector<double>>();
        s.validate();
        return s;
    }
};

inline StepSchedule uniform_schedule(double T, int N, double delta) {
    if (!(T > delta && delta >= 0.0)) throw DomainError("uniform_schedule: need T > delta >= 0");
    if (N < 1) throw DomainError("uniform_schedule: need N >= 1");
    StepSchedule s;
    s.horizon = T;
    const double end = T - delta;
    s.times.resize(N + 1);
    for (int k = 0; k <= N; ++k) s.times[k] = end * k / N;
    s.times.back() = end;
    return s;
}

struct TheoryParameters {
    double epsilon = 0.1;
    double beta0 = 1.0;
    int dim = 1;
    double m2 = 0.0;  // sqrt of the second moment
    double c_h = 0.05;
};

/// T = max(1, log((d + M2^2) / eps^2))
inline double theory_horizon(const TheoryParameters& p) {
    return std::max(1.0, std::log((p.dim + p.m2 * p.m2) / (p.epsilon * p.epsilon)));
}

/// delta = eps^2 / d + eps / M2, the second term dropped when M2 < eps, capped at T / 2.
inline double theory_end_gap(const TheoryParameters& p) {
    double delta = p.epsilon * p.epsilon / p.dim;
    if (p.m2 >= p.epsilon) delta += p.epsilon / p.m2;
    return std::min(delta, 0.5 * theory_horizon(p));
}

/// The step scale C_h eps / (beta0 sqrt((d + M2^2) T)).
inline double theory_step_scale(const TheoryParameters& p) {
    const double T = theory_horizon(p);
    return p.c_h * p.epsilon / (p.beta0 * std::sqrt((p.dim + p.m2 * p.m2) * T));
}

/// Interpolated Lipschitz bound beta0 / (1 - e^{-2(T - t)}).
inline double interpolated_lipschitz(double beta0, double T, double t) {
    return beta0 / detail::one_minus_exp_neg(2.0 * (T - t));
}

inline StepSchedule theory_schedule(const TheoryParameters& p, std::size_t max_steps = 50'000'000) {
    if (!(p.epsilon > 0.0 && p.epsilon <= 1.0)) throw DomainError("theory_schedule: epsilon must lie in (0, 1]");
    if (!(p.beta0 >= 1.0)) throw DomainError("theory_schedule: beta0 must be >= 1");
    if (p.dim < 1) throw DomainError("theory_schedule: d must be >= 1");
    if (!(p.m2 >= 0.0)) throw DomainError("theory_schedule: M2 must be nonnegative");
    if (!(p.c_h > 0.0)) throw DomainError("theory_schedule: C_h must be positive");
    const double T = theory_horizon(p);
    const double delta = theory_end_gap(p);
    const double scale = theory_step_scale(p);
    const double end = T - delta;
    if (scale * std::min(1.0, delta) < 1e-14) {
        std::ostringstream msg;
        msg << "theory_schedule: step underflow (h = " << scale * std::min(1.0, delta) << " at the end gap; eps="
            << p.epsilon << " beta0=" << p.beta0 << " d=" << p.dim << " M2=" << p.m2 << " C_h=" << p.c_h << ")";
        throw DomainError(msg.str());
    }
    // N = number of left-endpoint steps needed to reach T - delta
    std::size_t N = 0;
    for (double t = 0.0; t < end;) {
        t += scale * std::min(1.0, T - t);
        if (++N > max_steps) throw DomainError("theory_schedule: too many steps");
    }
    // Shrink the step constant so that exactly N steps land on T - delta,
    // instead of clipping a short final step.
    auto walk = [&](double sc, std::vector<double>* out) {
        double t = 0.0;
        if (out) out->push_back(t);
        for (std::size_t k = 0; k < N; ++k) {
            t += sc * std::min(1.0, T - t);
            if (out) out->push_back(t);
        }
        return t;
    };
    double fitted = scale;
    if (walk(scale, nullptr) != end)
        fitted = find_root([&](double sc) { return walk(sc, nullptr) - end; }, 0.0, scale, scale * 1e-15, 200).root;
    StepSchedule s;
    s.horizon = T;
    walk(std::min(fitted, scale), &s.times);
    s.times.back() = end;
    return s;
}

/// N steps uniform in u(t) = int_0^t ds / min(1, T - s): the theory schedule's shape at a chosen N.
inline StepSchedule decaying_schedule(double T, double delta, int N) {
    if (!(T > delta && delta > 0.0)) throw DomainError("decaying_schedule: need T > delta > 0");
    if (N < 1) throw DomainError("decaying_schedule: need N >= 1");
    const double a = std::max(0.0, T - 1.0);
    auto u_of = [&](double t) { return t <= a ? t : a + std::log((T - a) / (T - t)); };
    auto t_of = [&](double u) { return u <= a ? u : T - (T - a) * std::exp(a - u); };
    const double end = T - delta;
    const double u_end = u_of(end);
    StepSchedule s;
    s.horizon = T;
    s.times.resize(N + 1);
    for (int k = 0; k <= N; ++k) s.times[k] = t_of(u_end * k / N);
    s.times.front() = 0.0;
    s.times.back() = end;
    return s;
}

/// sigma_i = (smax^{1/rho} + i/N (smin^{1/rho} - smax^{1/rho}))^rho, decreasing.
inline std::vector<double> log_sigma_grid(double sigma_min, double sigma_max, double rho, int N) {
    if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw DomainError("log_sigma: need 0 < sigma_min < sigma_max");
    if (N < 1) throw DomainError("log_sigma: need N >= 1");
    if (!(rho > 0.0)) throw DomainError("log_sigma: rho must be positive");
    const double a = std::pow(sigma_max, 1.0 / rho);
    const double b = std::pow(sigma_min, 1.0 / rho);
    std::vector<double> out(N + 1);
    for (int i = 0; i <= N; ++i) out[i] = std::pow(a + (static_cast<double>(i) / N) * (b - a), rho);
    out.front() = sigma_max;
    out.back() = sigma_min;
    return out;
}

/// Process-time grid whose noise levels follow log_sigma_grid.
inline StepSchedule log_sigma_schedule(const ProcessSpec& spec, double sigma_min, double sigma_max, double rho,
                                       int N) {
    StepSchedule s;
    s.axis = ScheduleAxis::process;
    for (double sigma : log_sigma_grid(sigma_min, sigma_max, rho, N)) s.times.push_back(spec.time_of_sigma(sigma));
    s.horizon = s.times.front();
    s.validate();
    return s;
}

}  // namespace ddram
