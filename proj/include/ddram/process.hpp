#pragma once

// Process parameterizations in the (c, sigma, beta) form
//
//   dX = [c'/c X - (c^2 sigma' sigma + beta sigma^2 c^2) s_hat(t, X)] dt + sqrt(2 beta) sigma c dB,
//
// where s_hat(t, x) = grad_x log pi(x / c; sigma). Integration runs in the
// process' own time, usually backwards (t1 < t0). The drift is split as
// lambda(t) x + f_t(x); the integrating factors of the linear part drive the
// generalized midpoint kernel.

#include "ddram/core.hpp"
#include "ddram/ou_process.hpp"
#include "ddram/quadrature.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ddram {

enum class ProcessKind { ou, vp, ve, edm };
enum class LambdaChoice { zero, scale_only, relative_score, network_adapted };
enum class ChurnKind { none, song, matched, constant };

/// grad log pi(. ; sigma) evaluated at x / c.
using ReparamScore = std::function<Vector(double c, double sigma, const Vector& x)>;

inline ReparamScore analytic_reparam_score(const TargetFamily& family) {
    auto fam = std::make_shared<const TargetFamily>(family);
    return [fam](double c, double sigma, const Vector& x) { return reparametrized_score(*fam, c, sigma, x); };
}

struct ProcessSpec {
    ProcessKind kind = ProcessKind::ou;
    double beta_min = 0.1;  // VP
    double beta_max = 20.0;
    ChurnKind churn = ChurnKind::song;
    // constant churn: beta = churn_value before churn_break, churn_value_after from it on
    double churn_value = 0.0;
    double churn_value_after = 0.0;
    double churn_break = std::numeric_limits<double>::infinity();
    std::optional<LambdaChoice> lambda_choice;
    double sigma_data = 0.5;
    double start_variance = 1.0;  // sigma_T^2 of the relative-score split

    static ProcessSpec ou() { return {}; }
    static ProcessSpec vp(double beta_min, double beta_max) {
        ProcessSpec s;
        s.kind = ProcessKind::vp;
        s.beta_min = beta_min;
        s.beta_max = beta_max;
        return s;
    }
    static ProcessSpec ve() {
        ProcessSpec s;
        s.kind = ProcessKind::ve;
        return s;
    }
    static ProcessSpec edm() {
        ProcessSpec s;
        s.kind = ProcessKind::edm;
        return s;
    }

    LambdaChoice resolved_lambda() const {
        if (lambda_choice) return *lambda_choice;
        switch (kind) {
            case ProcessKind::ou:
            case ProcessKind::vp: return LambdaChoice::relative_score;
            case ProcessKind::ve: return LambdaChoice::network_adapted;
            case ProcessKind::edm: return LambdaChoice::scale_only;
        }
        return LambdaChoice::zero;
    }

    // VP exponent q(t) = beta_d t^2 / 2 + beta_min t, with OU as q = 2t.
    double q(double t) const {
        if (kind == ProcessKind::ou) return 2.0 * t;
        return 0.5 * (beta_max - beta_min) * t * t + beta_min * t;
    }
    double q_dot(double t) const {
        if (kind == ProcessKind::ou) return 2.0;
        return (beta_max - beta_min) * t + beta_min;
    }

    double c(double t) const {
        if (kind == ProcessKind::ou) return std::exp(-t);
        if (kind == ProcessKind::vp) return std::exp(-0.5 * q(t));
        return 1.0;
    }
    double log_c(double t) const {
        if (kind == ProcessKind::ou) return -t;
        if (kind == ProcessKind::vp) return -0.5 * q(t);
        return 0.0;
    }
    /// c'(t) / c(t)
    double c_rate(double t) const {
        if (kind == ProcessKind::ou) return -1.0;
        if (kind == ProcessKind::vp) return -0.5 * q_dot(t);
        return 0.0;
    }

    double sigma(double t) const {
        check_time(t);
        switch (kind) {
            case ProcessKind::ou: return std::sqrt(std::expm1(2.0 * t));
            case ProcessKind::vp: return std::sqrt(std::expm1(q(t)));
            case ProcessKind::ve: return std::sqrt(t);
            case ProcessKind::edm: return t;
        }
        return 0.0;
    }
    double sigma_dot(double t) const {
        check_time(t);
        switch (kind) {
            case ProcessKind::ou: return std::exp(2.0 * t) / sigma(t);
            case ProcessKind::vp: return q_dot(t) * std::exp(q(t)) / (2.0 * sigma(t));
            case ProcessKind::ve: return 0.5 / std::sqrt(t);
            case ProcessKind::edm: return 1.0;
        }
        return 0.0;
    }
    /// sigma(t) sigma'(t), finite at t = 0 for every named process
    double sigma_sigma_dot(double t) const {
        switch (kind) {
            case ProcessKind::ou: return std::exp(2.0 * t);
            case ProcessKind::vp: return 0.5 * q_dot(t) * std::exp(q(t));
            case ProcessKind::ve: return 0.5;
            case ProcessKind::edm: return t;
        }
        return 0.0;
    }

    double time_of_sigma(double s) const {
        if (!(s >= 0.0)) throw DomainError("time_of_sigma: sigma must be nonnegative");
        switch (kind) {
            case ProcessKind::ou: return 0.5 * std::log1p(s * s);
            case ProcessKind::vp: {
                const double target = std::log1p(s * s);
                const double bd = beta_max - beta_min;
                if (bd == 0.0) return target / beta_min;
                return 2.0 * target / (beta_min + std::sqrt(beta_min * beta_min + 2.0 * bd * target));
            }
            case ProcessKind::ve: return s * s;
            case ProcessKind::edm: return s;
        }
        return 0.0;
    }

    double beta(double t) const {
        switch (churn) {
            case ChurnKind::none: return 0.0;
            case ChurnKind::song: return sigma_dot(t) / sigma(t);
            case ChurnKind::matched: {
                const double sc = sigma(t) * c(t);
                return 1.0 / (sc * sc);
            }
            case ChurnKind::constant: return t < churn_break ? churn_value : churn_value_after;
        }
        return 0.0;
    }

    /// beta sigma^2 c^2, written to stay finite where sigma vanishes
    double churn_weight(double t) const {
        switch (churn) {
            case ChurnKind::none: return 0.0;
            case ChurnKind::song: return sigma_sigma_dot(t) * c(t) * c(t);
            case ChurnKind::matched: return 1.0;
            case ChurnKind::constant: {
                const double sc = sigma(t) * c(t);
                return beta(t) * sc * sc;
            }
        }
        return 0.0;
    }

    double diffusion(double t) const { return std::sqrt(2.0 * churn_weight(t)); }

    bool deterministic() const {
        return churn == ChurnKind::none ||
               (churn == ChurnKind::constant && churn_value == 0.0 && churn_value_after == 0.0);
    }

    /// Variance of the isotropic Gaussian prior at time t.
    double prior_variance(double t) const {
        if (kind == ProcessKind::ou || kind == ProcessKind::vp) return 1.0;
        const double sc = sigma(t) * c(t);
        return sc * sc;
    }

    std::vector<double> breakpoints() const {
        if (churn == ChurnKind::constant && std::isfinite(churn_break)) return {churn_break};
        return {};
    }

    void validate() const {
        if (kind == ProcessKind::vp && !(beta_min > 0.0 && beta_max >= beta_min))
            throw DomainError("vp: need 0 < beta_min <= beta_max");
        if (churn == ChurnKind::constant && !(churn_value >= 0.0 && churn_value_after >= 0.0))
            throw DomainError("churn must be nonnegative");
        if (!(start_variance > 0.0)) throw DomainError("start variance must be positive");
        if (!(sigma_data > 0.0)) throw DomainError("sigma_data must be positive");
    }

private:
    void check_time(double t) const {
        if (!(t >= 0.0)) throw DomainError("process time must be nonnegative");
    }
};

inline std::string to_string(ProcessKind k) {
    switch (k) {
        case ProcessKind::ou: return "ou";
        case ProcessKind::vp: return "vp";
        case ProcessKind::ve: return "ve";
        case ProcessKind::edm: return "edm";
    }
    return "?";
}

inline std::string to_string(LambdaChoice l) {
    switch (l) {
        case LambdaChoice::zero: return "zero";
        case LambdaChoice::scale_only: return "scale_only";
        case LambdaChoice::relative_score: return "relative_score";
        case LambdaChoice::network_adapted: return "network_adapted";
    }
    return "?";
}

/// sigma_T^2 = c^2 (M2^2 / d + sigma^2) at the chain's start time.
inline double forward_variance(const ProcessSpec& spec, const TargetFamily& family, double t_start) {
    const double c = spec.c(t_start);
    const double s = spec.sigma(t_start);
    return c * c * (family.second_moment() / family.dim() + s * s);
}

inline double lambda_of(const ProcessSpec& spec, double t) {
    switch (spec.resolved_lambda()) {
        case LambdaChoice::zero: return 0.0;
        case LambdaChoice::scale_only: return spec.c_rate(t);
        case LambdaChoice::relative_score: {
            const double c2 = spec.c(t) * spec.c(t);
            return spec.c_rate(t) + (c2 * spec.sigma_sigma_dot(t) + spec.churn_weight(t)) / spec.start_variance;
        }
        case LambdaChoice::network_adapted: {
            const double s = spec.sigma(t);
            if (!(s > 0.0)) throw DomainError("network_adapted lambda needs sigma > 0");
            const double skip = spec.sigma_data * spec.sigma_data / (s * s + spec.sigma_data * spec.sigma_data);
            return spec.c_rate(t) + (1.0 - skip) * spec.sigma_dot(t) / s;
        }
    }
    return 0.0;
}

/// Full drift c'/c x - (c^2 sigma' sigma + beta sigma^2 c^2) s_hat.
inline Vector edm_drift(const ProcessSpec& spec, double t, const Vector& x, const ReparamScore& score) {
    const double c = spec.c(t);
    const double weight = c * c * spec.sigma_sigma_dot(t) + spec.churn_weight(t);
    Vector out = spec.c_rate(t) * x;
    if (weight != 0.0) out -= (weight / c) * score(c, spec.sigma(t), x);
    return out;
}

/// -int_{t0}^{t} lambda in closed form where the named process allows it.
inline std::optional<double> log_omega_closed(const ProcessSpec& spec, double t0, double t) {
    const double scale = spec.log_c(t0) - spec.log_c(t);
    // int c^2 sigma sigma' = log(1 + sigma^2) / 2 for OU/VP, sigma^2 / 2 otherwise
    auto variance_integral = [&]() {
        if (spec.kind == ProcessKind::ou) return t - t0;
        if (spec.kind == ProcessKind::vp) return 0.5 * (spec.q(t) - spec.q(t0));
        const double a = spec.sigma(t0), b = spec.sigma(t);
        return 0.5 * (b * b - a * a);
    };
    switch (spec.resolved_lambda()) {
        case LambdaChoice::zero: return 0.0;
        case LambdaChoice::scale_only: return scale;
        case LambdaChoice::network_adapted: {
            const double d2 = spec.sigma_data * spec.sigma_data;
            const double a = spec.sigma(t0), b = spec.sigma(t);
            return scale - 0.5 * (std::log(b * b + d2) - std::log(a * a + d2));
        }
        case LambdaChoice::relative_score: {
            double churn = 0.0;
            switch (spec.churn) {
                case ChurnKind::none: break;
                case ChurnKind::song: churn = variance_integral(); break;
                case ChurnKind::matched: churn = t - t0; break;
                case ChurnKind::constant: return std::nullopt;
            }
            return scale - (variance_integral() + churn) / spec.start_variance;
        }
    }
    return std::nullopt;
}

/// omega, Omega, eta on one segment [t0, t1] (t1 < t0 allowed), all based at t0.
class IntegratingFactors {
public:
    IntegratingFactors(double t0, double t1) : t0_(t0), t1_(t1) {}
    virtual ~IntegratingFactors() = default;

    double t0() const noexcept { return t0_; }
    double t1() const noexcept { return t1_; }

    virtual double omega(double t) const = 0;
    virtual double normalizer(double t) const = 0;
    virtual double noise_variance(double t) const = 0;
    /// t in the segment with normalizer(t) = y.
    virtual double normalizer_inverse(double y) const = 0;
    virtual bool closed_form() const = 0;

    // values at t1, cached by the numeric implementation
    virtual double omega_end() const { return omega(t1_); }
    virtual double normalizer_end() const { return normalizer(t1_); }
    virtual double noise_variance_end() const { return noise_variance(t1_); }

protected:
    double t0_, t1_;
};

/// Constant lambda and g.
class ConstantRateFactors final : public IntegratingFactors {
public:
    ConstantRateFactors(double lambda, double g, double t0, double t1)
        : IntegratingFactors(t0, t1), lambda_(lambda), g2_(g * g) {}

    double omega(double t) const override { return std::exp(-lambda_ * (t - t0_)); }

    double normalizer(double t) const override {
        const double dt = t - t0_;
        if (lambda_ == 0.0) return dt;
        return -std::expm1(-lambda_ * dt) / lambda_;
    }

    double noise_variance(double t) const override {
        const double dt = t - t0_;
        if (g2_ == 0.0) return 0.0;
        if (lambda_ == 0.0) return g2_ * dt;
        return -g2_ * std::expm1(-2.0 * lambda_ * dt) / (2.0 * lambda_);
    }

    double normalizer_inverse(double y) const override {
        if (lambda_ == 0.0) return t0_ + y;
        return t0_ - std::log1p(-lambda_ * y) / lambda_;
    }

    bool closed_form() const override { return true; }

    double lambda() const noexcept { return lambda_; }

private:
    double lambda_, g2_;
};

struct NumericTolerances {
    double quad_tol = 1e-12;
    double root_tol = 1e-12;
    int max_subdivisions = 200;
    int max_root_iterations = 60;
};

/// A semilinear SDE dX = (lambda(t) X + f_t(X)) dt + g(t) dB.
struct SemilinearSde {
    std::function<double(double)> lambda;
    std::function<Vector(double, const Vector&)> residual;
    std::function<double(double)> diffusion;
    // optional -int_{t0}^{t} lambda
    std::function<std::optional<double>(double, double)> log_omega;
    // set when lambda and g are constant
    std::optional<std::pair<double, double>> constant_rate;
    std::vector<double> breakpoints;
    bool deterministic = false;

    Vector drift(double t, const Vector& x) const { return lambda(t) * x + residual(t, x); }
};

/// Integrating factors by adaptive quadrature, Omega^{-1} by bracketed root finding.
class NumericFactors final : public IntegratingFactors {
public:
    NumericFactors(SemilinearSde sde, double t0, double t1, NumericTolerances tol = {})
        : IntegratingFactors(t0, t1), sde_(std::move(sde)), tol_(tol) {
        normalizer_end_ = normalizer(t1_);
        if (!(std::abs(normalizer_end_) > 0.0) || !std::isfinite(normalizer_end_))
            throw SpecError("integrating factor degenerate on the segment");
        omega_end_ = omega(t1_);
        noise_end_ = noise_variance(t1_);
    }

    double log_omega(double t) const {
        if (sde_.log_omega) {
            if (auto v = sde_.log_omega(t0_, t)) return *v;
        }
        return -integrate(sde_.lambda, t0_, t, sde_.breakpoints, quad_options()).value;
    }

    double omega(double t) const override { return std::exp(log_omega(t)); }

    double normalizer(double t) const override {
        return integrate([this](double s) { return omega(s); }, t0_, t, sde_.breakpoints, quad_options()).value;
    }

    double noise_variance(double t) const override {
        if (sde_.deterministic) return 0.0;
        auto integrand = [this](double s) {
            const double wg = omega(s) * sde_.diffusion(s);
            return wg * wg;
        };
        return integrate(integrand, t0_, t, sde_.breakpoints, quad_options()).value;
    }

    double normalizer_inverse(double y) const override {
        if (y == 0.0) return t0_;
        if (y == normalizer_end_) return t1_;
        auto f = [&](double t) { return normalizer(t) - y; };
        const auto r = find_root(f, t0_, t1_, tol_.root_tol, tol_.max_root_iterations);
        last_iterations_ = r.iterations;
        return r.root;
    }

    bool closed_form() const override { return false; }
    double omega_end() const override { return omega_end_; }
    double normalizer_end() const override { return normalizer_end_; }
    double noise_variance_end() const override { return noise_end_; }

    int last_root_iterations() const noexcept { return last_iterations_; }

private:
    QuadratureOptions quad_options() const { return {tol_.quad_tol, tol_.max_subdivisions}; }

    SemilinearSde sde_;
    NumericTolerances tol_;
    double normalizer_end_ = 0.0, omega_end_ = 0.0, noise_end_ = 0.0;
    mutable int last_iterations_ = 0;
};

inline std::shared_ptr<const IntegratingFactors> factors_numeric(const SemilinearSde& sde, double t0, double t1,
                                                                 NumericTolerances tol = {}) {
    return std::make_shared<NumericFactors>(sde, t0, t1, tol);
}

/// Closed-form factors when lambda and g are constant; numeric otherwise.
inline std::shared_ptr<const IntegratingFactors> factors_closed_form(const SemilinearSde& sde, double t0, double t1,
                                                                     NumericTolerances tol = {}) {
    if (sde.constant_rate)
        return std::make_shared<ConstantRateFactors>(sde.constant_rate->first, sde.constant_rate->second, t0, t1);
    return factors_numeric(sde, t0, t1, tol);
}

namespace detail {

inline bool lambda_is_constant(const ProcessSpec& spec) {
    switch (spec.resolved_lambda()) {
        case LambdaChoice::zero: return true;
        case LambdaChoice::scale_only: return spec.kind != ProcessKind::vp || spec.beta_max == spec.beta_min;
        case LambdaChoice::relative_score:
            return spec.kind == ProcessKind::ou && spec.churn != ChurnKind::constant;
        case LambdaChoice::network_adapted: return false;
    }
    return false;
}

inline bool diffusion_is_constant(const ProcessSpec& spec) {
    switch (spec.churn) {
        case ChurnKind::none:
        case ChurnKind::matched: return true;
        case ChurnKind::song: return spec.kind == ProcessKind::ou;
        case ChurnKind::constant: return spec.deterministic();
    }
    return false;
}

}  // namespace detail

/// The (lambda, f, g) split of a named process driven by a reparametrized score.
inline SemilinearSde semilinear(const ProcessSpec& spec, ReparamScore score) {
    spec.validate();
    SemilinearSde sde;
    auto lam = [spec](double t) { return lambda_of(spec, t); };
    sde.lambda = lam;
    sde.residual = [spec, score = std::move(score), lam](double t, const Vector& x) {
        return Vector(edm_drift(spec, t, x, score) - lam(t) * x);
    };
    if (spec.deterministic())
        sde.diffusion = [](double) { return 0.0; };
    else
        sde.diffusion = [spec](double t) { return spec.diffusion(t); };
    sde.log_omega = [spec](double t0, double t) { return log_omega_closed(spec, t0, t); };
    sde.breakpoints = spec.breakpoints();
    sde.deterministic = spec.deterministic();
    if (detail::lambda_is_constant(spec) && detail::diffusion_is_constant(spec)) {
        // evaluate away from t = 0 where sigma-based formulas may be singular
        sde.constant_rate = {{lambda_of(spec, 1.0), sde.diffusion(1.0)}};
    }
    return sde;
}

/// Reverse OU in algorithmic time t in [0, T): lambda = -1, f = 2 s~_{T - t}, g = sqrt(2).
inline SemilinearSde ou_semilinear(const ScoreField& score, double horizon) {
    SemilinearSde sde;
    sde.lambda = [](double) { return -1.0; };
    sde.residual = [score, horizon](double t, const Vector& x) { return Vector(2.0 * score.relative(horizon - t, x)); };
    sde.diffusion = [](double) { return std::sqrt(2.0); };
    sde.log_omega = [](double t0, double t) { return std::optional<double>(t - t0); };
    sde.constant_rate = {{-1.0, std::sqrt(2.0)}};
    return sde;
}

/// dX = f_t(X) dt + g dB with lambda = 0, i.e. the plain randomized midpoint with Euler updates.
inline SemilinearSde without_linear_part(SemilinearSde sde) {
    auto lam = sde.lambda;
    auto res = sde.residual;
    sde.residual = [lam, res](double t, const Vector& x) { return Vector(lam(t) * x + res(t, x)); };
    sde.lambda = [](double) { return 0.0; };
    sde.log_omega = [](double, double) { return std::optional<double>(0.0); };
    if (sde.constant_rate) sde.constant_rate->first = 0.0;
    return sde;
}

}  // namespace ddram
