#pragma once

// Randomized midpoint times and the correlated noise pairs (xi+, xi).

#include "ddram/core.hpp"
#include "ddram/process.hpp"
#include "ddram/rng.hpp"

#include <algorithm>
#include <cmath>

namespace ddram {

/// tau with density e^{tau - h} / (1 - e^{-h}) on [0, h], from U in [0, 1].
/// U = 0 gives tau = h, U = 1 gives tau = 0.
inline double tau_from_uniform(double h, double u) {
    if (!(h > 0.0)) throw DomainError("sample_tau: h must be positive");
    const double tau = h + std::log1p(u * std::expm1(-h));
    return std::clamp(tau, 0.0, h);
}

inline double sample_tau(double h, RandomStream& rng) { return tau_from_uniform(h, rng.uniform()); }

/// (e^{tau - h} - e^{-h}) / (1 - e^{-h})
inline double tau_cdf(double h, double tau) {
    if (tau <= 0.0) return 0.0;
    if (tau >= h) return 1.0;
    return std::expm1(tau) / std::expm1(h);
}

/// Same density restricted to [0, rho h]; U = 0 gives 0, U = 1 gives rho h.
inline double truncated_tau_from_uniform(double h, double rho, double u) {
    if (!(h > 0.0)) throw DomainError("sample_tau_truncated: h must be positive");
    if (!(rho > 0.0 && rho <= 1.0)) throw DomainError("sample_tau_truncated: rho must lie in (0, 1]");
    const double tau = std::log1p(u * std::expm1(rho * h));
    return std::clamp(tau, 0.0, rho * h);
}

inline double sample_tau_truncated(double h, double rho, RandomStream& rng) {
    return truncated_tau_from_uniform(h, rho, rng.uniform());
}

inline double truncated_tau_cdf(double h, double rho, double tau) {
    if (tau <= 0.0) return 0.0;
    if (tau >= rho * h) return 1.0;
    return std::expm1(tau) / std::expm1(rho * h);
}

/// rho = 1 - h^r
inline double truncation_level(double h, double r = 4.0) { return 1.0 - std::pow(h, r); }

struct NoisePair {
    Vector xi_plus;
    Vector xi;
};

/// OU noise pair from given standard normals z1, z2.
inline NoisePair correlated_pair(double tau, double h, const Vector& z1, const Vector& z2) {
    if (!(h > 0.0)) throw DomainError("correlated_pair: h must be positive");
    if (!(tau >= 0.0 && tau <= h)) throw DomainError("correlated_pair: tau outside [0, h]");
    NoisePair p;
    p.xi_plus = std::sqrt(detail::one_minus_exp_neg(2.0 * tau)) * z1;
    p.xi = std::exp(tau - h) * p.xi_plus + std::sqrt(-std::expm1(2.0 * (tau - h))) * z2;
    return p;
}

inline NoisePair correlated_pair(double tau, double h, RandomStream& rng, Eigen::Index d) {
    const Vector z1 = rng.normal_vector(d);
    const Vector z2 = rng.normal_vector(d);
    return correlated_pair(tau, h, z1, z2);
}

/// Noise pair of the generalized kernel at midpoint time tm in the factors' segment.
inline NoisePair generalized_pair(const IntegratingFactors& f, double tm, const Vector& z1, const Vector& z2) {
    const double wm = f.omega(tm);
    const double w1 = f.omega_end();
    if (!(wm != 0.0 && w1 != 0.0) || !std::isfinite(wm) || !std::isfinite(w1))
        throw SpecError("integrating factor vanishes on the segment");
    const double em = f.noise_variance(tm);
    const double e1 = f.noise_variance_end();
    NoisePair p;
    p.xi_plus = (std::sqrt(std::abs(em)) / wm) * z1;
    p.xi = (wm / w1) * p.xi_plus + (std::sqrt(std::abs(e1 - em)) / w1) * z2;
    return p;
}

/// Midpoint time with density proportional to omega on the segment.
/// Reflected inverse CDF: U = 0 gives t1, U = 1 gives t0, like tau_from_uniform.
inline double generalized_midpoint(const IntegratingFactors& f, double u) {
    return f.normalizer_inverse((1.0 - u) * f.normalizer_end());
}

}  // namespace ddram
