#pragma once

// Oracles and measurements: exact reverse transitions for Gaussian targets,
// single-step weak/strong errors, distances between laws, order fits and
// assumption audits.

#include "ddram/core.hpp"
#include "ddram/noise_kernels.hpp"
#include "ddram/ou_process.hpp"
#include "ddram/quadrature.hpp"
#include "ddram/rng.hpp"
#include "ddram/samplers.hpp"

#include <json.hpp>

#include <boost/math/quadrature/gauss.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace ddram {

namespace detail {

using Node = std::pair<double, double>;  // (abscissa, weight)

// 64-point Gauss-Legendre nodes mapped to [a, b].
inline std::vector<Node> gauss64(double a, double b) {
    using rule = boost::math::quadrature::gauss<double, 64>;
    const auto& x = rule::abscissa();
    const auto& w = rule::weights();
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    std::vector<Node> out;
    out.reserve(64);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.emplace_back(mid - half * x[i], half * w[i]);
        if (x[i] != 0.0) out.emplace_back(mid + half * x[i], half * w[i]);
    }
    return out;
}

// int_a^b du / (e^{2u} + c) for c > -e^{2a}
inline double inverse_variance_integral(double a, double b, double c) {
    if (b == a) return 0.0;
    const double ea = std::exp(-2.0 * a);
    const double diff = ea * one_minus_exp_neg(2.0 * (b - a));  // e^{-2a} - e^{-2b}
    if (c == 0.0) return 0.5 * diff;
    const double arg = c * diff / (1.0 + c * std::exp(-2.0 * b));
    return std::log1p(arg) / (2.0 * c);
}

}  // namespace detail

/// Gaussian target reduced to its eigen-directions: x = mean + basis y.
struct GaussianTarget {
    Vector mean;
    Matrix basis;
    Vector variances;

    static GaussianTarget from_family(const TargetFamily& family) {
        if (family.kind() != TargetFamily::Kind::gaussian)
            throw DomainError("analytic local errors need a Gaussian target");
        const auto& c = family.components().front();
        return {c.mean, c.basis, c.spectrum};
    }
    int dim() const { return static_cast<int>(mean.size()); }
};

/// Exact reverse transition over [t_left, t_left + h] in one eigen-direction
/// with target variance v and mean m. E_u = e^{2u} + v - 1 (u forward time)
/// is e^{2u} times the marginal variance.
struct ScalarReverseOracle {
    double v = 1.0, m = 0.0;
    double u0 = 0.0, u1 = 0.0, h = 0.0;  // u1 = u0 - h

    double E(double u) const { return std::exp(2.0 * u) + v - 1.0; }
    double inv_integral(double a, double b) const { return detail::inverse_variance_integral(a, b, v - 1.0); }

    double A() const { return std::exp(h) * E(u1) / E(u0); }
    double b() const { return m * std::exp(-u1) * (1.0 - E(u1) / E(u0)); }
    double S() const { return std::exp(-2.0 * u1) * E(u1) * (1.0 - E(u1) / E(u0)); }

    // Covariances of the exact noise with the OU noises of a randomized midpoint step
    // on the shared Brownian path (xi+ over [0, tau], xi over [0, h]).
    double cov_xi() const { return 2.0 * E(u1) * inv_integral(u1, u0); }
    double cov_xi_plus(double tau) const { return 2.0 * std::exp(h - tau) * E(u1) * inv_integral(u0 - tau, u0); }
    // ... and with the Brownian increment sqrt(2) (B_h - B_0) used by EMD.
    double cov_increment() const {
        auto phi = [&](double r) { return std::exp(h - r) * E(u1) / E(u0 - r); };
        return 2.0 * integrate(phi, 0.0, h, {}, {1e-15, 200}).value;
    }

    // relative score s~_u(x) = a(u) x + c(u) of the marginal at forward time u
    double score_slope(double u) const { return 1.0 - std::exp(2.0 * u) / E(u); }
    double score_offset(double u) const { return m * std::exp(u) / E(u); }
};

struct LinearReverseOracle {
    GaussianTarget target;
    double horizon = 0.0, t_left = 0.0, h = 0.0;
    std::vector<ScalarReverseOracle> directions;

    /// x -> A x + b with noise covariance S, in the original coordinates.
    Matrix A() const { return map([](const ScalarReverseOracle& o) { return o.A(); }); }
    Matrix S() const { return map([](const ScalarReverseOracle& o) { return o.S(); }); }
    Vector b() const {
        Vector y(directions.size());
        for (std::size_t i = 0; i < directions.size(); ++i) y[i] = directions[i].b();
        return target.basis * y;
    }
    Vector mean_map(const Vector& x) const { return A() * x + b(); }

private:
    template <class F>
    Matrix map(F f) const {
        Vector d(directions.size());
        for (std::size_t i = 0; i < directions.size(); ++i) d[i] = f(directions[i]);
        return target.basis * d.asDiagonal() * target.basis.transpose();
    }
};

/// Exact reverse transition for a Gaussian target from t_left to t_left + h (algorithmic time).
inline LinearReverseOracle reverse_oracle(const TargetFamily& target, double horizon, double t_left, double h) {
    if (!(h > 0.0)) throw DomainError("reverse_oracle: h must be positive");
    if (!(t_left >= 0.0 && t_left + h < horizon)) throw DomainError("reverse_oracle: segment must lie inside (0, T)");
    LinearReverseOracle o;
    o.target = GaussianTarget::from_family(target);
    o.horizon = horizon;
    o.t_left = t_left;
    o.h = h;
    const Vector mrot = o.target.basis.transpose() * o.target.mean;
    for (int i = 0; i < o.target.dim(); ++i) {
        ScalarReverseOracle s;
        s.v = o.target.variances[i];
        s.m = mrot[i];
        s.u0 = horizon - t_left;
        s.u1 = s.u0 - h;
        s.h = h;
        o.directions.push_back(s);
    }
    return o;
}

struct LocalError {
    double weak = 0.0;
    double strong = 0.0;
    double weak_se = 0.0;  // zero for analytic results
    double strong_se = 0.0;
};

namespace detail {

// Conditional (on tau) gap between the algorithm and the exact step in one
// direction: D = mu + noise with Var(noise) = var.
struct ScalarGap {
    double mu = 0.0;
    double var = 0.0;
};

inline ScalarGap midpoint_gap(const ScalarReverseOracle& o, double y, double tau) {
    const double h = o.h;
    const double a0 = o.score_slope(o.u0), c0 = o.score_offset(o.u0);
    const double am = o.score_slope(o.u0 - tau), cm = o.score_offset(o.u0 - tau);
    const double gt = one_minus_exp_neg(tau), gh = one_minus_exp_neg(h);
    const double K = 2.0 * gh * am;
    const double P = std::exp(-h) + K * (std::exp(-tau) + 2.0 * gt * a0);
    const double q = K * 2.0 * gt * c0 + 2.0 * gh * cm;
    ScalarGap g;
    g.mu = (P - o.A()) * y + q - o.b();
    const double var_plus = one_minus_exp_neg(2.0 * tau);
    const double var_xi = one_minus_exp_neg(2.0 * h);
    const double cov_pair = std::exp(tau - h) - std::exp(-h - tau);
    g.var = K * K * var_plus + var_xi + o.S() + 2.0 * K * cov_pair - 2.0 * K * o.cov_xi_plus(tau) - 2.0 * o.cov_xi();
    g.var = std::max(g.var, 0.0);
    return g;
}

inline ScalarGap eed_gap(const ScalarReverseOracle& o, double y, EedConvention conv) {
    const double h = o.h;
    const double k = conv == EedConvention::exact ? one_minus_exp_neg(h) : one_minus_exp_neg(2.0 * h);
    const double a0 = o.score_slope(o.u0), c0 = o.score_offset(o.u0);
    ScalarGap g;
    g.mu = (std::exp(-h) + 2.0 * k * a0 - o.A()) * y + 2.0 * k * c0 - o.b();
    g.var = std::max(0.0, one_minus_exp_neg(2.0 * h) + o.S() - 2.0 * o.cov_xi());
    return g;
}

inline ScalarGap emd_gap(const ScalarReverseOracle& o, double y) {
    const double h = o.h;
    const double a0 = o.score_slope(o.u0), c0 = o.score_offset(o.u0);
    ScalarGap g;
    g.mu = (1.0 - h + 2.0 * h * a0 - o.A()) * y + 2.0 * h * c0 - o.b();
    g.var = std::max(0.0, 2.0 * h + o.S() - 2.0 * o.cov_increment());
    return g;
}

}  // namespace detail

/// Single-step weak and strong errors of an OU sampler against the exact
/// reverse transition, for a Gaussian target and start point x. The tau
/// average uses 64-point Gauss-Legendre quadrature against the tau density;
/// no Monte Carlo is involved.
inline LocalError local_errors(SamplerKind kind, const TargetFamily& target, const Vector& x, double horizon,
                               double t_left, double h, double truncation_r = 4.0) {
    const auto oracle = reverse_oracle(target, horizon, t_left, h);
    const Vector y = oracle.target.basis.transpose() * x;
    const auto d = oracle.directions.size();
    Vector weak_vec = Vector::Zero(static_cast<Eigen::Index>(d));
    double strong2 = 0.0;

    auto accumulate_deterministic = [&](auto gap_of) {
        for (std::size_t i = 0; i < d; ++i) {
            const auto g = gap_of(oracle.directions[i], y[i]);
            weak_vec[i] = g.mu;
            strong2 += g.mu * g.mu + g.var;
        }
    };

    switch (kind) {
        case SamplerKind::emd:
            accumulate_deterministic([](const auto& o, double yi) { return detail::emd_gap(o, yi); });
            break;
        case SamplerKind::eed_exact:
        case SamplerKind::eed_literal: {
            const auto conv = kind == SamplerKind::eed_exact ? EedConvention::exact : EedConvention::literal;
            accumulate_deterministic([conv](const auto& o, double yi) { return detail::eed_gap(o, yi, conv); });
            break;
        }
        case SamplerKind::rmd:
        case SamplerKind::rmd_general:
        case SamplerKind::rmd_truncated: {
            const double rho = kind == SamplerKind::rmd_truncated ? truncation_level(h, truncation_r) : 1.0;
            if (!(rho > 0.0)) throw DomainError("local_errors: truncation needs h < 1");
            const double top = rho * h;
            const double norm = std::expm1(top) * std::exp(-h);  // int_0^{rho h} e^{tau - h}
            for (const auto& [tau, w] : detail::gauss64(0.0, top)) {
                const double p = w * std::exp(tau - h) / norm;
                for (std::size_t i = 0; i < d; ++i) {
                    const auto g = detail::midpoint_gap(oracle.directions[i], y[i], tau);
                    weak_vec[i] += p * g.mu;
                    strong2 += p * (g.mu * g.mu + g.var);
                }
            }
            break;
        }
        default: throw DomainError("local_errors: " + to_string(kind) + " is not an OU sampler");
    }
    LocalError e;
    e.weak = weak_vec.norm();
    e.strong = std::sqrt(strong2);
    return e;
}

/// local_errors averaged over start points drawn from the marginal at forward
/// time T - t_left: weak errors are averaged, strong errors combined in mean square.
inline LocalError local_errors_averaged(SamplerKind kind, const TargetFamily& target, double horizon, double t_left,
                                        double h, int n_points, std::uint64_t seed, double truncation_r = 4.0) {
    LocalError out;
    double s2 = 0.0;
    for (int i = 0; i < n_points; ++i) {
        RandomStream rng(seed, "local-error-start", static_cast<std::uint64_t>(i));
        const Vector x = forward_sample(target, horizon - t_left, rng);
        const auto e = local_errors(kind, target, x, horizon, t_left, h, truncation_r);
        out.weak += e.weak / n_points;
        s2 += e.strong * e.strong / n_points;
    }
    out.strong = std::sqrt(s2);
    return out;
}

/// Monte Carlo local errors against a dense EED(exact) reference path with
/// sub-step h / substeps sharing the Brownian increments (common random numbers).
inline LocalError local_errors_mc(SamplerKind kind, const ScoreField& score, const Vector& x, double horizon,
                                  double t_left, double h, std::size_t n_samples, std::uint64_t seed,
                                  int substeps = 256, double truncation_r = 4.0) {
    if (n_samples < 1000) throw DomainError("local_errors_mc: need at least 1000 samples");
    if (!(h > 0.0)) throw DomainError("local_errors_mc: h must be positive");
    if (!(t_left >= 0.0 && t_left + h < horizon)) throw DomainError("local_errors_mc: step exceeds the segment");
    const Eigen::Index d = x.size();
    const bool midpoint = kind == SamplerKind::rmd || kind == SamplerKind::rmd_truncated || kind == SamplerKind::rmd_general;
    if (!midpoint && kind != SamplerKind::emd && kind != SamplerKind::eed_exact && kind != SamplerKind::eed_literal)
        throw DomainError("local_errors_mc: " + to_string(kind) + " is not an OU sampler");

    Vector sum_d = Vector::Zero(d), sum_d2 = Vector::Zero(d);
    double sum_n2 = 0.0, sum_n4 = 0.0;
    std::vector<double> grid;
    for (std::size_t s = 0; s < n_samples; ++s) {
        RandomStream rng(seed, "local-error-mc", s);
        double tau = h;
        if (midpoint) {
            const double u = rng.uniform();
            tau = kind == SamplerKind::rmd_truncated ? truncated_tau_from_uniform(h, truncation_level(h, truncation_r), u)
                                                     : tau_from_uniform(h, u);
        }
        grid.clear();
        for (int j = 0; j <= substeps; ++j) grid.push_back(h * j / substeps);
        grid.back() = h;
        if (midpoint && tau > 0.0 && tau < h) {
            grid.push_back(tau);
            std::sort(grid.begin(), grid.end());
            grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
        }

        Vector ref = x;
        Vector xi = Vector::Zero(d), xi_plus = Vector::Zero(d), incr = Vector::Zero(d);
        for (std::size_t j = 0; j + 1 < grid.size(); ++j) {
            const double r0 = grid[j], r1 = grid[j + 1], dt = r1 - r0;
            const Vector z = rng.normal_vector(d);
            const double var_eta = detail::one_minus_exp_neg(2.0 * dt);
            const Vector eta = std::sqrt(var_eta) * z;
            if (kind == SamplerKind::emd) {
                // sqrt(2) dB jointly Gaussian with eta: Var 2 dt, Cov 2 (1 - e^{-dt})
                const double cov = 2.0 * detail::one_minus_exp_neg(dt);
                const double slope = cov / var_eta;
                const double resid = std::max(0.0, 2.0 * dt - slope * cov);
                incr += slope * eta + std::sqrt(resid) * rng.normal_vector(d);
            }
            xi += std::exp(r1 - h) * eta;
            if (r1 <= tau) xi_plus += std::exp(r1 - tau) * eta;
            ref = std::exp(-dt) * ref + 2.0 * detail::one_minus_exp_neg(dt) * score.relative(horizon - t_left - r0, ref) + eta;
        }

        Vector alg;
        switch (kind) {
            case SamplerKind::emd:
                alg = (1.0 - h) * x + 2.0 * h * score.relative(horizon - t_left, x) + incr;
                break;
            case SamplerKind::eed_exact:
            case SamplerKind::eed_literal: {
                const double k = kind == SamplerKind::eed_exact ? detail::one_minus_exp_neg(h) : detail::one_minus_exp_neg(2.0 * h);
                alg = std::exp(-h) * x + 2.0 * k * score.relative(horizon - t_left, x) + xi;
                break;
            }
            default: {
                const Vector plus = std::exp(-tau) * x +
                                    2.0 * detail::one_minus_exp_neg(tau) * score.relative(horizon - t_left, x) + xi_plus;
                alg = std::exp(-h) * x + 2.0 * detail::one_minus_exp_neg(h) * score.relative(horizon - t_left - tau, plus) + xi;
            }
        }
        const Vector diff = alg - ref;
        sum_d += diff;
        sum_d2 += diff.cwiseProduct(diff);
        const double n2 = diff.squaredNorm();
        sum_n2 += n2;
        sum_n4 += n2 * n2;
    }
    const double n = static_cast<double>(n_samples);
    const Vector mean = sum_d / n;
    const Vector var = (sum_d2 / n - mean.cwiseProduct(mean)) * (n / (n - 1.0));
    LocalError e;
    e.weak = mean.norm();
    if (e.weak > 0.0) {
        double v = 0.0;
        for (Eigen::Index i = 0; i < d; ++i) v += (mean[i] / e.weak) * (mean[i] / e.weak) * var[i] / n;
        e.weak_se = std::sqrt(v);
    } else {
        e.weak_se = std::sqrt(var.sum() / n);
    }
    const double m2 = sum_n2 / n;
    const double v2 = std::max(0.0, (sum_n4 / n - m2 * m2) * (n / (n - 1.0)));
    e.strong = std::sqrt(m2);
    e.strong_se = e.strong > 0.0 ? std::sqrt(v2 / n) / (2.0 * e.strong) : 0.0;
    return e;
}

// ---- distances ------------------------------------------------------------

namespace detail {

inline Eigen::SelfAdjointEigenSolver<Matrix> checked_eigen(const Matrix& S, const char* what) {
    if (S.rows() != S.cols()) throw DomainError(std::string(what) + ": covariance not square");
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, S.cwiseAbs().maxCoeff()))
        throw DomainError(std::string(what) + ": covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (S + S.transpose()));
    if (eig.eigenvalues().minCoeff() < -1e-10) throw DomainError(std::string(what) + ": covariance not PSD");
    return eig;
}

inline Matrix psd_sqrt(const Eigen::SelfAdjointEigenSolver<Matrix>& eig) {
    const Vector s = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * s.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

/// Bures-Wasserstein distance W2(N(m1, S1), N(m2, S2)).
inline double w2_gaussian(const Vector& m1, const Matrix& S1, const Vector& m2, const Matrix& S2) {
    const Matrix r1 = detail::psd_sqrt(detail::checked_eigen(S1, "w2_gaussian"));
    detail::checked_eigen(S2, "w2_gaussian");
    const Matrix mid = r1 * S2 * r1;
    const Matrix cross = detail::psd_sqrt(detail::checked_eigen(0.5 * (mid + mid.transpose()), "w2_gaussian"));
    const double bures = S1.trace() + S2.trace() - 2.0 * cross.trace();
    return std::sqrt(std::max(0.0, (m1 - m2).squaredNorm() + bures));
}

/// KL(N(m1, S1) || N(m2, S2)).
inline double kl_gaussian(const Vector& m1, const Matrix& S1, const Vector& m2, const Matrix& S2) {
    const auto e1 = detail::checked_eigen(S1, "kl_gaussian");
    const auto e2 = detail::checked_eigen(S2, "kl_gaussian");
    if (!(e1.eigenvalues().minCoeff() > 0.0 && e2.eigenvalues().minCoeff() > 0.0))
        throw DomainError("kl_gaussian: covariances must be positive definite");
    const Eigen::LLT<Matrix> l2(S2);
    const Vector dm = m2 - m1;
    const double tr = l2.solve(S1).trace();
    const double quad = dm.dot(l2.solve(dm));
    const double logdet = e2.eigenvalues().array().log().sum() - e1.eigenvalues().array().log().sum();
    return 0.5 * (tr + quad - static_cast<double>(m1.size()) + logdet);
}

namespace detail {

// Exact squared W2 between two 1-D empirical laws (sorted inputs, any sizes).
inline double w2_squared_1d(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double pos = 0.0, acc = 0.0;
    while (i < a.size() && j < b.size()) {
        const double next = std::min((i + 1) / na, (j + 1) / nb);
        const double diff = a[i] - b[j];
        acc += (next - pos) * diff * diff;
        pos = next;
        if ((i + 1) / na <= next) ++i;
        if ((j + 1) / nb <= next) ++j;
    }
    return acc;
}

}  // namespace detail

/// Sliced W2: root mean over n_proj random unit directions of the squared 1-D W2.
inline double sliced_w2(const Matrix& A, const Matrix& B, int n_proj, std::uint64_t seed) {
    if (A.cols() != B.cols()) throw DomainError("sliced_w2: dimension mismatch");
    if (A.rows() == 0 || B.rows() == 0) throw DomainError("sliced_w2: empty sample set");
    if (n_proj < 1) throw DomainError("sliced_w2: need at least one projection");
    RandomStream rng(seed, "sliced-w2");
    double acc = 0.0;
    std::vector<double> pa(A.rows()), pb(B.rows());
    for (int p = 0; p < n_proj; ++p) {
        Vector dir = rng.normal_vector(A.cols());
        dir /= dir.norm();
        const Vector qa = A * dir, qb = B * dir;
        std::copy(qa.data(), qa.data() + qa.size(), pa.begin());
        std::copy(qb.data(), qb.data() + qb.size(), pb.begin());
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());
        acc += detail::w2_squared_1d(pa, pb);
    }
    return std::sqrt(acc / n_proj);
}

/// Sliced W2 against a fixed law: the projection directions and the sorted
/// projected reference are computed once, so many sample sets can be compared
/// on identical projections. Two-point targets use their exact atoms; other
/// families use an exact reference sample.
class SlicedReference {
public:
    SlicedReference(const TargetFamily& family, int n_proj, std::uint64_t seed, std::size_t n_reference = 100000) {
        if (n_proj < 1) throw DomainError("sliced_w2: need at least one projection");
        RandomStream dir_rng(seed, "sliced-w2");
        Matrix ref;
        if (family.kind() != TargetFamily::Kind::two_point) {
            if (n_reference < 1) throw DomainError("sliced_w2: empty reference sample");
            ref.resize(static_cast<Eigen::Index>(n_reference), family.dim());
            for (std::size_t i = 0; i < n_reference; ++i) {
                RandomStream rng(seed, "sliced-reference", i);
                ref.row(static_cast<Eigen::Index>(i)) = forward_sample(family, 0.0, rng).transpose();
            }
        }
        for (int p = 0; p < n_proj; ++p) {
            Vector dir = dir_rng.normal_vector(family.dim());
            dir /= dir.norm();
            std::vector<double> proj;
            if (family.kind() == TargetFamily::Kind::two_point) {
                const double a = std::abs(family.scale() * dir[0]);
                proj = {-a, a};
            } else {
                const Vector q = ref * dir;
                proj.assign(q.data(), q.data() + q.size());
                std::sort(proj.begin(), proj.end());
            }
            dirs_.push_back(dir);
            sorted_.push_back(std::move(proj));
        }
    }

    double distance(const Matrix& samples) const {
        if (samples.rows() == 0) throw DomainError("sliced_w2: empty sample set");
        if (samples.cols() != dirs_.front().size()) throw DomainError("sliced_w2: dimension mismatch");
        double acc = 0.0;
        std::vector<double> pa(static_cast<std::size_t>(samples.rows()));
        for (std::size_t p = 0; p < dirs_.size(); ++p) {
            const Vector q = samples * dirs_[p];
            std::copy(q.data(), q.data() + q.size(), pa.begin());
            std::sort(pa.begin(), pa.end());
            acc += detail::w2_squared_1d(pa, sorted_[p]);
        }
        return std::sqrt(acc / static_cast<double>(dirs_.size()));
    }

private:
    std::vector<Vector> dirs_;
    std::vector<std::vector<double>> sorted_;
};

struct MomentGap {
    double mean_gap = 0.0;  // Euclidean norm
    double cov_gap = 0.0;   // operator norm
};

inline Vector empirical_mean(const Matrix& samples) { return samples.colwise().mean().transpose(); }

inline Matrix empirical_covariance(const Matrix& samples) {
    const Vector m = empirical_mean(samples);
    const Matrix c = samples.rowwise() - m.transpose();
    return (c.transpose() * c) / static_cast<double>(std::max<Eigen::Index>(1, samples.rows() - 1));
}

inline MomentGap moment_gap(const Matrix& samples, const Vector& mean, const Matrix& cov) {
    MomentGap g;
    g.mean_gap = (empirical_mean(samples) - mean).norm();
    const Matrix diff = empirical_covariance(samples) - cov;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (diff + diff.transpose()));
    g.cov_gap = eig.eigenvalues().cwiseAbs().maxCoeff();
    return g;
}

// ---- order fits -----------------------------------------------------------

struct OrderFit {
    double slope = 0.0;
    double intercept = 0.0;
    double band = 0.0;  // 1.96 jackknife standard errors
};

namespace detail {

inline std::pair<double, double> ols(const std::vector<double>& x, const std::vector<double>& y,
                                     std::size_t skip = static_cast<std::size_t>(-1)) {
    double sx = 0, sy = 0, n = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (i != skip) sx += x[i], sy += y[i], n += 1;
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (i != skip) sxx += (x[i] - mx) * (x[i] - mx), sxy += (x[i] - mx) * (y[i] - my);
    const double slope = sxy / sxx;
    return {slope, my - slope * mx};
}

}  // namespace detail

/// Least squares on log(err) = slope log(h) + intercept, with a jackknife band.
inline OrderFit fit_order(const std::vector<double>& hs, const std::vector<double>& errors) {
    if (hs.size() != errors.size()) throw DomainError("fit_order: size mismatch");
    if (hs.size() < 3) throw DomainError("fit_order: need at least 3 points");
    std::vector<double> x, y;
    for (std::size_t i = 0; i < hs.size(); ++i) {
        if (!(hs[i] > 0.0 && errors[i] > 0.0)) throw DomainError("fit_order: values must be positive");
        x.push_back(std::log(hs[i]));
        y.push_back(std::log(errors[i]));
    }
    OrderFit f;
    std::tie(f.slope, f.intercept) = detail::ols(x, y);
    const std::size_t n = x.size();
    std::vector<double> loo(n);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        loo[i] = detail::ols(x, y, i).first;
        mean += loo[i] / n;
    }
    double ss = 0.0;
    for (double s : loo) ss += (s - mean) * (s - mean);
    f.band = 1.96 * std::sqrt((n - 1.0) / n * ss);
    return f;
}

// ---- reports --------------------------------------------------------------

struct ErrorRow {
    double h = 0.0;
    LocalError error;
};

struct ErrorReport {
    std::string target;
    std::string sampler;
    double horizon = 0.0;
    double t_left = 0.0;
    std::string method;  // "analytic" or "monte_carlo"
    std::vector<ErrorRow> rows;

    OrderFit weak_fit() const { return fit(true); }
    OrderFit strong_fit() const { return fit(false); }

    std::string to_csv(const std::string& header_comment = "") const {
        std::ostringstream out;
        out << std::setprecision(17);
        if (!header_comment.empty()) out << header_comment;
        out << "sampler,method,h,metric,value,se\n";
        for (const auto& r : rows) {
            out << sampler << ',' << method << ',' << r.h << ",weak," << r.error.weak << ',' << r.error.weak_se << '\n';
            out << sampler << ',' << method << ',' << r.h << ",strong," << r.error.strong << ',' << r.error.strong_se
                << '\n';
        }
        return out.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["target"] = target;
        j["sampler"] = sampler;
        j["horizon"] = horizon;
        j["t_left"] = t_left;
        j["method"] = method;
        for (const auto& r : rows)
            j["rows"].push_back({{"h", r.h},
                                 {"weak", r.error.weak},
                                 {"weak_se", r.error.weak_se},
                                 {"strong", r.error.strong},
                                 {"strong_se", r.error.strong_se}});
        if (rows.size() >= 3) {
            const auto w = weak_fit(), s = strong_fit();
            j["weak_order"] = {{"slope", w.slope}, {"band", w.band}};
            j["strong_order"] = {{"slope", s.slope}, {"band", s.band}};
        }
        return j;
    }

private:
    OrderFit fit(bool weak) const {
        std::vector<double> hs, es;
        for (const auto& r : rows) {
            hs.push_back(r.h);
            es.push_back(weak ? r.error.weak : r.error.strong);
        }
        return fit_order(hs, es);
    }
};

// ---- assumption audit -----------------------------------------------------

struct AuditRow {
    double t = 0.0;
    double l2_error = 0.0;
    double l2_se = 0.0;
    double lipschitz = 0.0;   // empirical, relative score
    double profile = 0.0;     // 1 / (1 - e^{-2t})
    double second_moment = 0.0;
};

struct AuditReport {
    std::vector<AuditRow> rows;
    double fitted_constant = 0.0;  // C in lipschitz ~ C / (1 - e^{-2t}), log least squares
    double worst_ratio = 0.0;      // max over t of the two-sided ratio to the fitted profile
    bool profile_within_factor2 = false;
};

/// Monte Carlo audit of a score field against the exact family scores.
/// The Lipschitz estimate is the largest difference quotient over pairs
/// (x, x + r w) with x from pi_t, w a random unit direction and r spread over
/// four decades of the marginal scale, plus independent pairs.
inline AuditReport assumption_audit(const ScoreField& field, const TargetFamily& family, const std::vector<double>& t_grid,
                                    std::size_t n_mc, std::uint64_t seed, std::size_t n_pairs = 10'000) {
    AuditReport rep;
    const double m2 = family.second_moment();
    for (std::size_t ti = 0; ti < t_grid.size(); ++ti) {
        const double t = t_grid[ti];
        AuditRow row;
        row.t = t;
        row.profile = 1.0 / detail::one_minus_exp_neg(2.0 * t);
        row.second_moment = m2;
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n_mc; ++i) {
            RandomStream rng(seed, "audit-l2", i, static_cast<std::uint32_t>(ti));
            const Vector x = forward_sample(family, t, rng);
            const double e2 = (field.absolute(t, x) - score(family, t, x)).squaredNorm();
            s1 += e2;
            s2 += e2 * e2;
        }
        const double n = static_cast<double>(std::max<std::size_t>(n_mc, 1));
        const double mean = s1 / n;
        row.l2_error = std::sqrt(mean);
        const double var = std::max(0.0, s2 / n - mean * mean);
        row.l2_se = row.l2_error > 0.0 ? std::sqrt(var / n) / (2.0 * row.l2_error) : 0.0;

        const auto [a, v] = detail::ou_coefficients(t);
        const double scale = std::sqrt(v + a * a * family.covariance().diagonal().maxCoeff());
        double lip = 0.0;
        for (std::size_t i = 0; i < n_pairs; ++i) {
            RandomStream rng(seed, "audit-lipschitz", i, static_cast<std::uint32_t>(ti));
            const Vector x = forward_sample(family, t, rng);
            Vector y;
            if (i % 4 == 3) {
                y = forward_sample(family, t, rng);
            } else {
                Vector w = rng.normal_vector(family.dim());
                w /= w.norm();
                const double r = scale * std::pow(10.0, -4.0 + 4.0 * rng.uniform());
                y = x + r * w;
            }
            const double dx = (x - y).norm();
            if (dx == 0.0) continue;
            lip = std::max(lip, (field.relative(t, x) - field.relative(t, y)).norm() / dx);
        }
        row.lipschitz = lip;
        rep.rows.push_back(row);
    }
    if (!rep.rows.empty()) {
        double acc = 0.0;
        int n = 0;
        for (const auto& r : rep.rows)
            if (r.lipschitz > 0.0) acc += std::log(r.lipschitz / r.profile), ++n;
        rep.fitted_constant = n > 0 ? std::exp(acc / n) : 0.0;
        rep.worst_ratio = 0.0;
        for (const auto& r : rep.rows) {
            const double pred = rep.fitted_constant * r.profile;
            const double ratio = r.lipschitz > 0.0 ? std::max(r.lipschitz / pred, pred / r.lipschitz)
                                                   : std::numeric_limits<double>::infinity();
            rep.worst_ratio = std::max(rep.worst_ratio, ratio);
        }
        rep.profile_within_factor2 = rep.worst_ratio <= 2.0;
    }
    return rep;
}

}  // namespace ddram
