#pragma once

// Discrete sampling kernels and the chain driver.
//
// OU kernels (EMD, EED, RMD) run in algorithmic time t in [0, T - delta] and
// query scores at forward time T - t. Generalized kernels run on the grid of
// a semilinear SDE, in either time direction.
//
// Randomness: step k of chain c reads the stream (seed, "chain", c, k) and
// draws, in this order, U, then Z1, then Z2. Kernels that need less take a
// prefix, so samplers run with one seed share their Gaussian draws.

#include "ddram/core.hpp"
#include "ddram/noise_kernels.hpp"
#include "ddram/ou_process.hpp"
#include "ddram/process.hpp"
#include "ddram/rng.hpp"
#include "ddram/schedules.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace ddram {

enum class SamplerKind { emd, eed_exact, eed_literal, rmd, rmd_truncated, rmd_general, euler_ode, heun_ode, rmd_ode };

inline std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::emd: return "emd";
        case SamplerKind::eed_exact: return "eed_exact";
        case SamplerKind::eed_literal: return "eed_literal";
        case SamplerKind::rmd: return "rmd";
        case SamplerKind::rmd_truncated: return "rmd_truncated";
        case SamplerKind::rmd_general: return "rmd_general";
        case SamplerKind::euler_ode: return "euler_ode";
        case SamplerKind::heun_ode: return "heun_ode";
        case SamplerKind::rmd_ode: return "rmd_ode";
    }
    return "?";
}

inline SamplerKind sampler_from_string(const std::string& s) {
    for (auto k : {SamplerKind::emd, SamplerKind::eed_exact, SamplerKind::eed_literal, SamplerKind::rmd,
                   SamplerKind::rmd_truncated, SamplerKind::rmd_general, SamplerKind::euler_ode,
                   SamplerKind::heun_ode, SamplerKind::rmd_ode})
        if (to_string(k) == s) return k;
    throw DomainError("unknown sampler '" + s + "'");
}

/// True for kernels that run on an SDE grid rather than the OU algorithmic grid.
inline bool uses_process_grid(SamplerKind k) {
    return k == SamplerKind::euler_ode || k == SamplerKind::heun_ode || k == SamplerKind::rmd_ode;
}

inline bool is_midpoint(SamplerKind k) {
    return k == SamplerKind::rmd || k == SamplerKind::rmd_truncated || k == SamplerKind::rmd_general ||
           k == SamplerKind::rmd_ode;
}

struct StepNoise {
    double u = 0.0;
    Vector z1;
    Vector z2;
};

inline StepNoise draw_step_noise(RandomStream& rng, Eigen::Index d, int normals = 2) {
    StepNoise n;
    n.u = rng.uniform();
    if (normals >= 1) n.z1 = rng.normal_vector(d);
    if (normals >= 2) n.z2 = rng.normal_vector(d);
    return n;
}

// ---- OU kernels -----------------------------------------------------------

/// (1 - h) x + 2h (s(x) + x) + sqrt(2h) z, with s the absolute score at forward time t_fwd.
inline Vector step_emd(const Vector& x, double h, const ScoreField& score, double t_fwd, const Vector& z) {
    if (!(h >= 0.0)) throw DomainError("step_emd: h must be nonnegative");
    if (h == 0.0) return x;
    return (1.0 - h) * x + 2.0 * h * score.relative(t_fwd, x) + std::sqrt(2.0 * h) * z;
}

enum class EedConvention { exact, literal };

/// e^{-h} x + 2 k(h) s~(x) + sqrt(1 - e^{-2h}) z with k(h) = 1 - e^{-h} (exact) or 1 - e^{-2h} (literal).
inline Vector step_eed(const Vector& x, double h, const ScoreField& score, double t_fwd, const Vector& z,
                       EedConvention conv = EedConvention::exact) {
    if (!(h >= 0.0)) throw DomainError("step_eed: h must be nonnegative");
    if (h == 0.0) return x;
    const double k = conv == EedConvention::exact ? detail::one_minus_exp_neg(h) : detail::one_minus_exp_neg(2.0 * h);
    return std::exp(-h) * x + 2.0 * k * score.relative(t_fwd, x) +
           std::sqrt(detail::one_minus_exp_neg(2.0 * h)) * z;
}

/// Randomized midpoint step on [t_left, t_left + h] given tau and the normals.
inline Vector step_rmd_at(const Vector& x, double h, double tau, const ScoreField& score, double horizon,
                          double t_left, const Vector& z1, const Vector& z2) {
    const NoisePair noise = correlated_pair(tau, h, z1, z2);
    const Vector plus = std::exp(-tau) * x + 2.0 * detail::one_minus_exp_neg(tau) * score.relative(horizon - t_left, x) +
                        noise.xi_plus;
    return std::exp(-h) * x + 2.0 * detail::one_minus_exp_neg(h) * score.relative(horizon - t_left - tau, plus) +
           noise.xi;
}

/// Randomized midpoint step; rho < 1 draws tau from the truncated law on [0, rho h].
inline Vector step_rmd(const Vector& x, double h, const ScoreField& score, double horizon, double t_left,
                       const StepNoise& n, std::optional<double> rho = std::nullopt) {
    const double tau = rho ? truncated_tau_from_uniform(h, *rho, n.u) : tau_from_uniform(h, n.u);
    return step_rmd_at(x, h, tau, score, horizon, t_left, n.z1, n.z2);
}

// ---- generalized kernels --------------------------------------------------

/// Generalized midpoint step on the factors' segment [t0, t1].
inline Vector step_rmd_general(const SemilinearSde& sde, const IntegratingFactors& f, const Vector& x,
                               const StepNoise& n) {
    const double t0 = f.t0();
    const double tm = generalized_midpoint(f, n.u);
    const double wm = f.omega(tm);
    const double w1 = f.omega_end();
    Vector plus = x / wm + (f.normalizer(tm) / wm) * sde.residual(t0, x);
    Vector out = x / w1;
    if (!sde.deterministic) {
        const NoisePair noise = generalized_pair(f, tm, n.z1, n.z2);
        plus += noise.xi_plus;
        out += noise.xi;
    }
    out += (f.normalizer_end() / w1) * sde.residual(tm, plus);
    return out;
}

inline Vector step_euler_ode(const SemilinearSde& sde, const Vector& x, double t0, double h) {
    return x + h * sde.drift(t0, x);
}

inline Vector step_heun_ode(const SemilinearSde& sde, const Vector& x, double t0, double h) {
    const Vector d0 = sde.drift(t0, x);
    const Vector xe = x + h * d0;
    return x + 0.5 * h * (d0 + sde.drift(t0 + h, xe));
}

// ---- driver ---------------------------------------------------------------

struct SamplerOptions {
    SamplerKind kind = SamplerKind::rmd;
    double truncation_r = 4.0;
    bool force_numeric_factors = false;
    NumericTolerances tolerances;
    bool record_trajectory = false;
};

/// What a chain needs: the OU score (algorithmic grids) or an SDE (process grids).
struct SamplingProblem {
    int dim = 1;
    std::optional<ScoreField> score;
    std::optional<SemilinearSde> sde;
    double prior_variance = 1.0;
};

struct ChainResult {
    Vector x;
    std::size_t nfe = 0;
    std::vector<Vector> trajectory;
};

inline int default_thread_count() {
    if (const char* env = std::getenv("DDRAM_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

class Sampler {
public:
    Sampler(SamplingProblem problem, StepSchedule schedule, SamplerOptions options)
        : problem_(std::move(problem)), schedule_(std::move(schedule)), opt_(options) {
        schedule_.validate();
        const auto kind = opt_.kind;
        if (uses_process_grid(kind) || (kind == SamplerKind::rmd_general && problem_.sde)) {
            if (!problem_.sde) throw DomainError(to_string(kind) + " needs a process specification");
            sde_ = *problem_.sde;
            if (uses_process_grid(kind) && !sde_.deterministic)
                throw DomainError(to_string(kind) + " needs a deterministic process (no churn)");
        } else {
            if (!problem_.score) throw DomainError(to_string(kind) + " needs a score field");
            if (schedule_.axis != ScheduleAxis::algorithmic)
                throw DomainError(to_string(kind) + " runs on an algorithmic time grid");
            if (kind == SamplerKind::rmd_general) sde_ = ou_semilinear(*problem_.score, schedule_.horizon);
        }
        if (kind == SamplerKind::rmd_general || kind == SamplerKind::rmd_ode) {
            factors_.reserve(schedule_.steps());
            for (std::size_t k = 0; k < schedule_.steps(); ++k) {
                const double a = schedule_.times[k], b = schedule_.times[k + 1];
                factors_.push_back(opt_.force_numeric_factors ? factors_numeric(sde_, a, b, opt_.tolerances)
                                                              : factors_closed_form(sde_, a, b, opt_.tolerances));
            }
        }
        if (kind == SamplerKind::rmd_truncated)
            for (std::size_t k = 0; k < schedule_.steps(); ++k)
                if (!(schedule_.step(k) < 1.0)) throw DomainError("rmd_truncated needs every step below 1");
    }

    const StepSchedule& schedule() const noexcept { return schedule_; }
    const SamplerOptions& options() const noexcept { return opt_; }
    int dim() const noexcept { return problem_.dim; }

    std::size_t nfe_per_chain() const {
        const std::size_t n = schedule_.steps();
        if (n == 0) return 0;
        if (opt_.kind == SamplerKind::heun_ode) return 2 * n - 1;
        return is_midpoint(opt_.kind) ? 2 * n : n;
    }

    Vector initial(std::uint64_t seed, std::uint64_t chain) const {
        RandomStream rng(seed, "chain", chain, kInitialStep);
        return std::sqrt(problem_.prior_variance) * rng.normal_vector(problem_.dim);
    }

    ChainResult run(std::uint64_t seed, std::uint64_t chain) const {
        ChainResult res;
        res.x = initial(seed, chain);
        if (opt_.record_trajectory) res.trajectory.push_back(res.x);
        const std::size_t n = schedule_.steps();
        for (std::size_t k = 0; k < n; ++k) {
            try {
                res.x = step(k, res.x, seed, chain, res.nfe);
            } catch (const StepError&) {
                throw;
            } catch (const std::exception& e) {
                throw StepError(k, e.what());
            }
            if (!res.x.allFinite()) throw StepError(k, "non-finite state");
            if (opt_.record_trajectory) res.trajectory.push_back(res.x);
        }
        return res;
    }

private:
    Vector step(std::size_t k, const Vector& x, std::uint64_t seed, std::uint64_t chain, std::size_t& nfe) const {
        const double t0 = schedule_.times[k];
        const double h = schedule_.step(k);
        const double T = schedule_.horizon;
        const bool last = k + 1 == schedule_.steps();
        RandomStream rng(seed, "chain", chain, static_cast<std::uint32_t>(k));
        const auto d = problem_.dim;
        switch (opt_.kind) {
            case SamplerKind::emd: {
                const auto n = draw_step_noise(rng, d, 1);
                nfe += 1;
                return step_emd(x, h, *problem_.score, T - t0, n.z1);
            }
            case SamplerKind::eed_exact:
            case SamplerKind::eed_literal: {
                const auto n = draw_step_noise(rng, d, 1);
                nfe += 1;
                const auto conv = opt_.kind == SamplerKind::eed_exact ? EedConvention::exact : EedConvention::literal;
                return step_eed(x, h, *problem_.score, T - t0, n.z1, conv);
            }
            case SamplerKind::rmd: {
                const auto n = draw_step_noise(rng, d, 2);
                nfe += 2;
                return step_rmd(x, h, *problem_.score, T, t0, n);
            }
            case SamplerKind::rmd_truncated: {
                const auto n = draw_step_noise(rng, d, 2);
                nfe += 2;
                return step_rmd(x, h, *problem_.score, T, t0, n, truncation_level(h, opt_.truncation_r));
            }
            case SamplerKind::rmd_general:
            case SamplerKind::rmd_ode: {
                const auto n = draw_step_noise(rng, d, sde_.deterministic ? 0 : 2);
                nfe += 2;
                return step_rmd_general(sde_, *factors_[k], x, n);
            }
            case SamplerKind::euler_ode:
                nfe += 1;
                return step_euler_ode(sde_, x, t0, h);
            case SamplerKind::heun_ode:
                if (last) {
                    nfe += 1;
                    return step_euler_ode(sde_, x, t0, h);
                }
                nfe += 2;
                return step_heun_ode(sde_, x, t0, h);
        }
        throw DomainError("unknown sampler");
    }

    SamplingProblem problem_;
    StepSchedule schedule_;
    SamplerOptions opt_;
    SemilinearSde sde_;
    std::vector<std::shared_ptr<const IntegratingFactors>> factors_;
};

inline ChainResult run_chain(const Sampler& sampler, std::uint64_t seed, std::uint64_t chain = 0) {
    return sampler.run(seed, chain);
}

struct ChainBatch {
    Matrix samples;  // one chain per row
    std::size_t nfe_per_chain = 0;
};

/// Runs chains [first, first + count) on a worker pool. Rows are keyed by
/// chain index, so the result does not depend on the thread count.
inline ChainBatch run_chains(const Sampler& sampler, std::uint64_t seed, std::size_t count, int threads = 0,
                             std::uint64_t first = 0) {
    ChainBatch out;
    out.samples.resize(static_cast<Eigen::Index>(count), sampler.dim());
    out.nfe_per_chain = sampler.nfe_per_chain();
    if (threads <= 0) threads = default_thread_count();
    threads = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), std::max<std::size_t>(count, 1)));

    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    std::size_t err_chain = count;
    constexpr std::size_t kBlock = 64;
    auto worker = [&]() {
        for (;;) {
            const std::size_t begin = next.fetch_add(kBlock);
            if (begin >= count) return;
            const std::size_t end = std::min(count, begin + kBlock);
            for (std::size_t i = begin; i < end; ++i) {
                try {
                    out.samples.row(static_cast<Eigen::Index>(i)) = sampler.run(seed, first + i).x.transpose();
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (i < err_chain) {
                        err_chain = i;
                        err = std::current_exception();
                    }
                    return;
                }
            }
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (err) std::rethrow_exception(err);
    return out;
}

}  // namespace ddram
