#include "ddram/metrics.hpp"
#include "ddram/samplers.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ddram;

namespace {

// relative score a x, constant in time
ScoreField linear_relative(double a, int dim = 1) {
    return ScoreField::from_function([a](double, const Vector& x) { return Vector((a - 1.0) * x); }, dim);
}

Vector vec1(double v) { return Vector::Constant(1, v); }

}  // namespace

TEST(StepEmd, Examples) {
    const auto s = ScoreField::exact(TargetFamily::standard_gaussian(1));
    EXPECT_NEAR(step_emd(vec1(1.0), 0.1, s, 1.0, vec1(0.0))[0], 0.9, 1e-15);
    EXPECT_EQ(step_emd(vec1(0.7), 0.0, s, 1.0, vec1(3.0))[0], 0.7);
    EXPECT_NEAR(step_emd(vec1(0.0), 0.1, s, 1.0, vec1(1.0))[0], std::sqrt(0.2), 1e-15);
}

TEST(StepEed, Examples) {
    // relative score identically 1
    const auto one = ScoreField::from_function([](double, const Vector& x) { return Vector(Vector::Ones(1) - x); }, 1);
    const Vector x = vec1(1.0), z = vec1(0.0);
    EXPECT_NEAR(step_eed(x, 0.1, one, 1.0, z)[0], std::exp(-0.1) + 2 * (1 - std::exp(-0.1)), 1e-15);
    EXPECT_NEAR(step_eed(x, 0.1, one, 1.0, z, EedConvention::literal)[0], std::exp(-0.1) + 2 * (1 - std::exp(-0.2)),
                1e-15);
    const auto g = ScoreField::exact(TargetFamily::standard_gaussian(1));
    for (auto conv : {EedConvention::exact, EedConvention::literal})
        EXPECT_NEAR(step_eed(vec1(0.4), 0.3, g, 1.0, vec1(1.2), conv)[0],
                    std::exp(-0.3) * 0.4 + std::sqrt(1 - std::exp(-0.6)) * 1.2, 1e-15);
    EXPECT_NEAR(step_eed(x, 1e-12, one, 1.0, vec1(0.5))[0], 1.0, 1e-5);
}

TEST(StepRmd, StationaryTargetIsOuTransition) {
    const auto g = ScoreField::exact(TargetFamily::standard_gaussian(2));
    RandomStream rng(3, "rmd-stationary");
    const Vector x = Vector::LinSpaced(2, -1.0, 2.0);
    const auto n = draw_step_noise(rng, 2);
    const double h = 0.25;
    const double tau = tau_from_uniform(h, n.u);
    const auto pair = correlated_pair(tau, h, n.z1, n.z2);
    EXPECT_LT((step_rmd(x, h, g, 3.0, 0.5, n) - (std::exp(-h) * x + pair.xi)).norm(), 1e-14);
}

TEST(StepRmd, TauAtEndReducesToEedWithMidpointScore) {
    const auto fam = TargetFamily::gaussian(Vector::Constant(1, 0.5), Matrix::Constant(1, 1, 2.0));
    const auto s = ScoreField::exact(fam);
    const double h = 0.2, T = 2.0, t = 0.3;
    const Vector x = vec1(0.8), z1 = vec1(-0.3), z2 = vec1(1.7);
    const Vector rmd = step_rmd_at(x, h, h, s, T, t, z1, z2);
    const Vector plus = step_eed(x, h, s, T - t, z1);
    const Vector expected = std::exp(-h) * x + 2 * (1 - std::exp(-h)) * s.relative(T - t - h, plus) +
                            std::sqrt(1 - std::exp(-2 * h)) * z1;
    EXPECT_LT((rmd - expected).norm(), 1e-15);
}

TEST(StepRmd, LinearScoreMomentsMatchQuadrature) {
    const double a = -0.6, h = 0.3, x0 = 1.3;
    const auto s = linear_relative(a);
    double mean_q = 0.0, second_q = 0.0, mean_k = 0.0, second_k = 0.0;
    const double norm = -std::expm1(-h);
    for (const auto& [tau, w] : detail::gauss64(0.0, h)) {
        const double p = w * std::exp(tau - h) / norm;
        // affine recursion by hand
        const double gt = 1 - std::exp(-tau), gh = 1 - std::exp(-h), K = 2 * gh * a;
        const double m = std::exp(-h) * x0 + K * (std::exp(-tau) + 2 * gt * a) * x0;
        const double v = K * K * (1 - std::exp(-2 * tau)) + (1 - std::exp(-2 * h)) +
                         2 * K * (std::exp(tau - h) - std::exp(-tau - h));
        mean_q += p * m;
        second_q += p * (v + m * m);
        // kernel coefficients in (z1, z2)
        const double c0 = step_rmd_at(vec1(x0), h, tau, s, 5.0, 1.0, vec1(0), vec1(0))[0];
        const double c1 = step_rmd_at(vec1(x0), h, tau, s, 5.0, 1.0, vec1(1), vec1(0))[0] - c0;
        const double c2 = step_rmd_at(vec1(x0), h, tau, s, 5.0, 1.0, vec1(0), vec1(1))[0] - c0;
        mean_k += p * c0;
        second_k += p * (c0 * c0 + c1 * c1 + c2 * c2);
    }
    EXPECT_NEAR(mean_k, mean_q, 1e-10);
    EXPECT_NEAR(second_k, second_q, 1e-10);

    // and the kernel's Monte Carlo mean agrees within 3 standard errors
    const int n = 200000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        RandomStream rng(21, "rmd-linear", static_cast<std::uint64_t>(i));
        const double y = step_rmd(vec1(x0), h, s, 5.0, 1.0, draw_step_noise(rng, 1))[0];
        sum += y;
        sum2 += y * y;
    }
    const double mc = sum / n, se = std::sqrt((sum2 / n - mc * mc) / n);
    EXPECT_LT(std::abs(mc - mean_q), 3 * se);
    EXPECT_NEAR(sum2 / n, second_q, 0.01);
}

TEST(StepRmdGeneral, OuSpecMatchesRmdOnSameRandomness) {
    const auto fam = TargetFamily::mixture({0.4, 0.6}, {Vector::Constant(2, -1.0), Vector::Constant(2, 2.0)},
                                           {Matrix(0.3 * Matrix::Identity(2, 2)), Matrix(0.6 * Matrix::Identity(2, 2))});
    const auto s = ScoreField::exact(fam);
    const double T = 3.0;
    const auto sde = ou_semilinear(s, T);
    RandomStream rng(5, "general-vs-rmd");
    for (int i = 0; i < 100; ++i) {
        const double t0 = 2.5 * rng.uniform(), h = 0.01 + 0.4 * rng.uniform() * (T - 0.05 - t0) / T;
        const Vector x = rng.normal_vector(2);
        const auto n = draw_step_noise(rng, 2);
        const ConstantRateFactors f(-1.0, std::sqrt(2.0), t0, t0 + h);
        const Vector a = step_rmd_general(sde, f, x, n);
        const Vector b = step_rmd(x, h, s, T, t0, n);
        EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(StepRmdGeneral, ZeroLambdaIsRandomizedMidpointEuler) {
    const auto s = ScoreField::exact(TargetFamily::gaussian(Vector::Constant(2, 0.3), Matrix(0.5 * Matrix::Identity(2, 2))));
    const auto sde = without_linear_part(ou_semilinear(s, 3.0));
    auto f_of = [&](double t, const Vector& x) { return Vector(-x + 2.0 * s.relative(3.0 - t, x)); };
    RandomStream rng(6, "rme");
    for (int i = 0; i < 20; ++i) {
        const double t0 = 2.0 * rng.uniform(), h = 0.2 * rng.uniform() + 0.01;
        const Vector x = rng.normal_vector(2);
        const auto n = draw_step_noise(rng, 2);
        const auto f = factors_closed_form(sde, t0, t0 + h);
        // independent RME: tau uniform on [0, h], Brownian noise sqrt(2) B
        const double tau = (1.0 - n.u) * h;
        const Vector w_tau = std::sqrt(2 * tau) * n.z1;
        const Vector w_h = w_tau + std::sqrt(2 * (h - tau)) * n.z2;
        const Vector plus = x + tau * f_of(t0, x) + w_tau;
        const Vector expected = x + h * f_of(t0 + tau, plus) + w_h;
        EXPECT_LT((step_rmd_general(sde, *f, x, n) - expected).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(StepRmdGeneral, PureLinearPartIsExact) {
    SemilinearSde sde;
    sde.lambda = [](double) { return 0.7; };
    sde.residual = [](double, const Vector& x) { return Vector(Vector::Zero(x.size())); };
    sde.diffusion = [](double) { return 0.0; };
    sde.deterministic = true;
    const Vector x = Vector::LinSpaced(3, -1.0, 1.0);
    for (auto [t0, t1] : {std::pair{0.2, 0.9}, std::pair{3.0, 1.0}}) {
        const NumericFactors f(sde, t0, t1);
        StepNoise n;
        n.u = 0.37;
        EXPECT_LT((step_rmd_general(sde, f, x, n) - std::exp(0.7 * (t1 - t0)) * x).norm(), 1e-12);
    }
}

TEST(OdeSteps, LinearDrift) {
    SemilinearSde sde;
    sde.lambda = [](double) { return -1.0; };
    sde.residual = [](double, const Vector& x) { return Vector(Vector::Zero(x.size())); };
    sde.diffusion = [](double) { return 0.0; };
    sde.deterministic = true;
    EXPECT_NEAR(step_euler_ode(sde, vec1(2.0), 0.0, 0.1)[0], 1.8, 1e-15);
    EXPECT_NEAR(step_heun_ode(sde, vec1(2.0), 0.0, 0.1)[0], 1.81, 1e-15);
    SemilinearSde zero = sde;
    zero.lambda = [](double) { return 0.0; };
    EXPECT_EQ(step_heun_ode(zero, vec1(2.0), 0.0, 0.1)[0], 2.0);
}

TEST(Sampler, NfeCounts) {
    SamplingProblem p;
    p.dim = 1;
    p.score = ScoreField::exact(TargetFamily::standard_gaussian(1));
    const auto grid = uniform_schedule(2.0, 10, 0.01);
    for (auto [kind, nfe] : {std::pair{SamplerKind::emd, 10u}, std::pair{SamplerKind::eed_exact, 10u},
                             std::pair{SamplerKind::rmd, 20u}, std::pair{SamplerKind::rmd_general, 20u}}) {
        const Sampler s(p, grid, {kind});
        EXPECT_EQ(s.nfe_per_chain(), nfe);
        EXPECT_EQ(s.run(1, 0).nfe, nfe);
    }
    auto spec = ProcessSpec::edm();
    spec.churn = ChurnKind::none;
    SamplingProblem q;
    q.dim = 1;
    q.sde = semilinear(spec, analytic_reparam_score(TargetFamily::standard_gaussian(1)));
    q.prior_variance = 80.0 * 80.0;
    const auto sigma_grid = log_sigma_schedule(spec, 0.002, 80.0, 7.0, 8);
    for (auto [kind, nfe] : {std::pair{SamplerKind::euler_ode, 8u}, std::pair{SamplerKind::heun_ode, 15u},
                             std::pair{SamplerKind::rmd_ode, 16u}}) {
        const Sampler s(q, sigma_grid, {kind});
        EXPECT_EQ(s.nfe_per_chain(), nfe);
        EXPECT_EQ(s.run(1, 0).nfe, nfe);
    }
}

TEST(Sampler, ZeroStepsReturnsInitialDraw) {
    SamplingProblem p;
    p.dim = 3;
    p.score = ScoreField::exact(TargetFamily::standard_gaussian(3));
    StepSchedule grid;
    grid.horizon = 1.0;
    grid.times = {0.0};
    const Sampler s(p, grid, {SamplerKind::rmd});
    const auto r = s.run(9, 4);
    EXPECT_EQ(r.nfe, 0u);
    EXPECT_EQ(r.x, s.initial(9, 4));
}

TEST(Sampler, DeterministicAcrossThreadCounts) {
    SamplingProblem p;
    p.dim = 2;
    p.score = ScoreField::exact(TargetFamily::two_point(1.0, 2));
    const Sampler s(p, uniform_schedule(3.0, 16, 0.01), {SamplerKind::rmd});
    const auto a = run_chains(s, 77, 300, 1);
    const auto b = run_chains(s, 77, 300, 3);
    EXPECT_EQ(a.samples, b.samples);
    const auto tail = run_chains(s, 77, 100, 2, 200);
    EXPECT_EQ(tail.samples, a.samples.bottomRows(100));
}

TEST(Sampler, SamplersShareGaussianDraws) {
    // with a stationary target EMD and EED see the same z for every step
    SamplingProblem p;
    p.dim = 1;
    p.score = ScoreField::exact(TargetFamily::standard_gaussian(1));
    const auto grid = uniform_schedule(1.0, 1, 0.5);
    const auto emd = Sampler(p, grid, {SamplerKind::emd}).run(4, 0).x;
    const auto eed = Sampler(p, grid, {SamplerKind::eed_exact}).run(4, 0).x;
    const Vector x0 = Sampler(p, grid, {SamplerKind::emd}).initial(4, 0);
    const double z_emd = (emd[0] - 0.5 * x0[0]) / 1.0;
    const double z_eed = (eed[0] - std::exp(-0.5) * x0[0]) / std::sqrt(1 - std::exp(-1.0));
    EXPECT_NEAR(z_emd, z_eed, 1e-12);
}

TEST(Sampler, StationaryCovariance) {
    SamplingProblem p;
    p.dim = 4;
    p.score = ScoreField::exact(TargetFamily::standard_gaussian(4));
    const Sampler s(p, uniform_schedule(2.0, 8, 0.01), {SamplerKind::rmd});
    const auto batch = run_chains(s, 11, 50000);
    const auto gap = moment_gap(batch.samples, Vector::Zero(4), Matrix::Identity(4, 4));
    EXPECT_LT(gap.cov_gap, 0.05);
    EXPECT_LT(gap.mean_gap, 0.03);
}

TEST(Sampler, StepErrorCarriesIndex) {
    SamplingProblem p;
    p.dim = 1;
    p.score = ScoreField::from_function(
        [](double t, const Vector& x) {
            if (t < 0.5) throw DomainError("score undefined");
            return Vector(-x);
        },
        1);
    const Sampler s(p, uniform_schedule(1.0, 4, 0.1), {SamplerKind::eed_exact});
    try {
        s.run(1, 0);
        FAIL();
    } catch (const StepError& e) {
        EXPECT_EQ(e.step(), 3u);
    }
}

TEST(Sampler, Preconditions) {
    SamplingProblem p;
    p.dim = 1;
    EXPECT_THROW(Sampler(p, uniform_schedule(1.0, 2, 0.1), {SamplerKind::rmd}), DomainError);
    EXPECT_THROW(Sampler(p, uniform_schedule(1.0, 2, 0.1), {SamplerKind::euler_ode}), DomainError);
    EXPECT_THROW(sampler_from_string("rk4"), DomainError);
    EXPECT_EQ(sampler_from_string("heun_ode"), SamplerKind::heun_ode);
}
