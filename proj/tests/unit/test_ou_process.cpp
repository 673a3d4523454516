#include "ddram/ou_process.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ddram;

namespace {

// Central finite differences of the analytic log-density.
Vector fd_gradient(const TargetFamily& f, double t, const Vector& x, double eps = 1e-5) {
    Vector g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Vector a = x, b = x;
        a[i] += eps;
        b[i] -= eps;
        g[i] = (log_density(f, t, a) - log_density(f, t, b)) / (2 * eps);
    }
    return g;
}

double rel_err(const Vector& a, const Vector& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

TargetFamily three_mixture() {
    Matrix c1(2, 2), c2(2, 2), c3(2, 2);
    c1 << 0.3, 0.1, 0.1, 0.2;
    c2 << 0.5, -0.2, -0.2, 0.4;
    c3 << 0.1, 0.0, 0.0, 0.6;
    return TargetFamily::mixture({0.2, 0.5, 0.3}, {Vector::Constant(2, 1.5), Vector::Constant(2, -1.0), Vector::Unit(2, 0) * 2.0},
                                 {c1, c2, c3});
}

}  // namespace

TEST(Marginal, StandardGaussianIsStationary) {
    const auto m = marginal(TargetFamily::standard_gaussian(3), 1.0);
    EXPECT_LT((m.family.covariance() - Matrix::Identity(3, 3)).norm(), 1e-14);
    EXPECT_LT(m.family.mean().norm(), 1e-14);
}

TEST(Marginal, TwoPointBecomesMixture) {
    const double t = 0.7;
    const auto m = marginal(TargetFamily::two_point(1.0, 2), t);
    ASSERT_EQ(m.family.components().size(), 2u);
    for (const auto& c : m.family.components()) {
        EXPECT_DOUBLE_EQ(c.weight, 0.5);
        EXPECT_NEAR(std::abs(c.mean[0]), std::exp(-t), 1e-15);
        EXPECT_LT((c.covariance() - (1 - std::exp(-2 * t)) * Matrix::Identity(2, 2)).norm(), 1e-14);
    }
}

TEST(Marginal, IdentityAtZeroAndNegativeRejected) {
    Matrix S(2, 2);
    S << 2.0, 0.3, 0.3, 0.5;
    const auto f = TargetFamily::gaussian(Vector::Constant(2, 0.4), S);
    EXPECT_LT((marginal(f, 0.0).family.covariance() - S).norm(), 1e-14);
    EXPECT_THROW(marginal(f, -0.1), DomainError);
}

TEST(Marginal, SemigroupProperty) {
    Matrix S(2, 2);
    S << 2.0, 0.3, 0.3, 0.5;
    const auto f = TargetFamily::gaussian(Vector::Constant(2, 0.4), S);
    const auto two = marginal(marginal(f, 0.3).family, 0.9).family;
    const auto one = marginal(f, 1.2).family;
    EXPECT_LT((two.mean() - one.mean()).norm(), 1e-12);
    EXPECT_LT((two.covariance() - one.covariance()).norm(), 1e-12);
}

TEST(Score, StandardGaussian) {
    const Vector x = Vector::LinSpaced(4, -1.0, 2.0);
    EXPECT_LT((score(TargetFamily::standard_gaussian(4), 0.8, x) + x).norm(), 1e-14);
    EXPECT_LT(relative_score(TargetFamily::standard_gaussian(4), 0.8, x).norm(), 1e-14);
}

TEST(Score, IsotropicGaussianClosedForm) {
    const double s2 = 3.0, t = 0.4;
    const auto f = TargetFamily::gaussian(Vector::Zero(2), s2 * Matrix::Identity(2, 2));
    const Vector x = Vector::LinSpaced(2, 0.5, -1.2);
    const double var = std::exp(-2 * t) * s2 + 1 - std::exp(-2 * t);
    EXPECT_LT((score(f, t, x) + x / var).norm(), 1e-14);
    EXPECT_LT((relative_score(f, t, x) - x * (1 - 1 / var)).norm(), 1e-14);
    EXPECT_LT(rel_err(score(f, t, x), fd_gradient(f, t, x)), 1e-8);
}

TEST(Score, GradcheckAllFamilies) {
    Matrix S(3, 3);
    S << 1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.25;
    const std::vector<TargetFamily> fams = {TargetFamily::gaussian(Vector::LinSpaced(3, -1, 1), S), three_mixture(),
                                            TargetFamily::two_point(1.0, 2)};
    for (const auto& f : fams) {
        for (double t : {0.05, 0.5, 2.0}) {
            RandomStream rng(11, "gradcheck", static_cast<std::uint64_t>(t * 100));
            for (int k = 0; k < 100; ++k) {
                const Vector x = forward_sample(f, t, rng);
                EXPECT_LT(rel_err(score(f, t, x), fd_gradient(f, t, x)), 1e-5) << "t=" << t;
            }
        }
    }
}

TEST(Score, TwoPointTanhForm) {
    const double t = 0.5;
    const auto f = TargetFamily::two_point(1.0, 2);
    const Vector x = Vector::Unit(2, 0);
    const double m = std::exp(-t), v = 1 - std::exp(-2 * t);
    Vector expected = -x / v;
    expected[0] += (m / v) * std::tanh(m * x[0] / v);
    EXPECT_LT((score(f, t, x) - expected).norm(), 1e-14);
    // Jacobian along e1 against the sech^2 Hessian form
    const double eps = 1e-5;
    const double fd = (score(f, t, x + eps * Vector::Unit(2, 0))[0] - score(f, t, x - eps * Vector::Unit(2, 0))[0]) / (2 * eps);
    const double sech = 1.0 / std::cosh(m * x[0] / v);
    EXPECT_NEAR(fd, -1 / v + (m / v) * (m / v) * sech * sech, 1e-6);
}

TEST(Score, SingularTimeRejected) {
    const auto f = TargetFamily::two_point(1.0, 2);
    EXPECT_THROW(score(f, 0.0, Vector::Zero(2)), DomainError);
    EXPECT_THROW(score(f, 1e-9, Vector::Zero(2)), DomainError);
    EXPECT_NO_THROW(score(f, 1e-3, Vector::Zero(2)));
}

TEST(Score, SymmetricFamilyVanishesAtOrigin) {
    EXPECT_LT(relative_score(TargetFamily::two_point(2.0, 3), 0.3, Vector::Zero(3)).norm(), 1e-15);
}

TEST(ReparametrizedScore, OuMappingIdentity) {
    const auto f = three_mixture();
    for (double t : {0.1, 0.7, 1.5}) {
        const Vector x = Vector::LinSpaced(2, 0.3, -0.8);
        const double c = std::exp(-t), sigma = std::sqrt(std::expm1(2 * t));
        EXPECT_LT((reparametrized_score(f, c, sigma, x) - c * score(f, t, x)).norm(), 1e-12);
    }
}

TEST(ReparametrizedScore, StandardGaussianAndNoSmoothing) {
    const auto g = TargetFamily::standard_gaussian(2);
    const Vector x = Vector::LinSpaced(2, 1.0, -2.0);
    const double c = 0.6, s = 1.7;
    EXPECT_LT((reparametrized_score(g, c, s, x) + (x / c) / (1 + s * s)).norm(), 1e-14);
    Matrix S(2, 2);
    S << 0.7, 0.1, 0.1, 0.3;
    const auto f = TargetFamily::gaussian(Vector::Constant(2, 0.2), S);
    EXPECT_LT((reparametrized_score(f, 1.0, 0.0, x) - score(f, 0.0, x)).norm(), 1e-13);
    EXPECT_THROW(reparametrized_score(TargetFamily::two_point(1.0, 2), 1.0, 0.0, x), DomainError);
}

TEST(PerturbScore, ZeroEpsilonIsIdentity) {
    const auto f = three_mixture();
    const auto exact = ScoreField::exact(f);
    const auto p = perturb_score(exact, 0.0);
    const Vector x = Vector::LinSpaced(2, 0.3, -0.8);
    EXPECT_EQ(p.absolute(0.4, x), exact.absolute(0.4, x));
    EXPECT_THROW(perturb_score(exact, -1.0), DomainError);
}

TEST(PerturbScore, RelativeMinusAbsoluteIsX) {
    const auto p = perturb_score(ScoreField::exact(three_mixture()), 0.3);
    const Vector x = Vector::LinSpaced(2, 0.3, -0.8);
    EXPECT_LT((p.relative(0.4, x) - p.absolute(0.4, x) - x).norm(), 1e-15);
}

TEST(PerturbScore, RmsDeviationMatchesEpsilon) {
    for (int d : {1, 4}) {
        const auto f = TargetFamily::standard_gaussian(d);
        const auto exact = ScoreField::exact(f);
        const auto p = perturb_score(exact, 0.1);
        RandomStream rng(3, "rms", static_cast<std::uint64_t>(d));
        double acc = 0.0;
        const int n = 100000;
        for (int i = 0; i < n; ++i) {
            const Vector x = forward_sample(f, 0.5, rng);
            acc += (p.absolute(0.5, x) - exact.absolute(0.5, x)).squaredNorm();
        }
        const double rms = std::sqrt(acc / n);
        EXPECT_GT(rms, 0.09);
        EXPECT_LT(rms, 0.11);
    }
}

TEST(ForwardSample, StationaryCovariance) {
    const auto f = TargetFamily::standard_gaussian(3);
    RandomStream rng(1, "fs");
    const int n = 100000;
    Matrix acc = Matrix::Zero(3, 3);
    for (int i = 0; i < n; ++i) {
        const Vector x = forward_sample(f, 0.8, rng);
        acc += x * x.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(acc / n - Matrix::Identity(3, 3));
    EXPECT_LT(eig.eigenvalues().cwiseAbs().maxCoeff(), 0.05);
}

TEST(ForwardSample, TwoPointSignSplit) {
    const auto f = TargetFamily::two_point(1.0, 2);
    RandomStream rng(2, "fs2");
    const int n = 100000;
    int pos = 0;
    for (int i = 0; i < n; ++i) pos += forward_sample(f, 0.01, rng)[0] > 0 ? 1 : 0;
    EXPECT_NEAR(pos, n / 2, 3 * std::sqrt(n * 0.25));
}

TEST(ForwardSample, ZeroTimeMatchesTarget) {
    Matrix S(2, 2);
    S << 0.5, 0.2, 0.2, 1.5;
    const Vector mu = Vector::LinSpaced(2, 1.0, -1.0);
    const auto f = TargetFamily::gaussian(mu, S);
    RandomStream rng(4, "fs3");
    const int n = 100000;
    Vector m = Vector::Zero(2);
    Matrix c = Matrix::Zero(2, 2);
    for (int i = 0; i < n; ++i) {
        const Vector x = forward_sample(f, 0.0, rng);
        m += x;
        c += (x - mu) * (x - mu).transpose();
    }
    EXPECT_LT((m / n - mu).norm(), 0.02);
    EXPECT_LT((c / n - S).norm(), 0.03);
}

TEST(TargetFamily, Validation) {
    EXPECT_THROW(TargetFamily::mixture({0.5, 0.6}, {Vector::Zero(1), Vector::Zero(1)},
                                       {Matrix::Identity(1, 1), Matrix::Identity(1, 1)}),
                 DomainError);
    EXPECT_THROW(TargetFamily::mixture({1.2, -0.2}, {Vector::Zero(1), Vector::Zero(1)},
                                       {Matrix::Identity(1, 1), Matrix::Identity(1, 1)}),
                 DomainError);
    Matrix asym(2, 2);
    asym << 1.0, 0.1, 0.0, 1.0;
    EXPECT_THROW(TargetFamily::gaussian(Vector::Zero(2), asym), DomainError);
    Matrix indef(2, 2);
    indef << 1.0, 2.0, 2.0, 1.0;
    EXPECT_THROW(TargetFamily::gaussian(Vector::Zero(2), indef), DomainError);
    EXPECT_THROW(TargetFamily::gaussian(Vector::Zero(3), Matrix::Identity(2, 2)), DomainError);
    EXPECT_THROW(TargetFamily::two_point(-1.0, 2), DomainError);
}

TEST(TargetFamily, JsonRoundTrip) {
    const auto f = three_mixture();
    const auto g = TargetFamily::from_json(f.to_json());
    ASSERT_EQ(g.components().size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(g.components()[i].weight, f.components()[i].weight);
        EXPECT_LT((g.components()[i].covariance() - f.components()[i].covariance()).norm(), 1e-14);
    }
    const auto tp = TargetFamily::from_json(nlohmann::json{{"variant", "two_point"}, {"dim", 3}, {"scale", 2.0}});
    EXPECT_EQ(tp.dim(), 3);
    EXPECT_DOUBLE_EQ(tp.scale(), 2.0);
    EXPECT_THROW(TargetFamily::from_json(nlohmann::json{{"variant", "two_point"}, {"dim", 3}, {"scael", 2.0}}),
                 ConfigError);
}
