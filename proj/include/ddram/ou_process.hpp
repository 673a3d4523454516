#pragma once

// Analytic target families under the forward Ornstein-Uhlenbeck semigroup
//   dX = -X dt + sqrt(2) dB,
// whose time-t law is pi_t = law(e^{-t} X_0 + sqrt(1 - e^{-2t}) Z).
// Every family here is a finite Gaussian mixture (point masses are
// zero-covariance components), so marginals, scores and log-densities are
// available in closed form.

#include "ddram/core.hpp"
#include "ddram/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace ddram {

/// One mixture component, stored with the eigendecomposition of its
/// covariance so that evolved covariances a^2 Sigma + v I share the basis.
struct GaussianComponent {
    double weight = 1.0;
    Vector mean;
    Matrix basis;    // orthonormal eigenvectors of cov (columns)
    Vector spectrum; // eigenvalues of cov, clamped at 0

    Matrix covariance() const { return basis * spectrum.asDiagonal() * basis.transpose(); }
};

class TargetFamily {
public:
    enum class Kind { gaussian, mixture, two_point };

    static TargetFamily gaussian(const Vector& mean, const Matrix& cov) {
        TargetFamily f(Kind::gaussian, static_cast<int>(mean.size()));
        f.components_.push_back(make_component(1.0, mean, cov, f.dim_));
        return f;
    }

    static TargetFamily standard_gaussian(int dim) {
        return gaussian(Vector::Zero(dim), Matrix::Identity(dim, dim));
    }

    static TargetFamily mixture(const std::vector<double>& weights, const std::vector<Vector>& means,
                                const std::vector<Matrix>& covs) {
        if (weights.empty() || weights.size() != means.size() || weights.size() != covs.size())
            throw DomainError("mixture: weights, means and covs must be non-empty and equally sized");
        double total = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0)) throw DomainError("mixture: negative weight");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12) throw DomainError("mixture: weights must sum to 1");
        TargetFamily f(Kind::mixture, static_cast<int>(means.front().size()));
        for (std::size_t i = 0; i < weights.size(); ++i)
            f.components_.push_back(make_component(weights[i], means[i], covs[i], f.dim_));
        return f;
    }

    /// 1/2 delta_{scale e_1} + 1/2 delta_{-scale e_1}.
    static TargetFamily two_point(double scale, int dim) {
        if (!(scale > 0.0)) throw DomainError("two_point: scale must be positive");
        if (dim < 1) throw DomainError("two_point: dim must be positive");
        TargetFamily f(Kind::two_point, dim);
        f.scale_ = scale;
        Vector e1 = Vector::Zero(dim);
        e1[0] = scale;
        const Matrix zero = Matrix::Zero(dim, dim);
        f.components_.push_back(make_component(0.5, e1, zero, dim));
        f.components_.push_back(make_component(0.5, -e1, zero, dim));
        return f;
    }

    Kind kind() const noexcept { return kind_; }
    int dim() const noexcept { return dim_; }
    double scale() const noexcept { return scale_; }
    const std::vector<GaussianComponent>& components() const noexcept { return components_; }

    /// True when pi_0 has no Lebesgue density (some zero covariance direction).
    bool singular() const {
        for (const auto& c : components_)
            if (c.spectrum.minCoeff() <= 0.0) return true;
        return false;
    }

    Vector mean() const {
        Vector m = Vector::Zero(dim_);
        for (const auto& c : components_) m += c.weight * c.mean;
        return m;
    }

    Matrix covariance() const {
        const Vector m = mean();
        Matrix s = Matrix::Zero(dim_, dim_);
        for (const auto& c : components_) {
            const Vector dm = c.mean - m;
            s += c.weight * (c.covariance() + dm * dm.transpose());
        }
        return s;
    }

    /// E ||X_0||^2, the squared second-moment bound M_2^2.
    double second_moment() const {
        double m2 = 0.0;
        for (const auto& c : components_) m2 += c.weight * (c.mean.squaredNorm() + c.spectrum.sum());
        return m2;
    }

    // -- laws of  a X_0 + sqrt(v) Z  ---------------------------------------

    /// grad log of the density of  a X_0 + sqrt(v) Z  at y.
    Vector affine_score(double a, double v, const Vector& y) const {
        check_point(y);
        if (kind_ == Kind::two_point) return two_point_score(a * scale_, v, y);
        Vector out = Vector::Zero(dim_);
        if (components_.size() == 1) {
            component_terms(components_.front(), a, v, y, &out);
            return out;
        }
        std::vector<double> logp(components_.size());
        std::vector<Vector> grads(components_.size());
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < components_.size(); ++i) {
            grads[i].resize(dim_);
            logp[i] = component_terms(components_[i], a, v, y, &grads[i]);
            top = std::max(top, logp[i]);
        }
        double norm = 0.0;
        for (double& lp : logp) {
            lp = std::exp(lp - top);
            norm += lp;
        }
        for (std::size_t i = 0; i < components_.size(); ++i) out += (logp[i] / norm) * grads[i];
        return out;
    }

    /// log density of  a X_0 + sqrt(v) Z  at y.
    double affine_log_density(double a, double v, const Vector& y) const {
        check_point(y);
        if (kind_ == Kind::two_point) {
            check_variance(v);
            const double m = a * scale_;
            const double z = m * y[0] / v;
            const double logcosh = std::abs(z) + std::log1p(std::exp(-2.0 * std::abs(z))) - std::numbers::ln2;
            return -(y.squaredNorm() + m * m) / (2.0 * v) + logcosh -
                   0.5 * dim_ * std::log(2.0 * std::numbers::pi * v);
        }
        double top = -std::numeric_limits<double>::infinity();
        std::vector<double> logp(components_.size());
        for (std::size_t i = 0; i < components_.size(); ++i) {
            logp[i] = component_terms(components_[i], a, v, y, nullptr);
            top = std::max(top, logp[i]);
        }
        double acc = 0.0;
        for (double lp : logp) acc += std::exp(lp - top);
        return top + std::log(acc);
    }

    /// Family of the law of a X_0 + sqrt(v) Z, materialised component-wise.
    TargetFamily affine_pushforward(double a, double v) const {
        TargetFamily f = *this;
        if (kind_ == Kind::two_point) f.kind_ = Kind::mixture;
        for (auto& c : f.components_) {
            c.mean *= a;
            c.spectrum = (a * a * c.spectrum.array() + v).matrix();
        }
        f.scale_ = 0.0;
        return f;
    }

    nlohmann::json to_json() const {
        using nlohmann::json;
        auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
        auto mat = [&](const Matrix& m) {
            json rows = json::array();
            for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec(m.row(i).transpose()));
            return rows;
        };
        json j;
        j["dim"] = dim_;
        switch (kind_) {
            case Kind::two_point:
                j["variant"] = "two_point";
                j["scale"] = scale_;
                break;
            case Kind::gaussian:
                j["variant"] = "gaussian";
                j["mean"] = vec(components_.front().mean);
                j["cov"] = mat(components_.front().covariance());
                break;
            case Kind::mixture: {
                j["variant"] = "mixture";
                json w = json::array(), m = json::array(), s = json::array();
                for (const auto& c : components_) {
                    w.push_back(c.weight);
                    m.push_back(vec(c.mean));
                    s.push_back(mat(c.covariance()));
                }
                j["weights"] = w;
                j["means"] = m;
                j["covs"] = s;
                break;
            }
        }
        return j;
    }

    static TargetFamily from_json(const nlohmann::json& j) {
        auto reject_unknown = [&](std::initializer_list<const char*> allowed) {
            for (const auto& [key, _] : j.items()) {
                if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
                    throw ConfigError("target: unknown key '" + key + "'");
            }
        };
        auto vec = [](const nlohmann::json& a) {
            const auto v = a.get<std::vector<double>>();
            return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
        };
        auto mat = [&](const nlohmann::json& a) {
            const auto rows = a.get<std::vector<std::vector<double>>>();
            Matrix m(rows.size(), rows.empty() ? 0 : rows.front().size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (rows[i].size() != static_cast<std::size_t>(m.cols()))
                    throw DomainError("target: ragged covariance matrix");
                for (std::size_t k = 0; k < rows[i].size(); ++k) m(i, k) = rows[i][k];
            }
            return m;
        };
        const std::string variant = j.at("variant").get<std::string>();
        // dim may be omitted when the parameters fix it
        const std::optional<int> dim = j.contains("dim") ? std::optional(j["dim"].get<int>()) : std::nullopt;
        TargetFamily f = [&] {
            if (variant == "two_point") {
                reject_unknown({"variant", "dim", "scale"});
                return two_point(j.value("scale", 1.0), j.at("dim").get<int>());
            }
            if (variant == "gaussian") {
                reject_unknown({"variant", "dim", "mean", "cov"});
                if (!dim && !j.contains("mean") && !j.contains("cov"))
                    throw DomainError("target: gaussian needs 'dim', 'mean' or 'cov'");
                const Vector m = j.contains("mean") ? vec(j["mean"])
                                 : j.contains("cov") ? Vector::Zero(mat(j["cov"]).rows())
                                                     : Vector::Zero(*dim);
                const Matrix s = j.contains("cov") ? mat(j["cov"]) : Matrix::Identity(m.size(), m.size());
                return gaussian(m, s);
            }
            if (variant == "mixture") {
                reject_unknown({"variant", "dim", "weights", "means", "covs"});
                std::vector<Vector> means;
                std::vector<Matrix> covs;
                for (const auto& m : j.at("means")) means.push_back(vec(m));
                for (const auto& s : j.at("covs")) covs.push_back(mat(s));
                return mixture(j.at("weights").get<std::vector<double>>(), means, covs);
            }
            throw ConfigError("target: unknown variant '" + variant + "'");
        }();
        if (dim && f.dim() != *dim) throw DomainError("target: 'dim' does not match parameter dimensions");
        return f;
    }

private:
    TargetFamily(Kind kind, int dim) : kind_(kind), dim_(dim) {
        if (dim < 1) throw DomainError("target: dim must be positive");
    }

    static GaussianComponent make_component(double w, const Vector& mean, const Matrix& cov, int dim) {
        if (mean.size() != dim || cov.rows() != dim || cov.cols() != dim)
            throw DomainError("target: component dimension mismatch");
        if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12)
            throw DomainError("target: covariance not symmetric");
        Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (cov + cov.transpose()));
        if (eig.eigenvalues().minCoeff() < -1e-10) throw DomainError("target: covariance not PSD");
        GaussianComponent c;
        c.weight = w;
        c.mean = mean;
        c.basis = eig.eigenvectors();
        c.spectrum = eig.eigenvalues().cwiseMax(0.0);
        return c;
    }

    void check_point(const Vector& y) const {
        if (y.size() != dim_) throw DomainError("target: point dimension mismatch");
    }

    static void check_variance(double v) {
        if (!(v > 0.0)) throw DomainError("score of a singular law (zero variance direction)");
    }

    // log(w N(y; a mu, a^2 Sigma + v I)); optionally writes the component score.
    double component_terms(const GaussianComponent& c, double a, double v, const Vector& y, Vector* grad) const {
        const Vector lam = (a * a * c.spectrum.array() + v).matrix();
        check_variance(lam.minCoeff());
        const Vector r = c.basis.transpose() * (y - a * c.mean);
        const Vector scaled = r.cwiseQuotient(lam);
        if (grad) *grad = -(c.basis * scaled);
        if (components_.size() == 1 && grad) return 0.0;  // weights are not needed for a single component
        const double quad = r.dot(scaled);
        const double logdet = lam.array().log().sum();
        return std::log(c.weight) - 0.5 * (quad + logdet + dim_ * std::log(2.0 * std::numbers::pi));
    }

    // Score of 1/2 N(m e_1, v I) + 1/2 N(-m e_1, v I).
    static Vector two_point_score(double m, double v, const Vector& y) {
        check_variance(v);
        Vector s = -y / v;
        const double arg = std::clamp(m * y[0] / v, -30.0, 30.0);
        s[0] += (m / v) * std::tanh(arg);
        return s;
    }

    Kind kind_;
    int dim_;
    double scale_ = 0.0;
    std::vector<GaussianComponent> components_;
};

/// Minimum forward time at which singular families are evaluated.
inline constexpr double kMinSingularTime = 1e-8;

namespace detail {

inline void check_time(const TargetFamily& family, double t) {
    if (!(t >= 0.0)) throw DomainError("forward time must be nonnegative");
    if (family.singular() && t < kMinSingularTime)
        throw DomainError("score of a singular family requested at t < 1e-8");
}

// (a, v) for the OU marginal at forward time t.
inline std::pair<double, double> ou_coefficients(double t) {
    return {std::exp(-t), one_minus_exp_neg(2.0 * t)};
}

}  // namespace detail

/// pi_t for a target family: the family pushed through the OU semigroup.
struct MarginalLaw {
    TargetFamily family;
    double t = 0.0;
};

inline MarginalLaw marginal(const TargetFamily& family, double t) {
    if (!(t >= 0.0)) throw DomainError("marginal: t must be nonnegative");
    const auto [a, v] = detail::ou_coefficients(t);
    return {family.affine_pushforward(a, v), t};
}

/// Exact grad log pi_t(x).
inline Vector score(const TargetFamily& family, double t, const Vector& x) {
    detail::check_time(family, t);
    const auto [a, v] = detail::ou_coefficients(t);
    return family.affine_score(a, v, x);
}

/// grad log (pi_t / gamma)(x) = score + x.
inline Vector relative_score(const TargetFamily& family, double t, const Vector& x) {
    return score(family, t, x) + x;
}

/// log pi_t(x), used as the independent oracle for score gradchecks.
inline double log_density(const TargetFamily& family, double t, const Vector& x) {
    detail::check_time(family, t);
    const auto [a, v] = detail::ou_coefficients(t);
    return family.affine_log_density(a, v, x);
}

/// grad log pi(. ; sigma) evaluated at x / c, where pi(. ; sigma) = pi_0 * N(0, sigma^2 I).
inline Vector reparametrized_score(const TargetFamily& family, double c, double sigma, const Vector& x) {
    if (!(c > 0.0)) throw DomainError("reparametrized_score: c must be positive");
    if (!(sigma >= 0.0)) throw DomainError("reparametrized_score: sigma must be nonnegative");
    return family.affine_score(1.0, sigma * sigma, x / c);
}

/// Exact draw from pi_t.
inline Vector forward_sample(const TargetFamily& family, double t, RandomStream& rng) {
    if (!(t >= 0.0)) throw DomainError("forward_sample: t must be nonnegative");
    const auto [a, v] = detail::ou_coefficients(t);
    const auto& comps = family.components();
    std::size_t idx = 0;
    if (comps.size() > 1) {
        const double u = rng.uniform();
        double acc = 0.0;
        idx = comps.size() - 1;
        for (std::size_t i = 0; i < comps.size(); ++i) {
            acc += comps[i].weight;
            if (u < acc) {
                idx = i;
                break;
            }
        }
    }
    const auto& c = comps[idx];
    const Vector z = rng.normal_vector(family.dim());
    const Vector sd = (a * a * c.spectrum.array() + v).sqrt().matrix();
    return a * c.mean + c.basis * sd.cwiseProduct(z);
}

/// A time-indexed score field s_t(x) with absolute and relative forms.
///
/// The perturbed variant adds epsilon * u(x) with
///   u_i(x) = sqrt(2/d) sin(x_i + i),   i = 1..d,
/// a fixed smooth field whose mean-square norm is close to 1 under
/// near-Gaussian laws, so the L2(pi_t) score error is close to epsilon.
class ScoreField {
public:
    using Evaluator = std::function<Vector(double, const Vector&)>;

    ScoreField() = default;

    static ScoreField exact(const TargetFamily& family) {
        auto fam = std::make_shared<const TargetFamily>(family);
        ScoreField f;
        f.eval_ = [fam](double t, const Vector& x) { return score(*fam, t, x); };
        f.dim_ = family.dim();
        return f;
    }

    static ScoreField from_function(Evaluator eval, int dim) {
        ScoreField f;
        f.eval_ = std::move(eval);
        f.dim_ = dim;
        return f;
    }

    double epsilon() const noexcept { return epsilon_; }
    int dim() const noexcept { return dim_; }

    Vector absolute(double t, const Vector& x) const {
        Vector s = eval_(t, x);
        if (epsilon_ > 0.0) s += epsilon_ * perturbation(x);
        return s;
    }

    Vector relative(double t, const Vector& x) const { return absolute(t, x) + x; }

    static Vector perturbation(const Vector& x) {
        const double norm = std::sqrt(2.0 / static_cast<double>(x.size()));
        Vector u(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) u[i] = norm * std::sin(x[i] + static_cast<double>(i + 1));
        return u;
    }

    friend ScoreField perturb_score(const ScoreField& exact, double epsilon);

private:
    Evaluator eval_;
    double epsilon_ = 0.0;
    int dim_ = 0;
};

inline ScoreField perturb_score(const ScoreField& exact, double epsilon) {
    if (!(epsilon >= 0.0)) throw DomainError("perturb_score: epsilon must be nonnegative");
    ScoreField f = exact;
    f.epsilon_ = exact.epsilon_ + epsilon;
    return f;
}

}  // namespace ddram
