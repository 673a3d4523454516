#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ddram {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr const char* kVersion = "0.3.0";

/// Input outside the mathematical domain of an operation (negative time,
/// singular score evaluation, malformed family parameters).
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A process specification that cannot be integrated as requested
/// (sign change of the integrating factor, missing closed form, ...).
class SpecError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Quadrature or root finding failed to converge.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid experiment configuration. The message carries a line anchor when
/// the source format provides one.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A sampler step failed; carries the step index at which the chain aborted.
class StepError : public std::runtime_error {
public:
    StepError(std::size_t step, const std::string& what)
        : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

namespace detail {

inline void require(bool cond, const char* msg) {
    if (!cond) throw DomainError(msg);
}

// -expm1(-x) = 1 - e^{-x}, accurate for small x.
inline double one_minus_exp_neg(double x) { return -std::expm1(-x); }

}  // namespace detail

}  // namespace ddram
