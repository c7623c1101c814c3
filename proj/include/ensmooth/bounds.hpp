#pragma once

// Exact binomial confidence limits and standard-normal primitives.
//
// The Clopper-Pearson limits are obtained by inverting the regularized
// incomplete Beta function:
//
//   lower(k, n, 1-a) = a-quantile of Beta(k, n-k+1)      (0 when k = 0)
//   upper(k, n, 1-a) = 1 - lower(n-k, n, 1-a)            (1 when k = n)

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>

#include "ensmooth/errors.hpp"

namespace ensmooth {

/// Confidence 1 - alpha of a one-sided bound. The significance alpha is the
/// stored quantity so that small tail probabilities such as 1e-4 / 2 keep
/// full relative precision.
class ConfidenceLevel {
public:
    /// Builds the level from its confidence value, e.g. 0.999.
    explicit ConfidenceLevel(double confidence) : ConfidenceLevel(Tag{}, 1.0 - confidence) {
        detail::require(confidence > 0.0 && confidence < 1.0,
                        "confidence must lie in (0,1), got " + std::to_string(confidence));
    }

    /// Builds the level 1 - alpha from a significance alpha in (0,1).
    static ConfidenceLevel from_significance(double alpha) {
        detail::require(alpha > 0.0 && alpha < 1.0,
                        "significance must lie in (0,1), got " + std::to_string(alpha));
        return ConfidenceLevel(Tag{}, alpha);
    }

    double value() const noexcept { return 1.0 - alpha_; }
    double significance() const noexcept { return alpha_; }

private:
    struct Tag {};
    ConfidenceLevel(Tag, double alpha) : alpha_(alpha) {}
    double alpha_;
};

/// k successes out of n Bernoulli trials.
struct BinomialObservation {
    std::uint64_t successes;
    std::uint64_t trials;

    BinomialObservation(std::uint64_t k, std::uint64_t n) : successes(k), trials(n) {
        detail::require(n >= 1, "binomial observation needs at least one trial");
        detail::require(k <= n, "successes exceed trials");
    }
};

// ---------------------------------------------------------------------------
// Standard normal
// ---------------------------------------------------------------------------

inline double gaussian_cdf(double z) noexcept {
    return 0.5 * std::erfc(-z * 0.70710678118654752440);
}

/// Inverse of the standard normal CDF (Wichura, AS241 PPND16; relative
/// accuracy about 1e-16).
inline double gaussian_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw DomainError("gaussian_quantile: p must lie in (0,1), got " + std::to_string(p));
    }
    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q *
               (((((((2509.0809287301226727 * r + 33430.575583588128105) * r +
                     67265.770927008700853) * r + 45921.953931549871457) * r +
                   13731.693765509461125) * r + 1971.5909503065514427) * r +
                 133.14166789178437745) * r + 3.387132872796366608) /
               (((((((5226.495278852545925 * r + 28729.085735721942674) * r +
                     39307.89580009271061) * r + 21213.794301586595867) * r +
                   5394.1960214247511077) * r + 687.1870074920579083) * r +
                 42.313330701600911252) * r + 1.0);
    }
    double r = q < 0.0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double z;
    if (r <= 5.0) {
        r -= 1.6;
        z = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r +
                  0.24178072517745061177) * r + 1.27045825245236838258) * r +
                3.64784832476320460504) * r + 5.7694972214606914055) * r +
              4.6303378461565452959) * r + 1.42343711074968357734) /
            (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r +
                  0.0151986665636164571966) * r + 0.14810397642748007459) * r +
                0.68976733498510000455) * r + 1.6763848301838038494) * r +
              2.05319162663775882187) * r + 1.0);
    } else {
        r -= 5.0;
        z = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                  0.0012426609473880784386) * r + 0.026532189526576123093) * r +
                0.29656057182850489123) * r + 1.7848265399172913358) * r +
              5.4637849111641143699) * r + 6.6579046435011037772) /
            (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r +
                  1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r +
                0.0148753612908506148525) * r + 0.13692988092273580531) * r +
              0.59983220655588793769) * r + 1.0);
    }
    return q < 0.0 ? -z : z;
}

/// One-sided certified l2 radius sigma * Phi^-1(p_lower). Non-positive values
/// mean "not certifiable".
inline double certified_radius(double p_lower, double sigma) {
    detail::require(sigma > 0.0, "noise level sigma must be positive");
    return sigma * gaussian_quantile(p_lower);
}

// ---------------------------------------------------------------------------
// Incomplete Beta and binomial helpers
// ---------------------------------------------------------------------------

namespace detail {

inline double log_beta(double a, double b) {
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

// Continued fraction for I_x(a, b), modified Lentz. Converges quickly for
// x < (a + 1) / (a + b + 2).
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 1e-16;
    const auto max_iter = static_cast<int>(1000 + 20.0 * std::sqrt(a + b));
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < kEps) return h;
    }
    throw NumericalError("incomplete beta continued fraction did not converge");
}

// Stirling series remainder: lgamma(x) - [(x - 1/2) log x - x + log(2 pi)/2].
inline double stirling_remainder(double x) {
    const double r = 1.0 / (x * x);
    return (1.0 / 12.0 - r * (1.0 / 360.0 - r * (1.0 / 1260.0 - r * (1.0 / 1680.0 - r / 1188.0)))) / x;
}

// log of x^a (1-x)^b / B(a, b). For large shapes the leading terms of the
// three log-gamma values cancel analytically, leaving deviations from the
// mode a / (a + b) that log1p evaluates without loss.
inline double log_beta_kernel(double a, double b, double x) {
    if (a < 10.0 || b < 10.0) {
        return a * std::log(x) + b * std::log1p(-x) - log_beta(a, b);
    }
    const double s = a + b;
    const double x0 = a / s;
    const double y0 = b / s;
    const double dx = x - x0;
    return a * std::log1p(dx / x0) + b * std::log1p(-dx / y0) +
           0.5 * std::log(a * y0 / (2.0 * std::numbers::pi)) -
           (stirling_remainder(a) + stirling_remainder(b) - stirling_remainder(s));
}

}  // namespace detail

/// Regularized incomplete Beta function I_x(a, b) for a, b > 0.
inline double regularized_incomplete_beta(double a, double b, double x) {
    detail::require(a > 0.0 && b > 0.0, "incomplete beta requires a, b > 0");
    detail::require(x >= 0.0 && x <= 1.0, "incomplete beta requires x in [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return std::exp(detail::log_beta_kernel(a, b, x)) *
               detail::beta_continued_fraction(a, b, x) / a;
    }
    return 1.0 - std::exp(detail::log_beta_kernel(b, a, 1.0 - x)) *
                     detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

namespace detail {

// Solves I_p(a, b) = target for p by Newton steps safeguarded by a shrinking
// bisection bracket. I_p is strictly increasing in p, so the bracket always
// holds the root.
inline double beta_quantile(double a, double b, double target) {
    double lo = 0.0;
    double hi = 1.0;
    double p = a / (a + b);
    for (int iter = 0; iter < 400; ++iter) {
        const double f = regularized_incomplete_beta(a, b, p) - target;
        if (f == 0.0) return p;
        if (f < 0.0) {
            lo = p;
        } else {
            hi = p;
        }
        if (hi - lo <= 1e-15 * std::max(1.0, hi) || hi - lo < std::numeric_limits<double>::min()) {
            break;
        }
        const double log_density = (a - 1.0) * std::log(p) + (b - 1.0) * std::log1p(-p) -
                                   log_beta(a, b);
        double next = 0.5 * (lo + hi);
        if (std::isfinite(log_density)) {
            const double newton = p - f / std::exp(log_density);
            if (std::isfinite(newton) && newton > lo && newton < hi &&
                std::abs(newton - p) < 0.5 * (hi - lo)) {
                next = newton;
            }
        }
        if (std::abs(next - p) <= 1e-17 * std::max(p, 1e-300)) return next;
        p = next;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

namespace detail {

// Smallest c in [0, n] with pred(c), for pred monotone in c; nullopt if none.
template <typename Pred>
std::optional<std::uint64_t> first_count(std::uint64_t n, Pred pred) {
    if (!pred(n)) return std::nullopt;
    std::uint64_t lo = 0;
    std::uint64_t hi = n;
    while (lo < hi) {
        const std::uint64_t mid = lo + (hi - lo) / 2;
        if (pred(mid)) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    return lo;
}

}  // namespace detail

/// One-sided Clopper-Pearson lower limit: P(p >= result) >= conf.
inline double lower_conf_bound(const BinomialObservation& obs, const ConfidenceLevel& conf) {
    if (obs.successes == 0) return 0.0;
    const auto k = static_cast<double>(obs.successes);
    const auto n = static_cast<double>(obs.trials);
    return detail::beta_quantile(k, n - k + 1.0, conf.significance());
}

/// One-sided Clopper-Pearson upper limit: P(p <= result) >= conf.
inline double upper_conf_bound(const BinomialObservation& obs, const ConfidenceLevel& conf) {
    if (obs.successes == obs.trials) return 1.0;
    return 1.0 - lower_conf_bound(BinomialObservation(obs.trials - obs.successes, obs.trials), conf);
}

/// Binomial probability mass C(n,k) p^k (1-p)^(n-k), evaluated in log space.
inline double binomial_pmf(std::uint64_t successes, std::uint64_t trials, double p) {
    detail::require(successes <= trials, "successes exceed trials");
    detail::require(p >= 0.0 && p <= 1.0, "binomial_pmf: p must lie in [0,1]");
    if (p == 0.0) return successes == 0 ? 1.0 : 0.0;
    if (p == 1.0) return successes == trials ? 1.0 : 0.0;
    const auto k = static_cast<double>(successes);
    const auto n = static_cast<double>(trials);
    if (trials <= 50) {
        // Binomial coefficients up to n = 50 are exact in binary64.
        double choose = 1.0;
        const std::uint64_t j = std::min(successes, trials - successes);
        for (std::uint64_t i = 1; i <= j; ++i) {
            choose = choose * static_cast<double>(trials - j + i) / static_cast<double>(i);
        }
        return choose * std::pow(p, k) * std::pow(1.0 - p, n - k);
    }
    const double log_choose = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    return std::exp(log_choose + k * std::log(p) + (n - k) * std::log1p(-p));
}

}  // namespace ensmooth
