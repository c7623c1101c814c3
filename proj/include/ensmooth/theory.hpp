#pragma once

// Gaussian logit-margin model of a soft-voting ensemble at a fixed input.
//
// Member l outputs y^l = y_c^l + y_p^l with E[y_c] = c, Cov[y_c] = Sigma_c,
// Cov[y_p] = Sigma_p, and cross-member covariances zeta_c Sigma_c and
// zeta_p Sigma_p. Class 0 is taken as the majority class; the margins of the
// ensemble mean are z_i = y_bar_0 - y_bar_i for i = 1..m-1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ensmooth/bounds.hpp"
#include "ensmooth/errors.hpp"
#include "ensmooth/random.hpp"

namespace ensmooth::theory {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace detail {

using ensmooth::detail::require;

inline double symmetric_tolerance(const MatrixXd& a) {
    return 1e-10 * std::max(1.0, a.cwiseAbs().maxCoeff());
}

inline bool is_symmetric(const MatrixXd& a) {
    return a.rows() == a.cols() && (a - a.transpose()).cwiseAbs().maxCoeff() <= symmetric_tolerance(a);
}

// Eigen-decomposes a symmetric matrix, clipping eigenvalues in
// [-tol, 0) to zero. Throws if a more negative eigenvalue shows up.
inline Eigen::SelfAdjointEigenSolver<MatrixXd> psd_eigen(const MatrixXd& a, const char* what) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> solver(a);
    if (solver.info() != Eigen::Success) throw NumericalError(std::string(what) + ": eigen-decomposition failed");
    const double tol = symmetric_tolerance(a);
    if (solver.eigenvalues().minCoeff() < -tol) {
        throw ParameterError(std::string(what) + " is not positive semidefinite");
    }
    return solver;
}

}  // namespace detail

/// Symmetric PSD square root L with L L^T = a (spectral; works for singular a).
inline MatrixXd psd_sqrt(const MatrixXd& a) {
    const auto solver = detail::psd_eigen(a, "covariance");
    const VectorXd roots = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return solver.eigenvectors() * roots.asDiagonal() * solver.eigenvectors().transpose();
}

struct GaussianLogitModel {
    VectorXd c;        // mean logits, length m
    MatrixXd sigma_c;  // clean-component covariance, m x m
    MatrixXd sigma_p;  // perturbation-component covariance, m x m
    double zeta_c = 0.0;
    double zeta_p = 0.0;

    Eigen::Index classes() const noexcept { return c.size(); }

    void validate() const {
        const auto m = c.size();
        detail::require(m >= 2, "model needs at least two classes");
        detail::require(sigma_c.rows() == m && sigma_c.cols() == m, "sigma_c must be m x m");
        detail::require(sigma_p.rows() == m && sigma_p.cols() == m, "sigma_p must be m x m");
        detail::require(c.allFinite() && sigma_c.allFinite() && sigma_p.allFinite(),
                        "model entries must be finite");
        detail::require(detail::is_symmetric(sigma_c), "sigma_c must be symmetric");
        detail::require(detail::is_symmetric(sigma_p), "sigma_p must be symmetric");
        detail::psd_eigen(sigma_c, "sigma_c");
        detail::psd_eigen(sigma_p, "sigma_p");
        detail::require(zeta_c >= 0.0 && zeta_c <= 1.0, "zeta_c must lie in [0,1]");
        detail::require(zeta_p >= 0.0 && zeta_p <= 1.0, "zeta_p must lie in [0,1]");
    }
};

struct MarginStatistics {
    VectorXd mean;        // c_0 - c_i, i = 1..m-1
    MatrixXd covariance;  // (m-1) x (m-1)
};

/// Joint covariance of the stacked member logits [y^1; ...; y^k] (mk x mk):
/// diagonal blocks Sigma_p + Sigma_c, off-diagonal blocks
/// zeta_p Sigma_p + zeta_c Sigma_c.
inline MatrixXd joint_logit_covariance(const GaussianLogitModel& model, int k) {
    detail::require(k >= 1, "ensemble size must be >= 1");
    const auto m = model.classes();
    const MatrixXd own = model.sigma_p + model.sigma_c;
    const MatrixXd cross = model.zeta_p * model.sigma_p + model.zeta_c * model.sigma_c;
    MatrixXd joint(m * k, m * k);
    for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) joint.block(a * m, b * m, m, m) = (a == b) ? own : cross;
    }
    return joint;
}

/// Difference matrix D ((m-1) x mk) mapping stacked logits to the margins of
/// the ensemble mean: column l*m + q carries 1/k for q = 0 and -1/k for q = i.
inline MatrixXd margin_difference_matrix(Eigen::Index m, int k) {
    detail::require(m >= 2 && k >= 1, "difference matrix needs m >= 2 and k >= 1");
    MatrixXd d = MatrixXd::Zero(m - 1, m * k);
    const double w = 1.0 / k;
    for (Eigen::Index i = 1; i < m; ++i) {
        for (int l = 0; l < k; ++l) {
            d(i - 1, l * m) = w;
            d(i - 1, l * m + i) = -w;
        }
    }
    return d;
}

/// Margin mean and covariance D Sigma* D^T for an ensemble of k members.
inline MarginStatistics margin_statistics(const GaussianLogitModel& model, int k) {
    model.validate();
    const auto m = model.classes();
    const MatrixXd d = margin_difference_matrix(m, k);
    MarginStatistics out;
    out.mean = VectorXd::Constant(m - 1, model.c(0)) - model.c.tail(m - 1);
    const MatrixXd cov = d * joint_logit_covariance(model, k) * d.transpose();
    out.covariance = 0.5 * (cov + cov.transpose());
    return out;
}

/// Per-margin variance by the scalar formula
///   (k + 2 C(k,2) zeta_p)/k^2 * (s_p0^2 + s_pi^2 - 2 cov_p(0,i)) + (clean analog).
inline VectorXd margin_variance_closed_form(const GaussianLogitModel& model, int k) {
    detail::require(k >= 1, "ensemble size must be >= 1");
    const auto m = model.classes();
    const double kk = k;
    const double pairs = kk * (kk - 1.0) / 2.0;
    const double factor_p = (kk + 2.0 * pairs * model.zeta_p) / (kk * kk);
    const double factor_c = (kk + 2.0 * pairs * model.zeta_c) / (kk * kk);
    VectorXd out(m - 1);
    for (Eigen::Index i = 1; i < m; ++i) {
        const auto& sp = model.sigma_p;
        const auto& sc = model.sigma_c;
        out(i - 1) = factor_p * (sp(0, 0) + sp(i, i) - 2.0 * sp(0, i)) +
                     factor_c * (sc(0, 0) + sc(i, i) - 2.0 * sc(0, i));
    }
    return out;
}

/// sigma^2(k) / sigma^2(1) = (1 + zeta (k - 1)) / k.
inline double variance_ratio(std::uint64_t k, double zeta) {
    detail::require(k >= 1, "ensemble size must be >= 1");
    detail::require(zeta >= 0.0 && zeta <= 1.0, "zeta must lie in [0,1]");
    const double kk = static_cast<double>(k);
    return (1.0 + zeta * (kk - 1.0)) / kk;
}

struct ProbabilityEstimate {
    double estimate = 0.0;
    double standard_error = 0.0;
};

/// Monte Carlo estimate of P(z_i > 0 for all i) for z ~ N(mean, covariance).
/// Draw t uses the counter stream (seed, t), so the estimate is a pure
/// function of its arguments; the same seed gives common random numbers
/// across different covariances.
inline ProbabilityEstimate success_probability_mc(const MarginStatistics& stats, std::uint64_t n_mc,
                                                  std::uint64_t seed) {
    detail::require(n_mc >= 1, "n_mc must be >= 1");
    const auto dim = stats.mean.size();
    detail::require(dim >= 1 && stats.covariance.rows() == dim && stats.covariance.cols() == dim,
                    "margin statistics have inconsistent shapes");
    const MatrixXd root = psd_sqrt(0.5 * (stats.covariance + stats.covariance.transpose()));
    const CounterStream stream(seed, 0x6f7274686e74ull);

    constexpr std::uint64_t kBatch = 4096;
    MatrixXd normals(dim, static_cast<Eigen::Index>(kBatch));
    std::uint64_t hits = 0;
    for (std::uint64_t begin = 0; begin < n_mc; begin += kBatch) {
        const std::uint64_t batch = std::min(kBatch, n_mc - begin);
        for (std::uint64_t t = 0; t < batch; ++t) {
            for (Eigen::Index j = 0; j < dim; j += 2) {
                const auto u = stream.uniform_pair(begin + t, static_cast<std::uint32_t>(j / 2), 0);
                normals(j, static_cast<Eigen::Index>(t)) = gaussian_quantile(u[0]);
                if (j + 1 < dim) normals(j + 1, static_cast<Eigen::Index>(t)) = gaussian_quantile(u[1]);
            }
        }
        const MatrixXd z = (root * normals.leftCols(static_cast<Eigen::Index>(batch))).colwise() + stats.mean;
        for (Eigen::Index t = 0; t < z.cols(); ++t) {
            if ((z.col(t).array() > 0.0).all()) ++hits;
        }
    }
    const double p = static_cast<double>(hits) / static_cast<double>(n_mc);
    return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(n_mc))};
}

/// max(0, 1 - sum_i Var[z_i] / E[z_i]^2), valid for any margin distribution
/// (Chebyshev per margin plus a union bound). Requires every mean margin > 0.
inline double chebyshev_lower_bound(const MarginStatistics& stats) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < stats.mean.size(); ++i) {
        const double mu = stats.mean(i);
        if (!(mu > 0.0)) {
            throw ParameterError("chebyshev_lower_bound: mean margin " + std::to_string(i + 1) +
                                 " is not positive");
        }
        total += stats.covariance(i, i) / (mu * mu);
    }
    return std::max(0.0, 1.0 - total);
}

// ---------------------------------------------------------------------------
// Distribution of the certified radius
// ---------------------------------------------------------------------------

struct RadiusOutcome {
    std::uint64_t successes = 0;
    double mass = 0.0;
    bool abstains = true;
    std::optional<double> radius;  // set for certifying outcomes of nonzero mass
};

struct RadiusDistribution {
    std::vector<RadiusOutcome> outcomes;  // one per success count 0..n
    double abstain_mass = 0.0;
    double expected_radius = 0.0;  // E[R 1(R > 0)]

    double total_mass() const {
        double t = 0.0;
        for (const auto& o : outcomes) t += o.mass;
        return t;
    }
};

/// Law of the radius sigma Phi^-1(lower(n1, n, 1 - alpha)) when n1 ~ Bin(n, p1),
/// assuming the majority class was selected correctly.
inline RadiusDistribution radius_distribution(double p1, std::uint64_t n, double alpha, double sigma) {
    detail::require(p1 >= 0.0 && p1 <= 1.0, "p1 must lie in [0,1]");
    detail::require(n >= 1, "n must be >= 1");
    detail::require(sigma > 0.0, "sigma must be positive");
    const auto conf = ConfidenceLevel::from_significance(alpha);

    // The lower bound is increasing in n1, so radii are positive exactly
    // from some count onward.
    const auto first_positive = ensmooth::detail::first_count(n, [&](std::uint64_t c) {
        return lower_conf_bound(BinomialObservation(c, n), conf) > 0.5;
    });

    RadiusDistribution out;
    out.outcomes.resize(n + 1);
    for (std::uint64_t c = 0; c <= n; ++c) {
        auto& o = out.outcomes[c];
        o.successes = c;
        o.mass = binomial_pmf(c, n, p1);
        o.abstains = !(first_positive && c >= *first_positive);
        if (o.abstains) {
            out.abstain_mass += o.mass;
        } else if (o.mass > 0.0) {
            const double p_lo = lower_conf_bound(BinomialObservation(c, n), conf);
            o.radius = sigma * gaussian_quantile(p_lo);
            out.expected_radius += o.mass * *o.radius;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter estimation
// ---------------------------------------------------------------------------

/// Logit observations of k members at one input, possibly repeated over R
/// independent replicates of the training randomness. perturbed[r][l][j] and
/// perturbed[r][l'][j] were produced with the same noise draw j.
struct LogitSampleSet {
    std::vector<std::vector<VectorXd>> clean;                  // [r][l] -> m
    std::vector<std::vector<std::vector<VectorXd>>> perturbed;  // [r][l][j] -> m

    std::size_t replicates() const noexcept { return clean.size(); }
    std::size_t classifiers() const noexcept { return clean.empty() ? 0 : clean.front().size(); }
    std::size_t perturbations() const noexcept {
        return perturbed.empty() || perturbed.front().empty() ? 0 : perturbed.front().front().size();
    }
};

struct ModelEstimate {
    GaussianLogitModel model;
    bool zeta_c_identified = false;  // needs >= 2 replicates
    bool zeta_p_identified = false;
};

namespace detail {

// Median over entries (a <= b) of inter(a,b) / intra(a,b) for all supplied
// inter-member matrices, skipping entries where |intra| is below
// 1e-6 max|intra|. Returns nullopt when no entry is usable.
inline std::optional<double> median_ratio(const std::vector<MatrixXd>& inter, const MatrixXd& intra) {
    const double scale = intra.cwiseAbs().maxCoeff();
    if (!(scale > 0.0)) return std::nullopt;
    const double floor = 1e-6 * scale;
    std::vector<double> ratios;
    for (const auto& x : inter) {
        for (Eigen::Index a = 0; a < intra.rows(); ++a) {
            for (Eigen::Index b = a; b < intra.cols(); ++b) {
                if (std::abs(intra(a, b)) >= floor) ratios.push_back(x(a, b) / intra(a, b));
            }
        }
    }
    if (ratios.empty()) return std::nullopt;
    const auto mid = ratios.begin() + static_cast<std::ptrdiff_t>(ratios.size() / 2);
    std::nth_element(ratios.begin(), mid, ratios.end());
    double median = *mid;
    if (ratios.size() % 2 == 0) {
        median = 0.5 * (median + *std::max_element(ratios.begin(), mid));
    }
    return std::clamp(median, 0.0, 1.0);
}

// Symmetrized sample cross-covariance of paired columns.
inline MatrixXd cross_covariance(const MatrixXd& u, const MatrixXd& v) {
    const MatrixXd uc = u.colwise() - u.rowwise().mean();
    const MatrixXd vc = v.colwise() - v.rowwise().mean();
    const MatrixXd cov = uc * vc.transpose() / static_cast<double>(u.cols() - 1);
    return 0.5 * (cov + cov.transpose());
}

}  // namespace detail

/// Fits (c, Sigma_c, Sigma_p, zeta_c, zeta_p) from member logits.
///  - c, Sigma_c: mean and covariance of the clean logits over members and replicates;
///  - Sigma_p: covariance of (perturbed - clean) over draws, pooled over members;
///  - zeta_p: median ratio of inter-member to intra-member covariance of the
///    perturbation effect (pairs share noise draws);
///  - zeta_c: same for the clean logits across replicates (needs R >= 2;
///    otherwise reported as 0 and flagged unidentified).
inline ModelEstimate estimate_model(const LogitSampleSet& data) {
    const std::size_t replicates = data.replicates();
    const std::size_t k = data.classifiers();
    const std::size_t draws = data.perturbations();
    detail::require(replicates >= 1, "estimate_model: no replicates");
    detail::require(k >= 2, "estimate_model: at least two classifiers required");
    detail::require(draws >= 2, "estimate_model: at least two perturbations per classifier required");
    detail::require(data.perturbed.size() == replicates, "estimate_model: replicate count mismatch");
    const auto m = data.clean.front().front().size();
    detail::require(m >= 2, "estimate_model: at least two classes required");
    for (std::size_t r = 0; r < replicates; ++r) {
        detail::require(data.clean[r].size() == k && data.perturbed[r].size() == k,
                        "estimate_model: ragged classifier lists");
        for (std::size_t l = 0; l < k; ++l) {
            detail::require(data.clean[r][l].size() == m, "estimate_model: ragged class counts");
            detail::require(data.perturbed[r][l].size() == draws, "estimate_model: ragged perturbation lists");
            for (const auto& y : data.perturbed[r][l]) {
                detail::require(y.size() == m, "estimate_model: ragged class counts");
            }
        }
    }

    ModelEstimate out;
    auto& model = out.model;

    // Clean component.
    MatrixXd clean_all(m, static_cast<Eigen::Index>(replicates * k));
    for (std::size_t r = 0; r < replicates; ++r) {
        for (std::size_t l = 0; l < k; ++l) clean_all.col(static_cast<Eigen::Index>(r * k + l)) = data.clean[r][l];
    }
    model.c = clean_all.rowwise().mean();
    model.sigma_c = clean_all.cols() >= 2 ? detail::cross_covariance(clean_all, clean_all)
                                          : MatrixXd::Zero(m, m);

    // Perturbation component: deviations from the member's clean output.
    std::vector<std::vector<MatrixXd>> deviations(replicates, std::vector<MatrixXd>(k));
    MatrixXd pooled = MatrixXd::Zero(m, m);
    for (std::size_t r = 0; r < replicates; ++r) {
        for (std::size_t l = 0; l < k; ++l) {
            MatrixXd dev(m, static_cast<Eigen::Index>(draws));
            for (std::size_t j = 0; j < draws; ++j) {
                dev.col(static_cast<Eigen::Index>(j)) = data.perturbed[r][l][j] - data.clean[r][l];
            }
            pooled += detail::cross_covariance(dev, dev);
            deviations[r][l] = std::move(dev);
        }
    }
    model.sigma_p = pooled / static_cast<double>(replicates * k);

    std::vector<MatrixXd> inter_p;
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a + 1; b < k; ++b) {
            MatrixXd acc = MatrixXd::Zero(m, m);
            for (std::size_t r = 0; r < replicates; ++r) {
                acc += detail::cross_covariance(deviations[r][a], deviations[r][b]);
            }
            inter_p.push_back(acc / static_cast<double>(replicates));
        }
    }
    if (const auto z = detail::median_ratio(inter_p, model.sigma_p)) {
        model.zeta_p = *z;
        out.zeta_p_identified = true;
    }

    if (replicates >= 2) {
        std::vector<MatrixXd> per_member(k);
        MatrixXd intra = MatrixXd::Zero(m, m);
        for (std::size_t l = 0; l < k; ++l) {
            per_member[l].resize(m, static_cast<Eigen::Index>(replicates));
            for (std::size_t r = 0; r < replicates; ++r) {
                per_member[l].col(static_cast<Eigen::Index>(r)) = data.clean[r][l];
            }
            intra += detail::cross_covariance(per_member[l], per_member[l]);
        }
        intra /= static_cast<double>(k);
        std::vector<MatrixXd> inter_c;
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t b = a + 1; b < k; ++b) {
                inter_c.push_back(detail::cross_covariance(per_member[a], per_member[b]));
            }
        }
        if (const auto z = detail::median_ratio(inter_c, intra)) {
            model.zeta_c = *z;
            out.zeta_c_identified = true;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ensemble-size sweep
// ---------------------------------------------------------------------------

struct SweepSettings {
    int k_max = 50;
    std::uint64_t n_mc = 100000;
    std::uint64_t seed = 0;
    std::uint64_t n = 1000;  // samples of the certification the radius refers to
    double alpha = 0.001;
    double sigma = 0.25;
};

struct SweepRow {
    int k = 1;
    double var_ratio_p = 1.0;
    double var_ratio_c = 1.0;
    double p1 = 0.0;
    double p1_se = 0.0;
    std::optional<double> chebyshev;  // nullopt when a mean margin is not positive
    double expected_radius = 0.0;
};

/// Rows for k = 1..k_max. Every k reuses the same Monte Carlo stream.
inline std::vector<SweepRow> theory_sweep(const GaussianLogitModel& model, const SweepSettings& settings) {
    model.validate();
    detail::require(settings.k_max >= 1, "k_max must be >= 1");
    const bool positive_margins = (model.c(0) - model.c.tail(model.classes() - 1).array() > 0.0).all();
    std::vector<SweepRow> rows;
    rows.reserve(static_cast<std::size_t>(settings.k_max));
    for (int k = 1; k <= settings.k_max; ++k) {
        SweepRow row;
        row.k = k;
        row.var_ratio_p = variance_ratio(static_cast<std::uint64_t>(k), model.zeta_p);
        row.var_ratio_c = variance_ratio(static_cast<std::uint64_t>(k), model.zeta_c);
        const auto stats = margin_statistics(model, k);
        const auto p = success_probability_mc(stats, settings.n_mc, settings.seed);
        row.p1 = p.estimate;
        row.p1_se = p.standard_error;
        if (positive_margins) row.chebyshev = chebyshev_lower_bound(stats);
        row.expected_radius =
            radius_distribution(row.p1, settings.n, settings.alpha, settings.sigma).expected_radius;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace ensmooth::theory
