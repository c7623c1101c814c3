#pragma once

// Test-only oracles that do not share code paths with the library.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "ensmooth/theory.hpp"

namespace testsupport {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline MatrixXd random_psd(Eigen::Index m, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g;
    MatrixXd b(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) b(i, j) = g(rng);
    }
    return scale * b * b.transpose() / static_cast<double>(m);
}

inline ensmooth::theory::GaussianLogitModel random_model(Eigen::Index m, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    ensmooth::theory::GaussianLogitModel model;
    model.c = VectorXd(m);
    for (Eigen::Index i = 0; i < m; ++i) model.c(i) = 3.0 * unit(rng);
    model.sigma_c = random_psd(m, rng, 0.5);
    model.sigma_p = random_psd(m, rng, 1.0);
    model.zeta_c = unit(rng);
    model.zeta_p = unit(rng);
    return model;
}

// Stacked member covariance assembled entry by entry.
inline MatrixXd stacked_covariance(const ensmooth::theory::GaussianLogitModel& model, int k) {
    const auto m = model.c.size();
    MatrixXd s(m * k, m * k);
    for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) {
            for (Eigen::Index i = 0; i < m; ++i) {
                for (Eigen::Index j = 0; j < m; ++j) {
                    const double p = model.sigma_p(i, j);
                    const double c = model.sigma_c(i, j);
                    s(a * m + i, b * m + j) = a == b ? p + c : model.zeta_p * p + model.zeta_c * c;
                }
            }
        }
    }
    return s;
}

struct SimulatedMargins {
    VectorXd mean;
    MatrixXd covariance;
    MatrixXd standard_error;  // of each covariance entry, Gaussian fourth moments
};

// Draws `draws` stacked member outputs y* ~ N(c*, Sigma*), averages the
// members, and returns the sample moments of the margins y_bar_0 - y_bar_i.
inline SimulatedMargins simulate_margins(const ensmooth::theory::GaussianLogitModel& model, int k,
                                         std::uint64_t draws, std::uint64_t seed) {
    const auto m = model.c.size();
    const MatrixXd sigma = stacked_covariance(model, k);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(sigma);
    const MatrixXd root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    const std::uint64_t batch = 8192;
    VectorXd sum = VectorXd::Zero(m - 1);
    MatrixXd outer = MatrixXd::Zero(m - 1, m - 1);
    MatrixXd noise(m * k, static_cast<Eigen::Index>(batch));
    for (std::uint64_t begin = 0; begin < draws; begin += batch) {
        const auto cols = static_cast<Eigen::Index>(std::min(batch, draws - begin));
        for (Eigen::Index t = 0; t < cols; ++t) {
            for (Eigen::Index r = 0; r < m * k; ++r) noise(r, t) = g(rng);
        }
        const MatrixXd y = root * noise.leftCols(cols);
        MatrixXd z(m - 1, cols);
        for (Eigen::Index t = 0; t < cols; ++t) {
            VectorXd avg = VectorXd::Zero(m);
            for (int l = 0; l < k; ++l) avg += y.col(t).segment(l * m, m);
            avg /= static_cast<double>(k);
            avg += model.c;
            for (Eigen::Index i = 1; i < m; ++i) z(i - 1, t) = avg(0) - avg(i);
        }
        sum += z.rowwise().sum();
        outer += z * z.transpose();
    }
    const double n = static_cast<double>(draws);
    SimulatedMargins out;
    out.mean = sum / n;
    out.covariance = (outer - n * out.mean * out.mean.transpose()) / (n - 1.0);
    out.standard_error = MatrixXd(m - 1, m - 1);
    for (Eigen::Index i = 0; i < m - 1; ++i) {
        for (Eigen::Index j = 0; j < m - 1; ++j) {
            const auto& c = out.covariance;
            out.standard_error(i, j) = std::sqrt((c(i, i) * c(j, j) + c(i, j) * c(i, j)) / n);
        }
    }
    return out;
}

}  // namespace testsupport
