#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ensmooth/bounds.hpp"
#include "ensmooth/errors.hpp"
#include "ensmooth/random.hpp"

namespace ensmooth {

/// Pre-softmax scores, one per class.
class LogitVector {
public:
    LogitVector() = default;
    explicit LogitVector(std::vector<double> values) : values_(std::move(values)) {}
    LogitVector(std::initializer_list<double> values) : values_(values) {}

    std::size_t size() const noexcept { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }
    std::span<const double> values() const noexcept { return values_; }
    std::vector<double>& mutable_values() noexcept { return values_; }

    /// Index of the largest score; ties go to the lowest index.
    std::size_t argmax() const {
        detail::require(!values_.empty(), "argmax of an empty logit vector");
        std::size_t best = 0;
        for (std::size_t i = 1; i < values_.size(); ++i) {
            if (values_[i] > values_[best]) best = i;
        }
        return best;
    }

    bool all_finite() const noexcept {
        for (double v : values_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    friend bool operator==(const LogitVector&, const LogitVector&) = default;

private:
    std::vector<double> values_;
};

/// One call of a (possibly composite) classifier and how many underlying
/// models it took.
struct Evaluation {
    LogitVector logits;
    std::size_t models_evaluated = 1;
    bool consensus_hit = false;
};

/// A deterministic scoring function f: R^d -> R^m. Implementations are
/// immutable after construction, so `evaluate` may be called concurrently.
class BaseClassifier {
public:
    virtual ~BaseClassifier() = default;

    virtual std::size_t class_count() const = 0;
    virtual std::size_t input_dim() const = 0;
    virtual LogitVector evaluate(std::span<const double> x) const = 0;

    /// Number of underlying models a full evaluation touches.
    virtual std::size_t model_count() const { return 1; }

    virtual Evaluation evaluate_counted(std::span<const double> x) const {
        return Evaluation{evaluate(x), 1, false};
    }

    /// Hard decision F(x) = argmax_q f_q(x).
    std::size_t predict(std::span<const double> x) const { return evaluate(x).argmax(); }

protected:
    void check_input(std::span<const double> x) const {
        if (x.size() != input_dim()) {
            throw ParameterError("input has dimension " + std::to_string(x.size()) +
                                 ", classifier expects " + std::to_string(input_dim()));
        }
    }
};

using ClassifierPtr = std::shared_ptr<const BaseClassifier>;

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Isotropic Gaussian noise N(0, sigma^2 I) drawn from a keyed counter stream.
/// A perturbation is a pure function of (seed, sample_id, stage_id, index).
struct NoiseSource {
    std::uint64_t seed = 0;
    double sigma = 0.0;

    NoiseSource(std::uint64_t seed_, double sigma_) : seed(seed_), sigma(sigma_) {
        detail::require(sigma_ >= 0.0 && std::isfinite(sigma_), "noise sigma must be finite and >= 0");
    }
};

/// Writes the perturbation for draw `index` of stage `stage_id` on input
/// `sample_id` into `out` (length d).
inline void fill_perturbation(const NoiseSource& noise, std::uint64_t sample_id,
                              std::uint32_t stage_id, std::uint64_t index, std::span<double> out) {
    if (noise.sigma == 0.0) {
        std::fill(out.begin(), out.end(), 0.0);
        return;
    }
    const CounterStream stream(noise.seed, sample_id);
    const std::size_t d = out.size();
    for (std::size_t j = 0; j < d; j += 2) {
        const auto u = stream.uniform_pair(index, static_cast<std::uint32_t>(j / 2), stage_id);
        out[j] = noise.sigma * gaussian_quantile(u[0]);
        if (j + 1 < d) out[j + 1] = noise.sigma * gaussian_quantile(u[1]);
    }
}

inline std::vector<double> sample_perturbation(const NoiseSource& noise, std::uint64_t sample_id,
                                               std::uint32_t stage_id, std::uint64_t index,
                                               std::size_t d) {
    detail::require(d >= 1, "perturbation dimension must be >= 1");
    std::vector<double> out(d);
    fill_perturbation(noise, sample_id, stage_id, index, out);
    return out;
}

// ---------------------------------------------------------------------------
// Analytic classifiers
// ---------------------------------------------------------------------------

/// Multi-class affine scorer f(x) = W x + b, W row-major m x d.
class AffineClassifier : public BaseClassifier {
public:
    AffineClassifier(std::size_t classes, std::size_t dim, std::vector<double> weights,
                     std::vector<double> bias)
        : classes_(classes), dim_(dim), weights_(std::move(weights)), bias_(std::move(bias)) {
        detail::require(classes_ >= 2, "a classifier needs at least two classes");
        detail::require(dim_ >= 1, "input dimension must be >= 1");
        detail::require(weights_.size() == classes_ * dim_, "weight matrix must be classes x dim");
        detail::require(bias_.size() == classes_, "bias must have one entry per class");
        for (double v : weights_) detail::require(std::isfinite(v), "weights must be finite");
        for (double v : bias_) detail::require(std::isfinite(v), "bias must be finite");
    }

    std::size_t class_count() const override { return classes_; }
    std::size_t input_dim() const override { return dim_; }

    LogitVector evaluate(std::span<const double> x) const override {
        check_input(x);
        std::vector<double> out(bias_);
        for (std::size_t q = 0; q < classes_; ++q) {
            const double* row = weights_.data() + q * dim_;
            out[q] += std::inner_product(row, row + dim_, x.begin(), 0.0);
        }
        return LogitVector(std::move(out));
    }

    std::span<const double> weights() const noexcept { return weights_; }
    std::span<const double> bias() const noexcept { return bias_; }

private:
    std::size_t classes_;
    std::size_t dim_;
    std::vector<double> weights_;
    std::vector<double> bias_;
};

/// Binary linear classifier: logits (0, w.x + b). Class 1 wins when
/// w.x + b > 0. Under N(0, sigma^2 I) input noise its class-1 probability is
/// known in closed form, which makes it the ground-truth oracle for the
/// certification procedures.
class LinearGaussianClassifier : public BaseClassifier {
public:
    LinearGaussianClassifier(std::vector<double> weight, double bias)
        : weight_(std::move(weight)), bias_(bias) {
        detail::require(!weight_.empty(), "linear classifier needs a non-empty weight vector");
        for (double v : weight_) detail::require(std::isfinite(v), "weights must be finite");
        detail::require(std::isfinite(bias_), "bias must be finite");
    }

    std::size_t class_count() const override { return 2; }
    std::size_t input_dim() const override { return weight_.size(); }

    LogitVector evaluate(std::span<const double> x) const override {
        check_input(x);
        return LogitVector{0.0, score(x)};
    }

    double score(std::span<const double> x) const {
        return std::inner_product(weight_.begin(), weight_.end(), x.begin(), bias_);
    }

    std::span<const double> weight() const noexcept { return weight_; }
    double bias() const noexcept { return bias_; }

private:
    std::vector<double> weight_;
    double bias_;
};

/// P_eps(F(x + eps) = 1) = Phi((w.x + b) / (sigma ||w||)).
inline double linear_true_success_prob(const LinearGaussianClassifier& clf,
                                       std::span<const double> x, double sigma) {
    const auto w = clf.weight();
    const double norm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
    if (norm == 0.0) throw ParameterError("degenerate linear classifier: zero weight vector");
    detail::require(sigma > 0.0, "noise sigma must be positive");
    detail::require(x.size() == w.size(), "input dimension mismatch");
    return gaussian_cdf(clf.score(x) / (sigma * norm));
}

/// Piecewise-constant classifier over a grid of cell size `step`: the cell
/// floor(x / step) is looked up, unknown cells map to `default_class`.
/// Outputs one-hot logits.
class TabularClassifier : public BaseClassifier {
public:
    using Cell = std::vector<std::int64_t>;

    TabularClassifier(std::size_t classes, std::size_t dim, double step, std::size_t default_class,
                      std::map<Cell, std::size_t> table = {})
        : classes_(classes),
          dim_(dim),
          step_(step),
          default_class_(default_class),
          table_(std::move(table)) {
        detail::require(classes_ >= 2, "a classifier needs at least two classes");
        detail::require(dim_ >= 1, "input dimension must be >= 1");
        detail::require(step_ > 0.0 && std::isfinite(step_), "cell step must be positive");
        detail::require(default_class_ < classes_, "default class out of range");
        for (const auto& [cell, cls] : table_) {
            detail::require(cell.size() == dim_, "table cell has wrong dimension");
            detail::require(cls < classes_, "table class out of range");
        }
    }

    /// Returns `cls` for every input.
    static TabularClassifier constant(std::size_t classes, std::size_t dim, std::size_t cls) {
        return TabularClassifier(classes, dim, 1.0, cls);
    }

    std::size_t class_count() const override { return classes_; }
    std::size_t input_dim() const override { return dim_; }

    LogitVector evaluate(std::span<const double> x) const override {
        check_input(x);
        std::vector<double> out(classes_, 0.0);
        out[lookup(x)] = 1.0;
        return LogitVector(std::move(out));
    }

    std::size_t lookup(std::span<const double> x) const {
        if (table_.empty()) return default_class_;
        Cell cell(dim_);
        for (std::size_t j = 0; j < dim_; ++j) {
            cell[j] = static_cast<std::int64_t>(std::floor(x[j] / step_));
        }
        const auto it = table_.find(cell);
        return it == table_.end() ? default_class_ : it->second;
    }

private:
    std::size_t classes_;
    std::size_t dim_;
    double step_;
    std::size_t default_class_;
    std::map<Cell, std::size_t> table_;
};

}  // namespace ensmooth
