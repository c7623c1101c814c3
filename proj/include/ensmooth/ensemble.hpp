#pragma once

// Ensemble aggregation: f_bar(x) = sum_l w_l * gamma(f_l(x)) for the voting
// schemes soft / hard / softmax_soft / weighted_soft, plus K-consensus early
// exit (members are queried in their given order; when the first K agree on
// the argmax, the soft vote of those K is returned).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ensmooth/classifier.hpp"
#include "ensmooth/errors.hpp"

namespace ensmooth {

enum class AggregationMode { soft, hard, softmax_soft, weighted_soft };

inline std::string_view to_string(AggregationMode mode) {
    switch (mode) {
        case AggregationMode::soft: return "soft";
        case AggregationMode::hard: return "hard";
        case AggregationMode::softmax_soft: return "softmax_soft";
        case AggregationMode::weighted_soft: return "weighted_soft";
    }
    return "soft";
}

inline AggregationMode parse_aggregation_mode(std::string_view name) {
    if (name == "soft") return AggregationMode::soft;
    if (name == "hard") return AggregationMode::hard;
    if (name == "softmax_soft" || name == "softmax") return AggregationMode::softmax_soft;
    if (name == "weighted_soft" || name == "weighted") return AggregationMode::weighted_soft;
    throw ParameterError("unknown aggregation mode '" + std::string(name) + "'");
}

/// Members are expected in ranked order (best holdout accuracy first); the
/// order matters for K-consensus only.
struct EnsembleConfig {
    std::vector<ClassifierPtr> members;
    AggregationMode mode = AggregationMode::soft;
    std::vector<double> weights;  // weighted_soft only; empty means uniform
    std::optional<std::size_t> consensus_k;

    void validate() const {
        detail::require(!members.empty(), "ensemble needs at least one member");
        for (const auto& m : members) detail::require(m != nullptr, "null ensemble member");
        const auto classes = members.front()->class_count();
        const auto dim = members.front()->input_dim();
        for (const auto& m : members) {
            detail::require(m->class_count() == classes, "ensemble members disagree on class count");
            detail::require(m->input_dim() == dim, "ensemble members disagree on input dimension");
        }
        if (!weights.empty()) {
            detail::require(weights.size() == members.size(), "one weight per member required");
            double total = 0.0;
            for (double w : weights) {
                detail::require(w >= 0.0 && std::isfinite(w), "weights must be nonnegative");
                total += w;
            }
            detail::require(std::abs(total - 1.0) <= 1e-9, "weights must sum to 1");
        }
        if (consensus_k) {
            detail::require(*consensus_k >= 1 && *consensus_k <= members.size(),
                            "consensus K must lie in [1, k]");
        }
    }

    double weight(std::size_t l) const {
        return weights.empty() ? 1.0 / static_cast<double>(members.size()) : weights[l];
    }
};

using AggregationOutcome = Evaluation;

namespace detail {

inline std::vector<double> softmax(std::span<const double> logits) {
    const double peak = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - peak);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

// Adds scale * gamma(member_logits) to acc.
inline void accumulate(std::vector<double>& acc, const LogitVector& member, AggregationMode mode,
                       double scale) {
    switch (mode) {
        case AggregationMode::soft:
        case AggregationMode::weighted_soft:
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += scale * member[i];
            break;
        case AggregationMode::hard:
            acc[member.argmax()] += scale;
            break;
        case AggregationMode::softmax_soft: {
            const auto p = softmax(member.values());
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += scale * p[i];
            break;
        }
    }
}

}  // namespace detail

/// Aggregates the member outputs at x. Members are always summed in index
/// order so the result is bit-stable.
inline AggregationOutcome aggregate(const EnsembleConfig& cfg, std::span<const double> x) {
    const std::size_t k = cfg.members.size();
    detail::require(k >= 1, "ensemble needs at least one member");
    const std::size_t classes = cfg.members.front()->class_count();

    std::vector<LogitVector> outputs;
    outputs.reserve(k);

    if (cfg.consensus_k && *cfg.consensus_k < k) {
        const std::size_t K = *cfg.consensus_k;
        for (std::size_t l = 0; l < K; ++l) outputs.push_back(cfg.members[l]->evaluate(x));
        const std::size_t first = outputs.front().argmax();
        const bool agree = std::all_of(outputs.begin(), outputs.end(),
                                       [&](const LogitVector& o) { return o.argmax() == first; });
        if (agree) {
            std::vector<double> acc(classes, 0.0);
            const double scale = 1.0 / static_cast<double>(K);
            for (const auto& o : outputs) detail::accumulate(acc, o, AggregationMode::soft, scale);
            return AggregationOutcome{LogitVector(std::move(acc)), K, true};
        }
    }

    for (std::size_t l = outputs.size(); l < k; ++l) outputs.push_back(cfg.members[l]->evaluate(x));
    std::vector<double> acc(classes, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
        const double scale = cfg.mode == AggregationMode::weighted_soft
                                 ? cfg.weight(l)
                                 : 1.0 / static_cast<double>(k);
        detail::accumulate(acc, outputs[l], cfg.mode, scale);
    }
    return AggregationOutcome{LogitVector(std::move(acc)), k, false};
}

/// An ensemble usable anywhere a base classifier is expected.
class EnsembleClassifier : public BaseClassifier {
public:
    explicit EnsembleClassifier(EnsembleConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    std::size_t class_count() const override { return cfg_.members.front()->class_count(); }
    std::size_t input_dim() const override { return cfg_.members.front()->input_dim(); }
    std::size_t model_count() const override { return cfg_.members.size(); }

    LogitVector evaluate(std::span<const double> x) const override {
        return evaluate_counted(x).logits;
    }

    Evaluation evaluate_counted(std::span<const double> x) const override {
        check_input(x);
        return aggregate(cfg_, x);
    }

    const EnsembleConfig& config() const noexcept { return cfg_; }

private:
    EnsembleConfig cfg_;
};

}  // namespace ensmooth
