#pragma once

// Monte Carlo certification of the Gaussian-smoothed classifier
//   G(x) = argmax_c P_eps(F(x + eps) = c),  eps ~ N(0, sigma^2 I).
//
// Stream layout: draws for input `sample_id` are keyed by stage. Stage 0 is
// the class-selection sample (n0 draws); stages 1..s are the estimation
// samples. Different stages never share a counter, so every stage sees fresh
// noise.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "ensmooth/bounds.hpp"
#include "ensmooth/classifier.hpp"
#include "ensmooth/errors.hpp"

namespace ensmooth {

inline constexpr std::uint32_t kSelectionStage = 0;

/// Tally of F's predictions over n noisy evaluations.
struct SamplingCounts {
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;
    std::uint64_t model_evaluations = 0;  // underlying models touched
    std::uint64_t consensus_hits = 0;     // calls resolved by K-consensus

    /// Most frequent class, lowest index on ties.
    std::size_t top() const {
        return static_cast<std::size_t>(
            std::distance(counts.begin(), std::max_element(counts.begin(), counts.end())));
    }
};

inline SamplingCounts sample_under_noise(const BaseClassifier& clf, std::span<const double> x,
                                         std::uint64_t n, const NoiseSource& noise,
                                         std::uint64_t sample_id, std::uint32_t stage_id) {
    detail::require(n >= 1, "sample_under_noise: n must be >= 1");
    detail::require(x.size() == clf.input_dim(), "input dimension does not match the classifier");
    SamplingCounts out;
    out.counts.assign(clf.class_count(), 0);
    out.total = n;
    std::vector<double> eps(x.size());
    std::vector<double> noisy(x.size());
    for (std::uint64_t i = 0; i < n; ++i) {
        fill_perturbation(noise, sample_id, stage_id, i, eps);
        for (std::size_t j = 0; j < x.size(); ++j) noisy[j] = x[j] + eps[j];
        const Evaluation ev = clf.evaluate_counted(noisy);
        ++out.counts[ev.logits.argmax()];
        out.model_evaluations += ev.models_evaluated;
        if (ev.consensus_hit) ++out.consensus_hits;
    }
    return out;
}

struct CertificationResult {
    std::optional<std::size_t> predicted_class;  // nullopt = abstain
    double radius = 0.0;
    double p_lower = 0.0;
    std::uint64_t samples_used = 0;
    std::uint64_t models_evaluated = 0;
    std::uint64_t consensus_hits = 0;
    std::optional<std::size_t> stage_returned;  // adaptive only, 1-based

    bool abstained() const noexcept { return !predicted_class.has_value(); }
};

namespace detail {

inline void add_usage(CertificationResult& r, const SamplingCounts& c) {
    r.samples_used += c.total;
    r.models_evaluated += c.model_evaluations;
    r.consensus_hits += c.consensus_hits;
}

}  // namespace detail

/// Standard Monte Carlo certification: pick the class from n0 selection
/// draws, bound its probability from n fresh draws at confidence 1 - alpha,
/// and return radius sigma * Phi^-1(p_lower) when p_lower > 1/2.
inline CertificationResult certify(const BaseClassifier& clf, std::span<const double> x,
                                   std::uint64_t n0, std::uint64_t n, double alpha,
                                   const NoiseSource& noise, std::uint64_t sample_id = 0) {
    detail::require(n0 >= 1 && n >= 1, "certify: n0 and n must be >= 1");
    detail::require(noise.sigma > 0.0, "certify: noise sigma must be positive");
    const auto conf = ConfidenceLevel::from_significance(alpha);

    CertificationResult result;
    const auto selection = sample_under_noise(clf, x, n0, noise, sample_id, kSelectionStage);
    detail::add_usage(result, selection);
    const std::size_t candidate = selection.top();

    const auto estimation = sample_under_noise(clf, x, n, noise, sample_id, 1);
    detail::add_usage(result, estimation);
    result.p_lower = lower_conf_bound(BinomialObservation(estimation.counts[candidate], n), conf);
    if (result.p_lower > 0.5) {
        result.predicted_class = candidate;
        result.radius = certified_radius(result.p_lower, noise.sigma);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Adaptive sampling
// ---------------------------------------------------------------------------

struct AdaptiveSchedule {
    std::uint64_t n0 = 100;
    std::vector<std::uint64_t> stage_sizes;
    double alpha = 0.001;
    double beta = 0.001;
    double target_radius = 0.25;
    double sigma = 0.25;

    std::size_t stages() const noexcept { return stage_sizes.size(); }

    void validate() const {
        detail::require(n0 >= 1, "schedule: n0 must be >= 1");
        detail::require(!stage_sizes.empty(), "schedule: at least one stage required");
        detail::require(stage_sizes.front() >= 1, "schedule: stage sizes must be >= 1");
        for (std::size_t i = 1; i < stage_sizes.size(); ++i) {
            detail::require(stage_sizes[i] > stage_sizes[i - 1],
                            "schedule: stage sizes must be strictly increasing");
        }
        detail::require(alpha > 0.0 && alpha < 1.0, "schedule: alpha must lie in (0,1)");
        detail::require(beta > 0.0 && beta < 1.0, "schedule: beta must lie in (0,1)");
        detail::require(target_radius > 0.0 && std::isfinite(target_radius),
                        "schedule: target radius must be positive");
        detail::require(sigma > 0.0 && std::isfinite(sigma), "schedule: sigma must be positive");
    }

    /// Per-stage certification confidence 1 - alpha/s.
    ConfidenceLevel certify_confidence() const {
        return ConfidenceLevel::from_significance(alpha / static_cast<double>(stages()));
    }

    /// Per-stage abort confidence 1 - beta/(s-1); only meaningful for s >= 2.
    ConfidenceLevel abort_confidence() const {
        return ConfidenceLevel::from_significance(beta / static_cast<double>(stages() - 1));
    }
};

/// sigma * Phi^-1(p) >= r, with p = 0 never and p = 1 always reaching it.
inline bool reaches_radius(double p, double target_radius, double sigma) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return sigma * gaussian_quantile(p) >= target_radius;
}

inline CertificationResult certify_adaptive(const BaseClassifier& clf, std::span<const double> x,
                                            const AdaptiveSchedule& schedule,
                                            const NoiseSource& noise, std::uint64_t sample_id = 0) {
    schedule.validate();
    detail::require(noise.sigma == schedule.sigma,
                    "certify_adaptive: noise sigma differs from the schedule's sigma");
    const std::size_t s = schedule.stages();
    const auto certify_conf = schedule.certify_confidence();

    CertificationResult result;
    const auto selection = sample_under_noise(clf, x, schedule.n0, noise, sample_id, kSelectionStage);
    detail::add_usage(result, selection);
    const std::size_t candidate = selection.top();

    for (std::size_t i = 1; i <= s; ++i) {
        const std::uint64_t n_i = schedule.stage_sizes[i - 1];
        const auto counts =
            sample_under_noise(clf, x, n_i, noise, sample_id, static_cast<std::uint32_t>(i));
        detail::add_usage(result, counts);
        const BinomialObservation obs(counts.counts[candidate], n_i);
        result.p_lower = lower_conf_bound(obs, certify_conf);
        result.stage_returned = i;
        if (reaches_radius(result.p_lower, schedule.target_radius, schedule.sigma)) {
            result.predicted_class = candidate;
            result.radius = schedule.target_radius;
            return result;
        }
        // At stage s an abort and the fall-through both abstain.
        if (i < s) {
            const double p_upper = upper_conf_bound(obs, schedule.abort_confidence());
            if (!reaches_radius(p_upper, schedule.target_radius, schedule.sigma)) return result;
        }
    }
    return result;
}

/// Integer decision thresholds of the adaptive procedure at one stage:
/// certify when counts >= certify_count, abort when counts < abort_count.
struct StageThreshold {
    std::uint64_t stage_size = 0;
    std::optional<std::uint64_t> certify_count;  // nullopt: never certifiable
    std::optional<std::uint64_t> abort_count;    // nullopt: no abort test (last stage)
};

inline std::vector<StageThreshold> stage_thresholds(const AdaptiveSchedule& schedule) {
    schedule.validate();
    const std::size_t s = schedule.stages();
    const auto certify_conf = schedule.certify_confidence();
    std::vector<StageThreshold> out;
    out.reserve(s);
    for (std::size_t i = 0; i < s; ++i) {
        const std::uint64_t n = schedule.stage_sizes[i];
        StageThreshold t;
        t.stage_size = n;
        t.certify_count = detail::first_count(n, [&](std::uint64_t c) {
            return reaches_radius(lower_conf_bound(BinomialObservation(c, n), certify_conf),
                                  schedule.target_radius, schedule.sigma);
        });
        if (i + 1 < s) {
            const auto abort_conf = schedule.abort_confidence();
            t.abort_count = detail::first_count(n, [&](std::uint64_t c) {
                return reaches_radius(upper_conf_bound(BinomialObservation(c, n), abort_conf),
                                      schedule.target_radius, schedule.sigma);
            });
        }
        out.push_back(t);
    }
    return out;
}

/// Smallest final-stage size whose best-case certifiable radius at
/// confidence 1 - alpha/s matches that of n samples at 1 - alpha:
/// ceil(n (1 - log_alpha(s))).
inline std::uint64_t min_final_stage_size(std::uint64_t n, double alpha, std::uint64_t s) {
    detail::require(n >= 1, "n must be >= 1");
    detail::require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
    detail::require(s >= 1, "s must be >= 1");
    const double factor = 1.0 - std::log(static_cast<double>(s)) / std::log(alpha);
    return static_cast<std::uint64_t>(std::ceil(static_cast<double>(n) * factor));
}

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

struct LabeledInput {
    std::string id;
    std::vector<double> x;
    std::size_t label = 0;
};

struct FixedSampling {
    std::uint64_t n0 = 100;
    std::uint64_t n = 100000;
    double alpha = 0.001;
};

struct EngineConfig {
    std::variant<FixedSampling, AdaptiveSchedule> procedure = FixedSampling{};
    std::uint64_t seed = 0;
    double sigma = 0.25;
    std::size_t workers = 1;
    /// Samples per input of the reference procedure for SampleRF; defaults to
    /// 100'000 + n0.
    std::optional<std::uint64_t> baseline_samples;
    /// Radii at which certified accuracy is reported.
    std::vector<double> radii = {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};

    bool adaptive() const noexcept { return std::holds_alternative<AdaptiveSchedule>(procedure); }

    std::uint64_t n0() const {
        return adaptive() ? std::get<AdaptiveSchedule>(procedure).n0
                          : std::get<FixedSampling>(procedure).n0;
    }

    std::uint64_t resolved_baseline() const { return baseline_samples.value_or(100000 + n0()); }
};

struct BatchEntry {
    std::string id;
    std::size_t true_class = 0;
    CertificationResult result;

    bool correct() const noexcept { return result.predicted_class == true_class; }
};

struct BatchReport {
    std::vector<BatchEntry> entries;
    double acr = 0.0;
    std::vector<std::pair<double, double>> certified_accuracy;  // (radius, fraction)
    double sample_rf = 0.0;
    double time_rf = 0.0;  // model-evaluation proxy, not wall-clock
    double kcr = 0.0;
    std::vector<double> asr;  // ASR_j, j = 1..stages
    std::uint64_t baseline_samples = 0;
    std::size_t model_count = 1;
    double wall_clock_seconds = 0.0;

    /// Fraction of inputs with the correct class and radius >= r.
    double certified_accuracy_at(double r) const {
        if (entries.empty()) return 0.0;
        std::size_t hits = 0;
        for (const auto& e : entries) {
            if (e.correct() && e.result.radius >= r) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(entries.size());
    }
};

/// Fills the summary metrics of a report from its entries.
inline void summarize(BatchReport& report, const EngineConfig& cfg, std::size_t stages) {
    const auto& entries = report.entries;
    const auto count = static_cast<double>(entries.size());
    double radius_sum = 0.0;
    double samples = 0.0;
    double models = 0.0;
    double hits = 0.0;
    report.asr.assign(stages, 0.0);
    for (const auto& e : entries) {
        if (e.correct()) radius_sum += e.result.radius;
        samples += static_cast<double>(e.result.samples_used);
        models += static_cast<double>(e.result.models_evaluated);
        hits += static_cast<double>(e.result.consensus_hits);
        const std::size_t stage = e.result.stage_returned.value_or(1);
        report.asr[stage - 1] += 1.0;
    }
    for (double& a : report.asr) a /= count;
    report.acr = radius_sum / count;
    report.baseline_samples = cfg.resolved_baseline();
    const double mean_samples = samples / count;
    const double mean_models = models / count;
    report.sample_rf = static_cast<double>(report.baseline_samples) / mean_samples;
    report.time_rf = static_cast<double>(report.baseline_samples) *
                     static_cast<double>(report.model_count) / mean_models;
    report.kcr = samples > 0.0 ? hits / samples : 0.0;
    report.certified_accuracy.clear();
    for (double r : cfg.radii) report.certified_accuracy.emplace_back(r, report.certified_accuracy_at(r));
}

/// Certifies every input of the population. Input i uses sample_id i, so the
/// report does not depend on the number of workers.
inline BatchReport batch_certify(const BaseClassifier& clf, std::span<const LabeledInput> population,
                                 const EngineConfig& cfg) {
    detail::require(!population.empty(), "batch_certify: empty population");
    detail::require(cfg.sigma > 0.0, "batch_certify: sigma must be positive");
    std::size_t stages = 1;
    if (cfg.adaptive()) {
        const auto& schedule = std::get<AdaptiveSchedule>(cfg.procedure);
        schedule.validate();
        stages = schedule.stages();
    } else {
        const auto& fixed = std::get<FixedSampling>(cfg.procedure);
        detail::require(fixed.n0 >= 1 && fixed.n >= 1, "batch_certify: n0 and n must be >= 1");
        detail::require(fixed.alpha > 0.0 && fixed.alpha < 1.0, "batch_certify: alpha must lie in (0,1)");
    }
    for (const auto& item : population) {
        detail::require(item.x.size() == clf.input_dim(), "input '" + item.id + "' has the wrong dimension");
        detail::require(item.label < clf.class_count(), "input '" + item.id + "' has an invalid label");
    }

    const NoiseSource noise(cfg.seed, cfg.sigma);
    BatchReport report;
    report.model_count = clf.model_count();
    report.entries.resize(population.size());

    const auto start = std::chrono::steady_clock::now();
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i = next.fetch_add(1); i < population.size(); i = next.fetch_add(1)) {
            try {
                const auto& item = population[i];
                BatchEntry entry{item.id, item.label, {}};
                if (cfg.adaptive()) {
                    entry.result = certify_adaptive(clf, item.x, std::get<AdaptiveSchedule>(cfg.procedure),
                                                    noise, i);
                } else {
                    const auto& fixed = std::get<FixedSampling>(cfg.procedure);
                    entry.result = certify(clf, item.x, fixed.n0, fixed.n, fixed.alpha, noise, i);
                }
                report.entries[i] = std::move(entry);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(population.size());
            }
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.workers, population.size()));
    if (workers == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    }
    if (failure) std::rethrow_exception(failure);
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    summarize(report, cfg, stages);
    return report;
}

}  // namespace ensmooth
