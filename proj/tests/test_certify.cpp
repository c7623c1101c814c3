#include <catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "ensmooth/certify.hpp"
#include "ensmooth/ensemble.hpp"

using namespace ensmooth;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::vector<LabeledInput> linear_population(std::size_t count) {
    std::vector<LabeledInput> out;
    for (std::size_t i = 0; i < count; ++i) {
        const double x0 = -0.6 + 1.2 * static_cast<double>(i) / static_cast<double>(count - 1);
        out.push_back({"p" + std::to_string(i), {x0, 0.1}, x0 > 0 ? 1u : 0u});
    }
    return out;
}

class Exploding : public BaseClassifier {
public:
    std::size_t class_count() const override { return 2; }
    std::size_t input_dim() const override { return 1; }
    LogitVector evaluate(std::span<const double> x) const override {
        if (x[0] > 5.0) throw std::runtime_error("boom");
        return LogitVector{1.0, 0.0};
    }
};

}  // namespace

TEST_CASE("constant classifier reaches the largest provable radius") {
    const auto clf = TabularClassifier::constant(3, 2, 2);
    const NoiseSource noise(0, 0.25);
    const std::vector<double> x = {0.3, -0.1};
    const auto r = certify(clf, x, 100, 100000, 0.001, noise);
    REQUIRE(r.predicted_class == 2u);
    CHECK_THAT(r.p_lower, WithinAbs(0.99993092483300939297, 1e-12));
    CHECK_THAT(r.radius, WithinAbs(0.95286414084748797288, 1e-9));
    CHECK(r.samples_used == 100100);
    CHECK(r.models_evaluated == 100100);
    CHECK_FALSE(r.stage_returned.has_value());
}

TEST_CASE("certify abstains when no class dominates") {
    const LinearGaussianClassifier clf({1.0}, 0.0);
    const NoiseSource noise(5, 1.0);
    const auto r = certify(clf, std::vector<double>{0.0}, 100, 2000, 0.001, noise);
    CHECK(r.abstained());
    CHECK(r.radius == 0.0);
    CHECK(r.p_lower < 0.5);
}

TEST_CASE("certify matches a reference computation from raw counts") {
    const LinearGaussianClassifier clf({1.0, 1.0}, 0.0);
    const NoiseSource noise(31, 0.5);
    for (std::uint64_t id = 0; id < 20; ++id) {
        const std::vector<double> x = {0.02 * static_cast<double>(id), 0.1};
        const auto r = certify(clf, x, 50, 3000, 0.01, noise, id);
        const auto sel = sample_under_noise(clf, x, 50, noise, id, kSelectionStage);
        const auto est = sample_under_noise(clf, x, 3000, noise, id, 1);
        const std::size_t cand = sel.top();
        const double k = static_cast<double>(est.counts[cand]);
        const double p_lo = k == 0 ? 0.0 : boost::math::ibeta_inv(k, 3000.0 - k + 1.0, 0.01);
        CAPTURE(id);
        CHECK_THAT(r.p_lower, WithinRel(p_lo, 1e-10));
        if (p_lo > 0.5) {
            CHECK(r.predicted_class == cand);
            CHECK_THAT(r.radius, WithinRel(0.5 * gaussian_quantile(p_lo), 1e-9));
        } else {
            CHECK(r.abstained());
        }
    }
}

TEST_CASE("certify validates its arguments") {
    const LinearGaussianClassifier clf({1.0}, 0.0);
    const std::vector<double> x = {1.0};
    CHECK_THROWS_AS(certify(clf, x, 0, 10, 0.01, NoiseSource(0, 1.0)), ParameterError);
    CHECK_THROWS_AS(certify(clf, x, 10, 10, 0.0, NoiseSource(0, 1.0)), ParameterError);
    CHECK_THROWS_AS(certify(clf, x, 10, 10, 0.01, NoiseSource(0, 0.0)), ParameterError);
    CHECK_THROWS_AS(certify(clf, std::vector<double>{1.0, 2.0}, 10, 10, 0.01, NoiseSource(0, 1.0)),
                    ParameterError);
}

TEST_CASE("figure 3 thresholds are reproduced exactly") {
    AdaptiveSchedule s;
    s.stage_sizes = {1000, 10000, 125000};
    s.alpha = 0.001;
    s.beta = 0.0001;
    s.sigma = 0.25;
    s.target_radius = 0.25;
    const auto t = stage_thresholds(s);
    REQUIRE(t.size() == 3);
    CHECK(t[0].certify_count == 880u);
    CHECK(t[0].abort_count == 795u);
    CHECK(t[1].certify_count == 8538u);
    CHECK(t[1].abort_count == 8270u);
    CHECK(t[2].certify_count == 105607u);
    CHECK_FALSE(t[2].abort_count.has_value());
}

TEST_CASE("thresholds for a short schedule with an uncertifiable first stage") {
    AdaptiveSchedule s;
    s.stage_sizes = {10, 20};
    s.alpha = 0.1;
    s.beta = 0.05;
    s.sigma = 1.0;
    s.target_radius = 1.0;
    const auto t = stage_thresholds(s);
    CHECK_FALSE(t[0].certify_count.has_value());
    CHECK(t[0].abort_count == 6u);
    CHECK(t[1].certify_count == 20u);
    CHECK_FALSE(t[1].abort_count.has_value());
}

TEST_CASE("minimal final stage size") {
    CHECK(min_final_stage_size(100000, 0.001, 3) == 115905u);
    CHECK(min_final_stage_size(100000, 0.001, 4) == 120069u);
    CHECK(min_final_stage_size(100000, 0.001, 1) == 100000u);
    CHECK_THROWS_AS(min_final_stage_size(100000, 1.0, 3), ParameterError);
    // n_s samples at 1 - alpha/s reach the same best-case bound as n at 1 - alpha.
    const double base = std::pow(0.001, 1.0 / 100000.0);
    const double staged = std::pow(0.001 / 3.0, 1.0 / 115905.0);
    CHECK(staged >= base);
}

TEST_CASE("schedule validation") {
    AdaptiveSchedule s;
    s.stage_sizes = {100, 100};
    CHECK_THROWS_AS(s.validate(), ParameterError);
    s.stage_sizes = {};
    CHECK_THROWS_AS(s.validate(), ParameterError);
    s.stage_sizes = {100, 1000};
    s.beta = 0.0;
    CHECK_THROWS_AS(s.validate(), ParameterError);
    s.beta = 0.01;
    s.target_radius = 0.0;
    CHECK_THROWS_AS(s.validate(), ParameterError);
    s.target_radius = 0.25;
    CHECK_NOTHROW(s.validate());

    const auto clf = TabularClassifier::constant(2, 1, 0);
    CHECK_THROWS_AS(certify_adaptive(clf, std::vector<double>{0.0}, s, NoiseSource(0, 0.5)), ParameterError);
}

TEST_CASE("reaches_radius edge cases") {
    CHECK_FALSE(reaches_radius(0.0, 0.1, 1.0));
    CHECK(reaches_radius(1.0, 100.0, 1.0));
    CHECK(reaches_radius(gaussian_cdf(1.0) + 1e-12, 1.0, 1.0));
    CHECK_FALSE(reaches_radius(gaussian_cdf(1.0) - 1e-9, 1.0, 1.0));
}

TEST_CASE("adaptive decisions agree with the threshold table") {
    AdaptiveSchedule s;
    s.n0 = 50;
    s.stage_sizes = {100, 1000, 5000};
    s.alpha = 0.01;
    s.beta = 0.01;
    s.sigma = 0.5;
    s.target_radius = 0.4;
    const auto table = stage_thresholds(s);
    const LinearGaussianClassifier clf({1.0}, 0.0);
    const NoiseSource noise(123, 0.5);
    int certified = 0, aborted_early = 0;
    for (std::uint64_t id = 0; id < 60; ++id) {
        const std::vector<double> x = {-0.1 + 0.02 * static_cast<double>(id)};
        const auto r = certify_adaptive(clf, x, s, noise, id);
        const std::size_t cand = sample_under_noise(clf, x, s.n0, noise, id, kSelectionStage).top();
        std::size_t expected_stage = 0;
        bool expected_cert = false;
        std::uint64_t used = s.n0;
        for (std::size_t i = 0; i < table.size(); ++i) {
            const auto c = sample_under_noise(clf, x, s.stage_sizes[i], noise, id,
                                              static_cast<std::uint32_t>(i + 1)).counts[cand];
            used += s.stage_sizes[i];
            expected_stage = i + 1;
            if (table[i].certify_count && c >= *table[i].certify_count) {
                expected_cert = true;
                break;
            }
            if (table[i].abort_count && c < *table[i].abort_count) break;
        }
        CAPTURE(id);
        CHECK(r.stage_returned == expected_stage);
        CHECK(!r.abstained() == expected_cert);
        CHECK(r.samples_used == used);
        if (expected_cert) {
            CHECK(r.radius == s.target_radius);
            CHECK(r.predicted_class == cand);
            ++certified;
        } else if (expected_stage < table.size()) {
            ++aborted_early;
        }
    }
    CHECK(certified > 0);
    CHECK(aborted_early > 0);
}

TEST_CASE("easy inputs certify at the first stage") {
    AdaptiveSchedule s;
    s.stage_sizes = {100, 1000, 10000, 120000};
    const auto clf = TabularClassifier::constant(2, 1, 1);
    const auto r = certify_adaptive(clf, std::vector<double>{0.0}, s, NoiseSource(1, 0.25));
    CHECK(r.predicted_class == 1u);
    CHECK(r.stage_returned == 1u);
    CHECK(r.samples_used == 200);
}

TEST_CASE("batch certification is invariant to the worker count") {
    const LinearGaussianClassifier clf({1.0, 0.5}, 0.0);
    const auto population = linear_population(24);
    EngineConfig cfg;
    cfg.seed = 99;
    cfg.sigma = 0.5;
    cfg.procedure = FixedSampling{20, 2000, 0.01};
    cfg.workers = 1;
    const auto a = batch_certify(clf, population, cfg);
    cfg.workers = 4;
    const auto b = batch_certify(clf, population, cfg);
    REQUIRE(a.entries.size() == b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(a.entries[i].id == b.entries[i].id);
        CHECK(a.entries[i].result.predicted_class == b.entries[i].result.predicted_class);
        CHECK(a.entries[i].result.radius == b.entries[i].result.radius);
        CHECK(a.entries[i].result.p_lower == b.entries[i].result.p_lower);
    }
    CHECK(a.acr == b.acr);

    // Entry i equals a standalone run with sample id i.
    const NoiseSource noise(99, 0.5);
    const auto single = certify(clf, population[7].x, 20, 2000, 0.01, noise, 7);
    CHECK(single.p_lower == a.entries[7].result.p_lower);
}

TEST_CASE("batch summary metrics") {
    const LinearGaussianClassifier clf({1.0}, 0.0);
    std::vector<LabeledInput> population = {
        {"far", {2.0}, 1}, {"wrong", {2.0}, 0}, {"edge", {0.0}, 1}, {"neg", {-2.0}, 0}};
    AdaptiveSchedule s;
    s.n0 = 100;
    s.stage_sizes = {100, 1000, 10000};
    s.sigma = 0.5;
    s.target_radius = 0.25;
    EngineConfig cfg;
    cfg.seed = 4;
    cfg.sigma = 0.5;
    cfg.procedure = s;
    cfg.radii = {0.0, 0.25, 0.5};
    const auto report = batch_certify(clf, population, cfg);
    // "wrong" is certified for class 1 but labelled 0: it counts as radius 0.
    CHECK(report.entries[1].result.predicted_class == 1u);
    CHECK_FALSE(report.entries[1].correct());
    CHECK_THAT(report.acr, WithinAbs(2 * 0.25 / 4.0, 1e-15));
    CHECK_THAT(report.certified_accuracy_at(0.25), WithinAbs(0.5, 1e-15));
    CHECK(report.certified_accuracy.size() == 3);
    CHECK(report.certified_accuracy[2].second == 0.0);
    double asr_total = 0.0;
    for (double a : report.asr) asr_total += a;
    CHECK_THAT(asr_total, WithinAbs(1.0, 1e-15));
    CHECK(report.baseline_samples == 100100);
    double mean = 0.0;
    for (const auto& e : report.entries) mean += static_cast<double>(e.result.samples_used) / 4.0;
    CHECK_THAT(report.sample_rf, WithinRel(100100.0 / mean, 1e-14));
    CHECK(report.kcr == 0.0);
    CHECK(report.model_count == 1);
}

TEST_CASE("k-consensus statistics flow into the report") {
    const auto base = std::make_shared<AffineClassifier>(2, 1, std::vector<double>{1.0, -1.0},
                                                         std::vector<double>{0.0, 0.0});
    EnsembleConfig ec;
    ec.members = {base, base, base, base};
    ec.consensus_k = 2;
    const EnsembleClassifier ens(ec);
    EngineConfig cfg;
    cfg.seed = 1;
    cfg.procedure = FixedSampling{10, 500, 0.01};
    std::vector<LabeledInput> population = {{"a", {1.0}, 0}, {"b", {-1.0}, 1}};
    const auto report = batch_certify(ens, population, cfg);
    CHECK(report.kcr == 1.0);
    CHECK(report.model_count == 4);
    CHECK(report.entries[0].result.models_evaluated == 2 * 510);
    CHECK_THAT(report.time_rf, WithinRel(2.0 * report.sample_rf, 1e-14));
}

TEST_CASE("batch errors propagate from worker threads") {
    const Exploding clf;
    std::vector<LabeledInput> population;
    for (int i = 0; i < 8; ++i) population.push_back({"i" + std::to_string(i), {i == 5 ? 100.0 : 0.0}, 0});
    EngineConfig cfg;
    cfg.procedure = FixedSampling{5, 20, 0.1};
    cfg.sigma = 0.01;
    cfg.workers = 3;
    CHECK_THROWS_WITH(batch_certify(clf, population, cfg), "boom");
    population[5].label = 7;
    CHECK_THROWS_AS(batch_certify(clf, population, cfg), ParameterError);
    CHECK_THROWS_AS(batch_certify(clf, std::vector<LabeledInput>{}, cfg), ParameterError);
}
