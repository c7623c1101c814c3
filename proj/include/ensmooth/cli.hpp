#pragma once

// Command-line front end. Subcommands: certify, adaptive, theory, thresholds.
// Settings come from flags and from an optional JSON file (--config); a flag
// that is given wins over the file. Exit codes: 0 success, 2 usage or
// configuration error, 3 numerical failure.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ensmooth/certify.hpp"
#include "ensmooth/ensemble.hpp"
#include "ensmooth/errors.hpp"
#include "ensmooth/io.hpp"
#include "ensmooth/theory.hpp"

namespace ensmooth::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

/// Thrown for missing or inconsistent settings.
class UsageError : public ParameterError {
public:
    using ParameterError::ParameterError;
};

namespace detail {

using nlohmann::json;

inline std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// Merges one flag with the config file entry of the same name.
class Settings {
public:
    Settings() = default;
    Settings(json file, std::filesystem::path base) : file_(std::move(file)), base_(std::move(base)) {}

    template <typename T>
    std::optional<T> get(const CLI::Option* flag, const T& flag_value, const char* key) const {
        if (flag->count() > 0) return flag_value;
        if (!file_.contains(key) || file_.at(key).is_null()) return std::nullopt;
        try {
            return file_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw UsageError(std::string("config entry '") + key + "': " + e.what());
        }
    }

    template <typename T>
    T get_or(const CLI::Option* flag, const T& flag_value, const char* key, T fallback) const {
        return get(flag, flag_value, key).value_or(std::move(fallback));
    }

    template <typename T>
    T require(const CLI::Option* flag, const T& flag_value, const char* key) const {
        auto v = get(flag, flag_value, key);
        if (!v) throw UsageError(std::string("missing required setting --") + flag_name(key));
        return *v;
    }

    // File paths from the config file are relative to the file itself.
    std::optional<std::filesystem::path> path(const CLI::Option* flag, const std::string& flag_value,
                                              const char* key) const {
        if (flag->count() > 0) return std::filesystem::path(flag_value);
        const auto v = get(flag, flag_value, key);
        if (!v) return std::nullopt;
        const std::filesystem::path p(*v);
        return p.is_absolute() ? p : base_ / p;
    }

    std::filesystem::path require_path(const CLI::Option* flag, const std::string& flag_value,
                                       const char* key) const {
        auto p = path(flag, flag_value, key);
        if (!p) throw UsageError(std::string("missing required setting --") + flag_name(key));
        return *p;
    }

private:
    static std::string flag_name(std::string key) {
        for (char& ch : key) {
            if (ch == '_') ch = '-';
        }
        return key;
    }

    json file_ = json::object();
    std::filesystem::path base_;
};

inline Settings load_settings(const std::string& config_path) {
    if (config_path.empty()) return {};
    json file;
    try {
        file = json::parse(io::detail::read_file(config_path));
    } catch (const json::parse_error& e) {
        throw UsageError("config '" + config_path + "' is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw UsageError("config '" + config_path + "' must hold a JSON object");
    return Settings(std::move(file), std::filesystem::path(config_path).parent_path());
}

// Raw flag storage for one subcommand; `Settings` decides what is used.
struct Flags {
    std::string config, classifier, population, mode, out_json, out_csv, model, logits, out_model;
    std::uint64_t seed = 0, n0 = 0, n = 0, baseline_samples = 0, n_mc = 0, baseline_n = 0;
    std::size_t workers = 1, consensus_k = 0;
    double sigma = 0, alpha = 0, beta = 0, radius = 0;
    int k_max = 0;
    std::vector<std::uint64_t> stages;
    std::vector<double> radii;
    std::map<std::string, CLI::Option*> opt;
};

inline CLI::Option* add(Flags& f, CLI::App* cmd, const std::string& name, auto& target, const std::string& help) {
    auto* o = cmd->add_option("--" + name, target, help);
    std::string key = name;
    for (char& ch : key) {
        if (ch == '-') ch = '_';
    }
    f.opt[key] = o;
    return o;
}

inline const std::vector<std::uint64_t>& default_stages() {
    static const std::vector<std::uint64_t> stages = {100, 1000, 10000, 120000};
    return stages;
}

struct Run {
    const Flags& f;
    Settings s;
    std::ostream& out;

    CLI::Option* o(const char* key) const { return f.opt.at(key); }

    std::size_t workers() const {
        const auto w = s.get_or(o("workers"), f.workers, "workers", std::size_t{1});
        if (w == 0) return std::max(1u, std::thread::hardware_concurrency());
        return w;
    }

    ClassifierPtr classifier() const {
        const auto path = s.require_path(o("classifier"), f.classifier, "classifier");
        if (!std::filesystem::exists(path)) throw UsageError("classifier file '" + path.string() + "' not found");
        auto clf = io::load_classifier(path);
        const auto mode = s.get(o("mode"), f.mode, "mode");
        const auto k = s.get(o("consensus_k"), f.consensus_k, "consensus_k");
        if (!mode && !k) return clf;
        const auto* ensemble = dynamic_cast<const EnsembleClassifier*>(clf.get());
        if (ensemble == nullptr) throw UsageError("--mode and --consensus-k need an ensemble classifier");
        EnsembleConfig cfg = ensemble->config();
        if (mode) cfg.mode = parse_aggregation_mode(*mode);
        if (k) cfg.consensus_k = *k;
        return std::make_shared<EnsembleClassifier>(std::move(cfg));
    }

    void write_reports(const BatchReport& report, const EngineConfig& cfg, json resolved) const {
        if (const auto p = s.path(o("out_csv"), f.out_csv, "out_csv")) {
            io::detail::write_file(*p, io::report_csv(report, cfg.seed));
        }
        if (const auto p = s.path(o("out_json"), f.out_json, "out_json")) {
            io::detail::write_file(*p, io::report_json(report, resolved).dump(2) + "\n");
        }
    }

    void print_summary(const BatchReport& report, bool adaptive) const {
        std::size_t abstain = 0;
        for (const auto& e : report.entries) abstain += e.result.abstained() ? 1 : 0;
        out << "inputs      " << report.entries.size() << "\n";
        out << "abstained   " << abstain << "\n";
        out << "ACR         " << fixed(report.acr) << "\n";
        if (adaptive) {
            out << "SampleRF    " << fixed(report.sample_rf, 2) << "\n";
            for (std::size_t j = 0; j < report.asr.size(); ++j) {
                out << "ASR_" << j + 1 << "       " << fixed(report.asr[j], 3) << "\n";
            }
        }
        if (report.model_count > 1) {
            out << "TimeRF      " << fixed(report.time_rf, 2) << " (model evaluations)\n";
            out << "KCR         " << fixed(report.kcr, 3) << "\n";
        }
        out << "\nradius  certified_accuracy\n";
        for (const auto& [r, acc] : report.certified_accuracy) out << fixed(r, 2) << "    " << fixed(acc, 3) << "\n";
    }

    void print_thresholds(const std::vector<StageThreshold>& table) const {
        out << "stage  n_j       certify_if_count>=  abort_if_count<\n";
        for (std::size_t i = 0; i < table.size(); ++i) {
            const auto& t = table[i];
            char line[128];
            std::snprintf(line, sizeof line, "%-6zu %-9llu %-19s %s\n", i + 1,
                          static_cast<unsigned long long>(t.stage_size),
                          t.certify_count ? std::to_string(*t.certify_count).c_str() : "never",
                          t.abort_count ? std::to_string(*t.abort_count).c_str() : "-");
            out << line;
        }
    }

    AdaptiveSchedule schedule() const {
        AdaptiveSchedule sch;
        sch.n0 = s.get_or(o("n0"), f.n0, "n0", std::uint64_t{100});
        sch.stage_sizes = s.get_or(o("stages"), f.stages, "stages", default_stages());
        sch.alpha = s.get_or(o("alpha"), f.alpha, "alpha", 0.001);
        sch.beta = s.get_or(o("beta"), f.beta, "beta", 0.001);
        sch.sigma = s.get_or(o("sigma"), f.sigma, "sigma", 0.25);
        sch.target_radius = s.get_or(o("radius"), f.radius, "radius", sch.sigma);
        sch.validate();
        return sch;
    }

    int batch(bool adaptive) const {
        EngineConfig cfg;
        cfg.seed = s.require(o("seed"), f.seed, "seed");
        cfg.sigma = s.get_or(o("sigma"), f.sigma, "sigma", 0.25);
        cfg.workers = workers();
        if (const auto b = s.get(o("baseline_samples"), f.baseline_samples, "baseline_samples")) {
            cfg.baseline_samples = *b;
        }
        cfg.radii = s.get_or(o("radii"), f.radii, "radii", cfg.radii);
        if (adaptive) {
            cfg.procedure = schedule();
        } else {
            FixedSampling fs;
            fs.n0 = s.get_or(o("n0"), f.n0, "n0", fs.n0);
            fs.n = s.get_or(o("n"), f.n, "n", fs.n);
            fs.alpha = s.get_or(o("alpha"), f.alpha, "alpha", fs.alpha);
            cfg.procedure = fs;
        }
        const auto clf = classifier();
        const auto population_path = s.require_path(o("population"), f.population, "population");
        const auto population = io::load_population(population_path);

        json resolved = io::engine_config_json(cfg);
        resolved["classifier"] = s.require_path(o("classifier"), f.classifier, "classifier").string();
        resolved["population"] = population_path.string();
        if (const auto* e = dynamic_cast<const EnsembleClassifier*>(clf.get())) {
            resolved["mode"] = std::string(to_string(e->config().mode));
            resolved["consensus_k"] = e->config().consensus_k ? json(*e->config().consensus_k) : json(nullptr);
        }

        if (adaptive) print_thresholds(stage_thresholds(std::get<AdaptiveSchedule>(cfg.procedure)));
        const auto report = batch_certify(*clf, population, cfg);
        write_reports(report, cfg, resolved);
        if (adaptive) out << "\n";
        print_summary(report, adaptive);
        return kExitOk;
    }

    int thresholds() const {
        const auto sch = schedule();
        const auto table = stage_thresholds(sch);
        print_thresholds(table);
        if (const auto n = s.get(o("baseline_n"), f.baseline_n, "baseline_n")) {
            out << "\nminimal final stage for " << sch.stages() << " stages vs n=" << *n << ": "
                << min_final_stage_size(*n, sch.alpha, sch.stages()) << "\n";
        }
        if (const auto p = s.path(o("out_csv"), f.out_csv, "out_csv")) {
            io::detail::write_file(*p, io::thresholds_csv(table));
        }
        return kExitOk;
    }

    int theory() const {
        const auto model_path = s.path(o("model"), f.model, "model");
        const auto logits_path = s.path(o("logits"), f.logits, "logits");
        if (model_path.has_value() == logits_path.has_value()) {
            throw UsageError("give exactly one of --model and --logits");
        }
        theory::GaussianLogitModel model;
        if (model_path) {
            if (!std::filesystem::exists(*model_path)) throw UsageError("model file '" + model_path->string() + "' not found");
            model = io::load_model(*model_path);
        } else {
            const auto est = theory::estimate_model(io::parse_logit_dump(io::detail::read_file(*logits_path)));
            model = est.model;
            out << "# estimated zeta_c " << fixed(model.zeta_c) << (est.zeta_c_identified ? "" : " (unidentified)")
                << ", zeta_p " << fixed(model.zeta_p) << (est.zeta_p_identified ? "" : " (unidentified)") << "\n";
            if (const auto p = s.path(o("out_model"), f.out_model, "out_model")) {
                io::detail::write_file(*p, io::model_csv(model));
            }
        }
        theory::SweepSettings sweep;
        sweep.seed = s.require(o("seed"), f.seed, "seed");
        sweep.k_max = s.get_or(o("k_max"), f.k_max, "k_max", sweep.k_max);
        sweep.n_mc = s.get_or(o("n_mc"), f.n_mc, "n_mc", sweep.n_mc);
        sweep.n = s.get_or(o("n"), f.n, "n", sweep.n);
        sweep.alpha = s.get_or(o("alpha"), f.alpha, "alpha", sweep.alpha);
        sweep.sigma = s.get_or(o("sigma"), f.sigma, "sigma", sweep.sigma);
        ensmooth::detail::require(sweep.n_mc >= 1, "n-mc must be >= 1");
        ensmooth::detail::require(sweep.alpha > 0.0 && sweep.alpha < 1.0, "alpha must lie in (0,1)");
        ensmooth::detail::require(sweep.sigma > 0.0, "sigma must be positive");
        const auto csv = io::sweep_csv(theory::theory_sweep(model, sweep));
        if (const auto p = s.path(o("out_csv"), f.out_csv, "out_csv")) {
            io::detail::write_file(*p, csv);
            out << "wrote " << sweep.k_max << " rows to " << p->string() << "\n";
        } else {
            out << csv;
        }
        return kExitOk;
    }
};

}  // namespace detail

/// Runs the command line `argv[1..argc)`; diagnostics go to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Certification of Gaussian-smoothed classifiers and ensembles"};
    app.name("ensmooth");
    app.require_subcommand(1);

    detail::Flags certify_f, adaptive_f, theory_f, thresholds_f;
    auto* certify_cmd = app.add_subcommand("certify", "Certify a population with a fixed sample size");
    auto* adaptive_cmd = app.add_subcommand("adaptive", "Certify a population at a target radius with adaptive sampling");
    auto* theory_cmd = app.add_subcommand("theory", "Sweep ensemble size under the Gaussian logit model");
    auto* thresholds_cmd = app.add_subcommand("thresholds", "Print the count thresholds of an adaptive schedule");

    for (auto [f, cmd] : {std::pair{&certify_f, certify_cmd}, std::pair{&adaptive_f, adaptive_cmd},
                          std::pair{&theory_f, theory_cmd}, std::pair{&thresholds_f, thresholds_cmd}}) {
        detail::add(*f, cmd, "config", f->config, "JSON file with settings; flags override it");
        detail::add(*f, cmd, "alpha", f->alpha, "Significance of the certificate");
        detail::add(*f, cmd, "sigma", f->sigma, "Noise level");
        detail::add(*f, cmd, "out-csv", f->out_csv, "CSV output path");
    }
    for (auto [f, cmd] : {std::pair{&certify_f, certify_cmd}, std::pair{&adaptive_f, adaptive_cmd}}) {
        detail::add(*f, cmd, "classifier", f->classifier, "Classifier definition (JSON)");
        detail::add(*f, cmd, "population", f->population, "Labelled inputs (CSV: id,label,x0,...)");
        detail::add(*f, cmd, "seed", f->seed, "Noise seed (required)");
        detail::add(*f, cmd, "n0", f->n0, "Class-selection samples");
        detail::add(*f, cmd, "workers", f->workers, "Worker threads, 0 = all cores");
        detail::add(*f, cmd, "baseline-samples", f->baseline_samples, "Reference samples per input for SampleRF");
        detail::add(*f, cmd, "radii", f->radii, "Radii of the certified-accuracy table")->delimiter(',');
        detail::add(*f, cmd, "mode", f->mode, "Ensemble aggregation: soft, hard, softmax_soft, weighted_soft");
        detail::add(*f, cmd, "consensus-k", f->consensus_k, "K-consensus early exit");
        detail::add(*f, cmd, "out-json", f->out_json, "JSON report path");
    }
    for (auto [f, cmd] : {std::pair{&adaptive_f, adaptive_cmd}, std::pair{&thresholds_f, thresholds_cmd}}) {
        detail::add(*f, cmd, "stages", f->stages, "Stage sizes n_1,...,n_s")->delimiter(',');
        detail::add(*f, cmd, "beta", f->beta, "Significance of the early-abort tests");
        detail::add(*f, cmd, "radius", f->radius, "Target radius (defaults to sigma)");
    }
    detail::add(certify_f, certify_cmd, "n", certify_f.n, "Estimation samples");
    detail::add(thresholds_f, thresholds_cmd, "n0", thresholds_f.n0, "Class-selection samples")->group("");
    detail::add(thresholds_f, thresholds_cmd, "baseline-n", thresholds_f.baseline_n,
                "Also print the minimal final stage matching this fixed sample size");
    detail::add(theory_f, theory_cmd, "model", theory_f.model, "Gaussian logit model (CSV)");
    detail::add(theory_f, theory_cmd, "logits", theory_f.logits, "Logit dump to estimate the model from (CSV)");
    detail::add(theory_f, theory_cmd, "out-model", theory_f.out_model, "Write the estimated model here");
    detail::add(theory_f, theory_cmd, "seed", theory_f.seed, "Monte Carlo seed (required)");
    detail::add(theory_f, theory_cmd, "k-max", theory_f.k_max, "Largest ensemble size");
    detail::add(theory_f, theory_cmd, "n-mc", theory_f.n_mc, "Monte Carlo draws per ensemble size");
    detail::add(theory_f, theory_cmd, "n", theory_f.n, "Certification samples behind the expected radius");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        auto launch = [&](const detail::Flags& f) {
            return detail::Run{f, detail::load_settings(f.config), out};
        };
        if (*certify_cmd) return launch(certify_f).batch(false);
        if (*adaptive_cmd) return launch(adaptive_f).batch(true);
        if (*theory_cmd) return launch(theory_f).theory();
        return launch(thresholds_f).thresholds();
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    }
}

}  // namespace ensmooth::cli
