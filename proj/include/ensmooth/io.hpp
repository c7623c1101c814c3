#pragma once

// File formats: classifier definitions (JSON), labelled populations (CSV),
// Gaussian logit models and logit dumps (CSV), batch reports (JSON + CSV),
// threshold tables and theory sweeps (CSV). See docs/formats.md.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "ensmooth/certify.hpp"
#include "ensmooth/classifier.hpp"
#include "ensmooth/ensemble.hpp"
#include "ensmooth/errors.hpp"
#include "ensmooth/theory.hpp"

namespace ensmooth::io {

using json = nlohmann::json;

inline constexpr int kReportSchemaVersion = 1;

/// Raised for unreadable or malformed input files.
class FormatError : public ParameterError {
public:
    using ParameterError::ParameterError;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write '" + path.string() + "'");
    out << content;
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        std::string field(line.substr(start, pos == std::string_view::npos ? line.npos : pos - start));
        while (!field.empty() && (field.back() == ' ' || field.back() == '\r')) field.pop_back();
        while (!field.empty() && field.front() == ' ') field.erase(field.begin());
        out.push_back(std::move(field));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

// Non-empty, non-comment lines.
inline std::vector<std::string> data_lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        out.push_back(line);
    }
    return out;
}

inline double to_double(const std::string& s, std::string_view what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad number '" + s + "' for " + std::string(what));
    }
}

inline long long to_int(const std::string& s, std::string_view what) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad integer '" + s + "' for " + std::string(what));
    }
}

inline std::size_t to_index(const std::string& s, std::string_view what) {
    const auto v = to_int(s, what);
    if (v < 0) throw FormatError("negative value for " + std::string(what));
    return static_cast<std::size_t>(v);
}

/// 17 significant digits, enough to round-trip any double.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T>
T get_field(const json& j, const char* key) {
    if (!j.contains(key)) throw FormatError(std::string("missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("field '") + key + "': " + e.what());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Classifier definitions
// ---------------------------------------------------------------------------

inline ClassifierPtr classifier_from_json(const json& j, const std::filesystem::path& base_dir = {});

inline ClassifierPtr load_classifier(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(detail::read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
    return classifier_from_json(j, path.parent_path());
}

inline ClassifierPtr classifier_from_json(const json& j, const std::filesystem::path& base_dir) {
    if (!j.is_object()) throw FormatError("classifier definition must be a JSON object");
    if (j.contains("file")) {
        return load_classifier(base_dir / detail::get_field<std::string>(j, "file"));
    }
    const auto type = detail::get_field<std::string>(j, "type");
    if (type == "linear") {
        return std::make_shared<LinearGaussianClassifier>(detail::get_field<std::vector<double>>(j, "weights"),
                                                          j.value("bias", 0.0));
    }
    if (type == "affine") {
        const auto classes = detail::get_field<std::size_t>(j, "classes");
        const auto dim = detail::get_field<std::size_t>(j, "dimension");
        const auto rows = detail::get_field<std::vector<std::vector<double>>>(j, "weights");
        if (rows.size() != classes) throw FormatError("affine: weights need one row per class");
        std::vector<double> flat;
        for (const auto& row : rows) {
            if (row.size() != dim) throw FormatError("affine: weight rows need 'dimension' entries");
            flat.insert(flat.end(), row.begin(), row.end());
        }
        auto bias = j.contains("bias") ? detail::get_field<std::vector<double>>(j, "bias")
                                       : std::vector<double>(classes, 0.0);
        return std::make_shared<AffineClassifier>(classes, dim, std::move(flat), std::move(bias));
    }
    if (type == "constant") {
        return std::make_shared<TabularClassifier>(TabularClassifier::constant(
            detail::get_field<std::size_t>(j, "classes"), detail::get_field<std::size_t>(j, "dimension"),
            detail::get_field<std::size_t>(j, "class")));
    }
    if (type == "tabular") {
        std::map<TabularClassifier::Cell, std::size_t> table;
        if (j.contains("cells")) {
            for (const auto& entry : j.at("cells")) {
                table[detail::get_field<TabularClassifier::Cell>(entry, "cell")] =
                    detail::get_field<std::size_t>(entry, "class");
            }
        }
        return std::make_shared<TabularClassifier>(
            detail::get_field<std::size_t>(j, "classes"), detail::get_field<std::size_t>(j, "dimension"),
            j.value("step", 1.0), j.value("default", std::size_t{0}), std::move(table));
    }
    if (type == "ensemble") {
        EnsembleConfig cfg;
        for (const auto& member : detail::get_field<json>(j, "members")) {
            cfg.members.push_back(classifier_from_json(member, base_dir));
        }
        cfg.mode = parse_aggregation_mode(j.value("mode", std::string("soft")));
        if (j.contains("weights")) cfg.weights = detail::get_field<std::vector<double>>(j, "weights");
        if (j.contains("consensus_k") && !j.at("consensus_k").is_null()) {
            cfg.consensus_k = detail::get_field<std::size_t>(j, "consensus_k");
        }
        return std::make_shared<EnsembleClassifier>(std::move(cfg));
    }
    throw FormatError("unknown classifier type '" + type + "'");
}

// ---------------------------------------------------------------------------
// Populations: id,label,x0,x1,...
// ---------------------------------------------------------------------------

inline std::vector<LabeledInput> parse_population(const std::string& text) {
    const auto lines = detail::data_lines(text);
    if (lines.empty()) throw FormatError("population file is empty");
    std::vector<LabeledInput> out;
    std::size_t start = 0;
    if (detail::split(lines.front()).front() == "id") start = 1;  // header
    std::size_t dim = 0;
    for (std::size_t i = start; i < lines.size(); ++i) {
        const auto fields = detail::split(lines[i]);
        if (fields.size() < 3) throw FormatError("population row " + std::to_string(i + 1) + " has no features");
        LabeledInput item;
        item.id = fields[0];
        item.label = detail::to_index(fields[1], "label");
        for (std::size_t f = 2; f < fields.size(); ++f) item.x.push_back(detail::to_double(fields[f], "feature"));
        if (dim == 0) dim = item.x.size();
        if (item.x.size() != dim) throw FormatError("population rows have differing dimensions");
        out.push_back(std::move(item));
    }
    if (out.empty()) throw FormatError("population file has no rows");
    return out;
}

inline std::vector<LabeledInput> load_population(const std::filesystem::path& path) {
    return parse_population(detail::read_file(path));
}

inline std::string population_csv(std::span<const LabeledInput> population) {
    std::string out = "id,label";
    const std::size_t dim = population.empty() ? 0 : population.front().x.size();
    for (std::size_t j = 0; j < dim; ++j) out += ",x" + std::to_string(j);
    out += '\n';
    for (const auto& item : population) {
        out += item.id + ',' + std::to_string(item.label);
        for (double v : item.x) out += ',' + detail::format_double(v);
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string report_csv(const BatchReport& report, std::uint64_t seed) {
    std::string out = "# ensmooth batch report, schema " + std::to_string(kReportSchemaVersion) +
                      ", seed " + std::to_string(seed) + "\n";
    out += "id,true_class,prediction,radius,p_lower,samples_used,stage,models_evaluated\n";
    for (const auto& e : report.entries) {
        const auto& r = e.result;
        out += e.id + ',' + std::to_string(e.true_class) + ',';
        out += r.predicted_class ? std::to_string(*r.predicted_class) : std::string("abstain");
        out += ',' + detail::format_double(r.radius) + ',' + detail::format_double(r.p_lower) + ',' +
               std::to_string(r.samples_used) + ',';
        if (r.stage_returned) out += std::to_string(*r.stage_returned);
        out += ',' + std::to_string(r.models_evaluated) + '\n';
    }
    return out;
}

inline json engine_config_json(const EngineConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["sigma"] = cfg.sigma;
    j["workers"] = cfg.workers;
    j["baseline_samples"] = cfg.resolved_baseline();
    j["radii"] = cfg.radii;
    if (cfg.adaptive()) {
        const auto& s = std::get<AdaptiveSchedule>(cfg.procedure);
        j["procedure"] = "adaptive";
        j["n0"] = s.n0;
        j["stages"] = s.stage_sizes;
        j["alpha"] = s.alpha;
        j["beta"] = s.beta;
        j["radius"] = s.target_radius;
    } else {
        const auto& f = std::get<FixedSampling>(cfg.procedure);
        j["procedure"] = "certify";
        j["n0"] = f.n0;
        j["n"] = f.n;
        j["alpha"] = f.alpha;
    }
    return j;
}

inline json report_json(const BatchReport& report, const json& resolved_config) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["config"] = resolved_config;
    json summary;
    summary["inputs"] = report.entries.size();
    summary["acr"] = report.acr;
    summary["sample_rf"] = report.sample_rf;
    summary["time_rf_model_evaluations"] = report.time_rf;
    summary["kcr"] = report.kcr;
    summary["asr"] = report.asr;
    summary["baseline_samples"] = report.baseline_samples;
    summary["model_count"] = report.model_count;
    summary["wall_clock_seconds"] = report.wall_clock_seconds;
    json curve = json::array();
    for (const auto& [r, acc] : report.certified_accuracy) curve.push_back({{"radius", r}, {"accuracy", acc}});
    summary["certified_accuracy"] = curve;
    j["summary"] = summary;
    json rows = json::array();
    for (const auto& e : report.entries) {
        const auto& r = e.result;
        json row;
        row["id"] = e.id;
        row["true_class"] = e.true_class;
        row["prediction"] = r.predicted_class ? json(*r.predicted_class) : json(nullptr);
        row["radius"] = r.radius;
        row["p_lower"] = r.p_lower;
        row["samples_used"] = r.samples_used;
        row["stage"] = r.stage_returned ? json(*r.stage_returned) : json(nullptr);
        row["models_evaluated"] = r.models_evaluated;
        row["consensus_hits"] = r.consensus_hits;
        rows.push_back(row);
    }
    j["results"] = rows;
    return j;
}

inline std::string thresholds_csv(const std::vector<StageThreshold>& table) {
    std::string out = "stage,stage_size,certify_count,abort_count\n";
    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto& t = table[i];
        out += std::to_string(i + 1) + ',' + std::to_string(t.stage_size) + ',';
        if (t.certify_count) out += std::to_string(*t.certify_count);
        out += ',';
        if (t.abort_count) out += std::to_string(*t.abort_count);
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Theory: models, logit dumps, sweeps
// ---------------------------------------------------------------------------

/// Model CSV: rows `field,i,j,value` with field in {c, sigma_c, sigma_p,
/// zeta_c, zeta_p}; `i` is used by c, `i,j` by the matrices, neither by the
/// zetas. Matrix entries not listed are zero; listing (i,j) also sets (j,i).
inline theory::GaussianLogitModel parse_model_csv(const std::string& text) {
    const auto lines = detail::data_lines(text);
    struct Entry { std::string field; long long i; long long j; double value; };
    std::vector<Entry> entries;
    long long m = 0;
    for (std::size_t n = 0; n < lines.size(); ++n) {
        const auto f = detail::split(lines[n]);
        if (n == 0 && f.front() == "field") continue;
        if (f.size() != 4) throw FormatError("model row " + std::to_string(n + 1) + " needs 4 columns");
        Entry e{f[0], f[1].empty() ? -1 : detail::to_int(f[1], "i"), f[2].empty() ? -1 : detail::to_int(f[2], "j"),
                detail::to_double(f[3], "value")};
        if (e.field == "c") {
            if (e.i < 0) throw FormatError("model: c entries need an index");
            m = std::max(m, e.i + 1);
        } else if (e.field == "sigma_c" || e.field == "sigma_p") {
            if (e.i < 0 || e.j < 0) throw FormatError("model: matrix entries need i and j");
        } else if (e.field != "zeta_c" && e.field != "zeta_p") {
            throw FormatError("model: unknown field '" + e.field + "'");
        }
        entries.push_back(e);
    }
    if (m < 2) throw FormatError("model: at least two mean logits required");
    theory::GaussianLogitModel model;
    model.c = Eigen::VectorXd::Zero(m);
    model.sigma_c = Eigen::MatrixXd::Zero(m, m);
    model.sigma_p = Eigen::MatrixXd::Zero(m, m);
    for (const auto& e : entries) {
        if (e.field == "c") {
            model.c(e.i) = e.value;
        } else if (e.field == "zeta_c") {
            model.zeta_c = e.value;
        } else if (e.field == "zeta_p") {
            model.zeta_p = e.value;
        } else {
            if (e.i >= m || e.j >= m) throw FormatError("model: matrix index out of range");
            auto& target = e.field == "sigma_c" ? model.sigma_c : model.sigma_p;
            target(e.i, e.j) = e.value;
            target(e.j, e.i) = e.value;
        }
    }
    return model;
}

inline theory::GaussianLogitModel load_model(const std::filesystem::path& path) {
    return parse_model_csv(detail::read_file(path));
}

inline std::string model_csv(const theory::GaussianLogitModel& model) {
    std::string out = "field,i,j,value\n";
    const auto m = model.classes();
    for (Eigen::Index i = 0; i < m; ++i) out += "c," + std::to_string(i) + ",," + detail::format_double(model.c(i)) + '\n';
    for (const auto& [name, mat] : {std::pair{"sigma_c", &model.sigma_c}, std::pair{"sigma_p", &model.sigma_p}}) {
        for (Eigen::Index i = 0; i < m; ++i) {
            for (Eigen::Index j = i; j < m; ++j) {
                out += std::string(name) + ',' + std::to_string(i) + ',' + std::to_string(j) + ',' +
                       detail::format_double((*mat)(i, j)) + '\n';
            }
        }
    }
    out += "zeta_c,,," + detail::format_double(model.zeta_c) + '\n';
    out += "zeta_p,,," + detail::format_double(model.zeta_p) + '\n';
    return out;
}

/// Logit dump CSV: `[replicate,]classifier_id,perturbation_id,class,logit`.
/// perturbation_id 0 is the clean output; 1..P are noisy draws shared across
/// classifiers. The replicate column is optional (default 0).
inline theory::LogitSampleSet parse_logit_dump(const std::string& text) {
    const auto lines = detail::data_lines(text);
    if (lines.empty()) throw FormatError("logit dump is empty");
    auto header = detail::split(lines.front());
    const bool has_header = header.front() == "classifier_id" || header.front() == "replicate";
    const bool has_replicate = has_header ? header.front() == "replicate" : header.size() == 5;
    const std::size_t width = has_replicate ? 5 : 4;
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::map<std::size_t, double>> cells;
    std::size_t replicates = 0, classifiers = 0, draws = 0, classes = 0;
    for (std::size_t n = has_header ? 1 : 0; n < lines.size(); ++n) {
        const auto f = detail::split(lines[n]);
        if (f.size() != width) throw FormatError("logit dump row " + std::to_string(n + 1) + " has wrong width");
        std::size_t col = 0;
        const std::size_t r = has_replicate ? detail::to_index(f[col++], "replicate") : 0;
        const std::size_t l = detail::to_index(f[col++], "classifier_id");
        const std::size_t p = detail::to_index(f[col++], "perturbation_id");
        const std::size_t q = detail::to_index(f[col++], "class");
        cells[{r, l, p}][q] = detail::to_double(f[col], "logit");
        replicates = std::max(replicates, r + 1);
        classifiers = std::max(classifiers, l + 1);
        draws = std::max(draws, p);
        classes = std::max(classes, q + 1);
    }
    theory::LogitSampleSet set;
    set.clean.assign(replicates, std::vector<Eigen::VectorXd>(classifiers));
    set.perturbed.assign(replicates, std::vector<std::vector<Eigen::VectorXd>>(
                                         classifiers, std::vector<Eigen::VectorXd>(draws)));
    for (std::size_t r = 0; r < replicates; ++r) {
        for (std::size_t l = 0; l < classifiers; ++l) {
            for (std::size_t p = 0; p <= draws; ++p) {
                const auto it = cells.find({r, l, p});
                if (it == cells.end() || it->second.size() != classes) {
                    throw FormatError("logit dump is missing entries for replicate " + std::to_string(r) +
                                      ", classifier " + std::to_string(l) + ", perturbation " + std::to_string(p));
                }
                Eigen::VectorXd y(static_cast<Eigen::Index>(classes));
                for (const auto& [q, v] : it->second) y(static_cast<Eigen::Index>(q)) = v;
                if (p == 0) {
                    set.clean[r][l] = y;
                } else {
                    set.perturbed[r][l][p - 1] = y;
                }
            }
        }
    }
    return set;
}

inline std::string logit_dump_csv(const theory::LogitSampleSet& set) {
    std::string out = "replicate,classifier_id,perturbation_id,class,logit\n";
    auto emit = [&](std::size_t r, std::size_t l, std::size_t p, const Eigen::VectorXd& y) {
        for (Eigen::Index q = 0; q < y.size(); ++q) {
            out += std::to_string(r) + ',' + std::to_string(l) + ',' + std::to_string(p) + ',' +
                   std::to_string(q) + ',' + detail::format_double(y(q)) + '\n';
        }
    };
    for (std::size_t r = 0; r < set.replicates(); ++r) {
        for (std::size_t l = 0; l < set.classifiers(); ++l) {
            emit(r, l, 0, set.clean[r][l]);
            for (std::size_t p = 0; p < set.perturbed[r][l].size(); ++p) emit(r, l, p + 1, set.perturbed[r][l][p]);
        }
    }
    return out;
}

inline std::string sweep_csv(const std::vector<theory::SweepRow>& rows) {
    std::string out = "k,var_ratio_p,var_ratio_c,p1,p1_se,chebyshev,expected_radius\n";
    for (const auto& row : rows) {
        out += std::to_string(row.k) + ',' + detail::format_double(row.var_ratio_p) + ',' +
               detail::format_double(row.var_ratio_c) + ',' + detail::format_double(row.p1) + ',' +
               detail::format_double(row.p1_se) + ',' +
               (row.chebyshev ? detail::format_double(*row.chebyshev) : std::string()) + ',' +
               detail::format_double(row.expected_radius) + '\n';
    }
    return out;
}

}  // namespace ensmooth::io
