#include "lsvcmm/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace lsvcmm {

namespace {

using nlohmann::json;

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument(message);
}

[[noreturn]] void fail_line(const std::string& path, std::size_t line,
                            const std::string& message) {
    std::ostringstream msg;
    msg << path << ":" << line << ": " << message;
    throw std::invalid_argument(msg.str());
}

// Minimal RFC-4180-style field splitting: quoted fields may contain commas
// and doubled quotes.
std::vector<std::string> split_csv_line(const std::string& line,
                                        const std::string& path, std::size_t lineno) {
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    for (std::size_t k = 0; k < line.size(); ++k) {
        const char ch = line[k];
        if (quoted) {
            if (ch == '"') {
                if (k + 1 < line.size() && line[k + 1] == '"') {
                    field.push_back('"');
                    ++k;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else {
            field.push_back(ch);
        }
    }
    if (quoted) fail_line(path, lineno, "unterminated quoted field");
    fields.push_back(std::move(field));
    return fields;
}

std::string quote_csv(const std::string& value) {
    if (value.find_first_of(",\"\n") == std::string::npos) return value;
    std::string out = "\"";
    for (const char ch : value) {
        if (ch == '"') out += "\"\"";
        else out.push_back(ch);
    }
    out += "\"";
    return out;
}

double parse_double(const std::string& text, const std::string& path,
                    std::size_t lineno, const std::string& column) {
    if (text.empty()) fail_line(path, lineno, "empty value in column '" + column + "'");
    char* end = nullptr;
    const double value = std::strtod(text.c_str(), &end);
    if (end == text.c_str() || *end != '\0')
        fail_line(path, lineno, "cannot parse '" + text + "' in column '" + column + "'");
    if (!std::isfinite(value))
        fail_line(path, lineno, "non-finite value in column '" + column + "'");
    return value;
}

struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> row_lines;
    std::string path;

    [[nodiscard]] std::size_t column_index(const std::string& name) const {
        const auto at = std::find(columns.begin(), columns.end(), name);
        require(at != columns.end(), "column '" + name + "' not found in " + path);
        return static_cast<std::size_t>(at - columns.begin());
    }
};

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open '" + path + "'");
    CsvTable table;
    table.path = path;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_csv_line(line, path, lineno);
        if (table.columns.empty()) {
            table.columns = std::move(fields);
            continue;
        }
        if (fields.size() != table.columns.size())
            fail_line(path, lineno, "expected " + std::to_string(table.columns.size()) +
                                        " fields, found " + std::to_string(fields.size()));
        table.rows.push_back(std::move(fields));
        table.row_lines.push_back(lineno);
    }
    require(!table.columns.empty(), "'" + path + "' has no header line");
    return table;
}

}  // namespace

void RunConfig::validate() const {
    require(!subject_column.empty() && !time_column.empty() && !response_column.empty(),
            "subject/time/response column names must be set");
    require(subject_column != time_column && subject_column != response_column &&
                time_column != response_column,
            "subject/time/response columns must be three distinct columns");
    require(pseudocount > 0.0, "pseudocount must be positive");
    require(penalize.empty() || penalize.size() == covariates.size(),
            "penalize flags must match the covariate list");
    require(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0, 1]");
    require(gamma > 0.0, "gamma must be positive");
    require(n_lambda >= 1, "n_lambda must be at least 1");
    require(lambda_min_ratio > 0.0 && lambda_min_ratio <= 1.0,
            "lambda_min_ratio must be in (0, 1]");
    require(ebic_gamma >= 0.0, "ebic_gamma must be nonnegative");
    require(tol > 0.0, "tol must be positive");
    require(max_iter >= 1, "max_iter must be at least 1");
    require(covariance_cycles >= 1, "covariance_cycles must be at least 1");
    require(level > 0.0 && level < 1.0, "level must be in (0, 1)");
    require(threads >= 1, "threads must be at least 1");
    require(truncation_radius >= 3.0, "truncation_radius must be >= 3");
    family_from_name(family);
}

void to_json(json& j, const RunConfig& cfg) {
    j = json{{"input", cfg.input},
             {"subject_column", cfg.subject_column},
             {"time_column", cfg.time_column},
             {"response_column", cfg.response_column},
             {"covariates", cfg.covariates},
             {"penalize", cfg.penalize},
             {"add_intercept", cfg.add_intercept},
             {"penalize_intercept", cfg.penalize_intercept},
             {"clr", cfg.clr},
             {"pseudocount", cfg.pseudocount},
             {"counts_columns", cfg.counts_columns},
             {"h_grid", cfg.h_grid},
             {"truncation_radius", cfg.truncation_radius},
             {"grid", cfg.grid},
             {"alpha", cfg.alpha},
             {"gamma", cfg.gamma},
             {"n_lambda", cfg.n_lambda},
             {"lambda_min_ratio", cfg.lambda_min_ratio},
             {"family", cfg.family},
             {"ebic_gamma", cfg.ebic_gamma},
             {"tol", cfg.tol},
             {"max_iter", cfg.max_iter},
             {"covariance_cycles", cfg.covariance_cycles},
             {"n_boot", cfg.n_boot},
             {"level", cfg.level},
             {"bonferroni", cfg.bonferroni},
             {"output_dir", cfg.output_dir},
             {"seed", cfg.seed},
             {"threads", cfg.threads}};
}

void from_json(const json& j, RunConfig& cfg) {
    RunConfig defaults;
    cfg = defaults;
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) j.at(key).get_to(slot);
    };
    get("input", cfg.input);
    get("subject_column", cfg.subject_column);
    get("time_column", cfg.time_column);
    get("response_column", cfg.response_column);
    get("covariates", cfg.covariates);
    get("penalize", cfg.penalize);
    get("add_intercept", cfg.add_intercept);
    get("penalize_intercept", cfg.penalize_intercept);
    get("clr", cfg.clr);
    get("pseudocount", cfg.pseudocount);
    get("counts_columns", cfg.counts_columns);
    get("h_grid", cfg.h_grid);
    get("truncation_radius", cfg.truncation_radius);
    get("grid", cfg.grid);
    get("alpha", cfg.alpha);
    get("gamma", cfg.gamma);
    get("n_lambda", cfg.n_lambda);
    get("lambda_min_ratio", cfg.lambda_min_ratio);
    get("family", cfg.family);
    get("ebic_gamma", cfg.ebic_gamma);
    get("tol", cfg.tol);
    get("max_iter", cfg.max_iter);
    get("covariance_cycles", cfg.covariance_cycles);
    get("n_boot", cfg.n_boot);
    get("level", cfg.level);
    get("bonferroni", cfg.bonferroni);
    get("output_dir", cfg.output_dir);
    get("seed", cfg.seed);
    get("threads", cfg.threads);
}

std::string format_double(double value) {
    char buffer[40];
    std::snprintf(buffer, sizeof(buffer), "%.17g", value);
    return buffer;
}

LongitudinalDataset load_dataset(const RunConfig& cfg) {
    cfg.validate();
    CsvTable table = read_csv(cfg.input);
    const std::size_t subject_at = table.column_index(cfg.subject_column);
    const std::size_t time_at = table.column_index(cfg.time_column);
    const std::size_t response_at = table.column_index(cfg.response_column);

    // Optional centered log-ratio preprocessing across the count columns;
    // the response column must be one of them and is replaced by its
    // transformed value.
    std::vector<double> clr_response;
    if (cfg.clr) {
        require(!cfg.counts_columns.empty(),
                "clr preprocessing requires counts_columns");
        require(std::find(cfg.counts_columns.begin(), cfg.counts_columns.end(),
                          cfg.response_column) != cfg.counts_columns.end(),
                "the response column must be one of the counts columns under clr");
        std::vector<std::size_t> counts_at;
        for (const auto& name : cfg.counts_columns)
            counts_at.push_back(table.column_index(name));
        Matrix counts(static_cast<Index>(table.rows.size()),
                      static_cast<Index>(counts_at.size()));
        for (std::size_t r = 0; r < table.rows.size(); ++r)
            for (std::size_t c = 0; c < counts_at.size(); ++c) {
                const double value = parse_double(table.rows[r][counts_at[c]], table.path,
                                                  table.row_lines[r], cfg.counts_columns[c]);
                if (value < 0.0)
                    fail_line(table.path, table.row_lines[r],
                              "negative count in column '" + cfg.counts_columns[c] + "'");
                counts(static_cast<Index>(r), static_cast<Index>(c)) = value;
            }
        const Matrix transformed = clr_transform(counts, cfg.pseudocount);
        const auto response_pos = static_cast<Index>(
            std::find(cfg.counts_columns.begin(), cfg.counts_columns.end(),
                      cfg.response_column) -
            cfg.counts_columns.begin());
        clr_response.resize(table.rows.size());
        for (std::size_t r = 0; r < table.rows.size(); ++r)
            clr_response[r] = transformed(static_cast<Index>(r), response_pos);
    }

    std::vector<std::string> covariates = cfg.covariates;
    if (covariates.empty()) {
        for (const auto& column : table.columns) {
            if (column == cfg.subject_column || column == cfg.time_column ||
                column == cfg.response_column)
                continue;
            if (std::find(cfg.counts_columns.begin(), cfg.counts_columns.end(), column) !=
                cfg.counts_columns.end())
                continue;
            covariates.push_back(column);
        }
    }
    std::vector<std::size_t> covariate_at;
    for (const auto& name : covariates) covariate_at.push_back(table.column_index(name));

    struct Observation {
        double time;
        double response;
        std::vector<double> design;
        std::size_t line;
    };
    std::vector<std::string> subject_order;
    std::map<std::string, std::vector<Observation>> by_subject;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const std::size_t lineno = table.row_lines[r];
        Observation obs;
        obs.line = lineno;
        obs.time = parse_double(row[time_at], table.path, lineno, cfg.time_column);
        obs.response = cfg.clr
                           ? clr_response[r]
                           : parse_double(row[response_at], table.path, lineno,
                                          cfg.response_column);
        for (std::size_t c = 0; c < covariate_at.size(); ++c)
            obs.design.push_back(
                parse_double(row[covariate_at[c]], table.path, lineno, covariates[c]));
        const std::string& id = row[subject_at];
        if (id.empty()) fail_line(table.path, lineno, "empty subject id");
        if (by_subject.find(id) == by_subject.end()) subject_order.push_back(id);
        by_subject[id].push_back(std::move(obs));
    }

    LongitudinalDataset data;
    data.covariate_names = covariates;
    if (cfg.add_intercept)
        data.covariate_names.insert(data.covariate_names.begin(), "(Intercept)");
    const Index p = data.n_covariates();
    for (const auto& id : subject_order) {
        auto& observations = by_subject[id];
        std::stable_sort(observations.begin(), observations.end(),
                         [](const Observation& a, const Observation& b) {
                             return a.time < b.time;
                         });
        for (std::size_t n = 1; n < observations.size(); ++n)
            if (observations[n].time == observations[n - 1].time)
                fail_line(table.path, observations[n].line,
                          "duplicate time for subject '" + id + "'");
        SubjectRecord subject;
        subject.id = id;
        subject.times.resize(static_cast<Index>(observations.size()));
        subject.responses.resize(static_cast<Index>(observations.size()));
        subject.design.resize(static_cast<Index>(observations.size()), p);
        for (std::size_t n = 0; n < observations.size(); ++n) {
            subject.times(static_cast<Index>(n)) = observations[n].time;
            subject.responses(static_cast<Index>(n)) = observations[n].response;
            Index c = 0;
            if (cfg.add_intercept) subject.design(static_cast<Index>(n), c++) = 1.0;
            for (const double x : observations[n].design)
                subject.design(static_cast<Index>(n), c++) = x;
        }
        data.subjects.push_back(std::move(subject));
    }
    data.validate();
    return data;
}

std::vector<bool> penalty_mask(const RunConfig& cfg, const LongitudinalDataset& data) {
    std::vector<bool> mask;
    if (cfg.add_intercept) mask.push_back(cfg.penalize_intercept);
    const std::size_t n_plain = static_cast<std::size_t>(data.n_covariates()) -
                                (cfg.add_intercept ? 1 : 0);
    for (std::size_t c = 0; c < n_plain; ++c)
        mask.push_back(cfg.penalize.empty() ? true : cfg.penalize[c]);
    return mask;
}

TimeGrid resolve_grid(const RunConfig& cfg, const LongitudinalDataset& data) {
    if (cfg.grid.empty()) return default_grid(data);
    TimeGrid grid;
    grid.points = Eigen::Map<const Vector>(cfg.grid.data(),
                                           static_cast<Index>(cfg.grid.size()));
    grid.validate();
    return grid;
}

PathConfig resolve_path_config(const RunConfig& cfg, const LongitudinalDataset& data,
                               const TimeGrid& grid) {
    PathConfig path_cfg;
    path_cfg.h_grid = cfg.h_grid.empty() ? default_h_grid(grid) : cfg.h_grid;
    path_cfg.n_lambda = cfg.n_lambda;
    path_cfg.lambda_min_ratio = cfg.lambda_min_ratio;
    path_cfg.ebic_gamma = cfg.ebic_gamma;
    path_cfg.threads = cfg.threads;
    path_cfg.fit.kernel.truncation_radius = cfg.truncation_radius;
    path_cfg.fit.kernel.scale = path_cfg.h_grid.front();
    path_cfg.fit.penalty.alpha = cfg.alpha;
    path_cfg.fit.penalty.gamma = cfg.gamma;
    path_cfg.fit.penalty.penalized = penalty_mask(cfg, data);
    path_cfg.fit.init_params.family = family_from_name(cfg.family);
    path_cfg.fit.tol = cfg.tol;
    path_cfg.fit.max_iter = cfg.max_iter;
    path_cfg.fit.covariance_cycles = cfg.covariance_cycles;
    return path_cfg;
}

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw std::runtime_error("cannot write '" + path + "'");
    return out;
}

}  // namespace

void write_coefficients_csv(const std::string& path, const CoefficientMatrix& coef,
                            const std::vector<std::string>& names) {
    auto out = open_out(path);
    out << "covariate,grid_time,estimate,is_zero\n";
    for (Index j = 0; j < coef.n_rows(); ++j)
        for (Index s = 0; s < coef.n_points(); ++s)
            out << quote_csv(names[static_cast<std::size_t>(j)]) << ","
                << format_double(coef.grid.points(s)) << ","
                << format_double(coef.values(j, s)) << ","
                << (coef.values(j, s) == 0.0 ? "true" : "false") << "\n";
}

void write_path_csv(const std::string& path, const PathResult& result) {
    auto out = open_out(path);
    out << "h,lambda,df,ebic,selected\n";
    for (std::size_t k = 0; k < result.entries.size(); ++k) {
        const PathEntry& entry = result.entries[k];
        out << format_double(entry.h) << "," << format_double(entry.lambda) << ","
            << entry.df << "," << format_double(entry.ebic) << ","
            << (k == result.selected ? "true" : "false") << "\n";
    }
}

void write_bands_csv(const std::string& path, const std::vector<std::string>& names,
                     const CoefficientMatrix& estimate, const BandResult& bands) {
    auto out = open_out(path);
    out << "covariate,grid_time,estimate,lower,upper,excludes_zero\n";
    for (Index j = 0; j < estimate.n_rows(); ++j)
        for (Index s = 0; s < estimate.n_points(); ++s) {
            const bool excludes = 0.0 < bands.lower(j, s) || 0.0 > bands.upper(j, s);
            out << quote_csv(names[static_cast<std::size_t>(j)]) << ","
                << format_double(estimate.grid.points(s)) << ","
                << format_double(estimate.values(j, s)) << ","
                << format_double(bands.lower(j, s)) << ","
                << format_double(bands.upper(j, s)) << ","
                << (excludes ? "true" : "false") << "\n";
        }
}

void write_pvalues_csv(const std::string& path, const std::vector<std::string>& names,
                       const BandResult& bands) {
    auto out = open_out(path);
    out << "covariate,p_value\n";
    for (Index j = 0; j < bands.p_values.size(); ++j)
        out << quote_csv(names[static_cast<std::size_t>(j)]) << ","
            << format_double(bands.p_values(j)) << "\n";
}

void write_dataset_csv(const std::string& path, const LongitudinalDataset& data) {
    auto out = open_out(path);
    out << "subject_id,time,response";
    std::vector<Index> keep;
    for (Index c = 0; c < data.n_covariates(); ++c) {
        if (data.covariate_names[static_cast<std::size_t>(c)] == "(Intercept)") continue;
        keep.push_back(c);
        out << "," << quote_csv(data.covariate_names[static_cast<std::size_t>(c)]);
    }
    out << "\n";
    for (const auto& subject : data.subjects)
        for (Index n = 0; n < subject.n_obs(); ++n) {
            out << quote_csv(subject.id) << "," << format_double(subject.times(n)) << ","
                << format_double(subject.responses(n));
            for (const Index c : keep) out << "," << format_double(subject.design(n, c));
            out << "\n";
        }
}

void write_truth_csv(const std::string& path, const TimeGrid& grid, const Matrix& truth,
                     const std::vector<std::string>& names) {
    auto out = open_out(path);
    out << "covariate,grid_time,value\n";
    for (Index j = 0; j < truth.rows(); ++j)
        for (Index s = 0; s < truth.cols(); ++s)
            out << quote_csv(names[static_cast<std::size_t>(j)]) << ","
                << format_double(grid.points(s)) << "," << format_double(truth(j, s))
                << "\n";
}

void write_experiment_csv(const std::string& path,
                          const std::vector<ExperimentRow>& rows) {
    auto out = open_out(path);
    out << "scenario,experiment,setting,method,replicate,seed,metric,value\n";
    for (const auto& row : rows) {
        const auto prefix = [&](const std::string& metric, const std::string& value) {
            out << row.scenario << "," << row.vary << "," << format_double(row.setting)
                << "," << row.method << "," << row.replicate << "," << row.seed << ","
                << metric << "," << value << "\n";
        };
        prefix("ok", row.ok ? "1" : "0");
        if (!row.ok) continue;
        prefix("mae", format_double(row.metrics.mae));
        prefix("accuracy", format_double(row.metrics.accuracy));
        prefix("tpr", format_double(row.metrics.tpr));
        prefix("fdr", format_double(row.metrics.fdr));
    }
}

namespace {

json vector_to_json(const Vector& v) {
    json out = json::array();
    for (Index k = 0; k < v.size(); ++k) out.push_back(v(k));
    return out;
}

json matrix_to_json(const Matrix& m) {
    json out = json::array();
    for (Index j = 0; j < m.rows(); ++j) {
        json row = json::array();
        for (Index s = 0; s < m.cols(); ++s) row.push_back(m(j, s));
        out.push_back(std::move(row));
    }
    return out;
}

Vector vector_from_json(const json& j) {
    Vector out(static_cast<Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k)
        out(static_cast<Index>(k)) = j[k].get<double>();
    return out;
}

Matrix matrix_from_json(const json& j) {
    const Index rows = static_cast<Index>(j.size());
    const Index cols = rows > 0 ? static_cast<Index>(j[0].size()) : 0;
    Matrix out(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c)
            out(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]
                            .get<double>();
    return out;
}

}  // namespace

json model_to_json(const RunConfig& cfg, const TimeGrid& grid,
                   const std::vector<std::string>& names, const PathResult& path) {
    const PathEntry& entry = path.selected_entry();
    json j;
    j["config"] = cfg;
    j["covariates"] = names;
    j["grid"] = vector_to_json(grid.points);
    j["selected"] = {{"h", entry.h},
                     {"lambda", entry.lambda},
                     {"df", entry.df},
                     {"ebic", entry.ebic}};
    j["coefficients"] = matrix_to_json(entry.fit.coefficients.values);
    std::vector<bool> penalized(entry.fit.coefficients.penalized.begin(),
                                entry.fit.coefficients.penalized.end());
    j["penalized"] = penalized;
    j["weights"] = {{"group", vector_to_json(entry.penalty.group_weights)},
                    {"entry", matrix_to_json(entry.penalty.entry_weights)},
                    {"alpha", entry.penalty.alpha},
                    {"gamma", entry.penalty.gamma}};
    j["variance"] = {{"family", family_name(entry.fit.params.family)},
                     {"sigma2", entry.fit.params.sigma2},
                     {"ratio", entry.fit.params.ratio},
                     {"rho", entry.fit.params.rho}};
    j["calibration"] = {{"family", family_name(entry.calibration.family)},
                        {"sigma2", entry.calibration.sigma2},
                        {"ratio", entry.calibration.ratio},
                        {"rho", entry.calibration.rho}};
    j["fit"] = {{"converged", entry.fit.converged},
                {"iterations", entry.fit.iterations},
                {"quasi_loglik", entry.fit.quasi_loglik},
                {"kkt_residual", entry.fit.kkt_residual}};
    j["seed"] = cfg.seed;
    return j;
}

LoadedModel model_from_json(const json& j) {
    LoadedModel model;
    model.config = j.at("config").get<RunConfig>();
    model.covariate_names = j.at("covariates").get<std::vector<std::string>>();
    model.grid.points = vector_from_json(j.at("grid"));
    model.grid.validate();

    model.estimate.values = matrix_from_json(j.at("coefficients"));
    model.estimate.grid = model.grid;
    const auto penalized = j.at("penalized").get<std::vector<bool>>();
    model.estimate.penalized = penalized;
    model.estimate.validate();

    FitConfig refit;
    refit.kernel.scale = j.at("selected").at("h").get<double>();
    refit.kernel.truncation_radius = model.config.truncation_radius;
    refit.penalty.lambda = j.at("selected").at("lambda").get<double>();
    refit.penalty.alpha = j.at("weights").at("alpha").get<double>();
    refit.penalty.gamma = j.at("weights").at("gamma").get<double>();
    refit.penalty.group_weights = vector_from_json(j.at("weights").at("group"));
    refit.penalty.entry_weights = matrix_from_json(j.at("weights").at("entry"));
    refit.penalty.penalized = penalized;
    refit.init_params.family =
        family_from_name(j.at("calibration").at("family").get<std::string>());
    refit.init_params.sigma2 = j.at("calibration").at("sigma2").get<double>();
    refit.init_params.ratio = j.at("calibration").at("ratio").get<double>();
    refit.init_params.rho = j.at("calibration").at("rho").get<double>();
    refit.tol = model.config.tol;
    refit.max_iter = model.config.max_iter;
    refit.covariance_cycles = model.config.covariance_cycles;
    model.refit = refit;
    return model;
}

void write_text_file(const std::string& path, const std::string& content) {
    auto out = open_out(path);
    out << content;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw std::invalid_argument("cannot open '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

}  // namespace lsvcmm
