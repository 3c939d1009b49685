#pragma once

#include "lsvcmm/inference.hpp"
#include "lsvcmm/selection.hpp"
#include "lsvcmm/simulation.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace lsvcmm {

/// Everything the CLI needs to run a fit, mirrored one-to-one by the JSON
/// config file; every field can be overridden by a flag.
struct RunConfig {
    std::string input;
    std::string subject_column = "subject_id";
    std::string time_column = "time";
    std::string response_column = "response";
    std::vector<std::string> covariates;  // empty: every non-role column
    std::vector<bool> penalize;           // per covariate; empty: all penalized
    bool add_intercept = true;
    bool penalize_intercept = false;

    bool clr = false;
    double pseudocount = 0.5;
    std::vector<std::string> counts_columns;

    std::vector<double> h_grid;  // empty: default scales from the grid
    double truncation_radius = 4.0;
    std::vector<double> grid;    // empty: unique observed times

    double alpha = 0.5;
    double gamma = 1.0;
    int n_lambda = 30;
    double lambda_min_ratio = 1e-3;
    std::string family = "compound_symmetry";
    double ebic_gamma = 0.25;

    double tol = 1e-6;
    int max_iter = 50000;
    int covariance_cycles = 2;

    int n_boot = 1000;
    double level = 0.95;
    bool bonferroni = false;

    std::string output_dir = ".";
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& cfg);
void from_json(const nlohmann::json& j, RunConfig& cfg);

/// 17-significant-digit decimal rendering used by every CSV writer, so
/// outputs are byte-stable and round-trip exactly.
std::string format_double(double value);

/// Long-format CSV ingestion per the configured column roles, including the
/// optional centered log-ratio preprocessing of count columns. Parse and
/// validation failures carry the 1-based line number.
LongitudinalDataset load_dataset(const RunConfig& cfg);

/// Penalty mask aligned with the loaded dataset's covariate order.
std::vector<bool> penalty_mask(const RunConfig& cfg, const LongitudinalDataset& data);

TimeGrid resolve_grid(const RunConfig& cfg, const LongitudinalDataset& data);
PathConfig resolve_path_config(const RunConfig& cfg, const LongitudinalDataset& data,
                               const TimeGrid& grid);

void write_coefficients_csv(const std::string& path, const CoefficientMatrix& coef,
                            const std::vector<std::string>& names);
void write_path_csv(const std::string& path, const PathResult& result);
void write_bands_csv(const std::string& path, const std::vector<std::string>& names,
                     const CoefficientMatrix& estimate, const BandResult& bands);
void write_pvalues_csv(const std::string& path, const std::vector<std::string>& names,
                       const BandResult& bands);
void write_dataset_csv(const std::string& path, const LongitudinalDataset& data);
void write_truth_csv(const std::string& path, const TimeGrid& grid, const Matrix& truth,
                     const std::vector<std::string>& names);
void write_experiment_csv(const std::string& path,
                          const std::vector<ExperimentRow>& rows);

nlohmann::json model_to_json(const RunConfig& cfg, const TimeGrid& grid,
                             const std::vector<std::string>& names,
                             const PathResult& path);

struct LoadedModel {
    RunConfig config;
    TimeGrid grid;
    std::vector<std::string> covariate_names;
    CoefficientMatrix estimate;
    FitConfig refit;  // selected h, lambda, weights, covariance start
};

LoadedModel model_from_json(const nlohmann::json& j);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace lsvcmm
