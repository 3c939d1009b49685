#pragma once

#include "lsvcmm/selection.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace lsvcmm {

enum class Scenario { RegularMissing, Irregular };

Scenario scenario_from_name(const std::string& name);
std::string scenario_name(Scenario scenario);

/// Synthetic-data settings. Both scenarios draw a subject-level random
/// intercept with variance sigma2 * ratio and i.i.d. noise with variance
/// sigma2 on top of beta0(t) + beta1(t) * group.
struct ScenarioParams {
    Scenario scenario = Scenario::RegularMissing;
    int n_subjects = 100;
    double sigma2 = 1.0;
    double ratio = 1.0;
    // RegularMissing: ten equispaced points on [0, 1]; the intersection of a
    // random share of points and a random share of subjects is deleted.
    double missing_frac_points = 0.71;
    double missing_frac_subjects = 0.71;
    // Irregular: each subject gets this many distinct points of the 100-point
    // unit grid.
    int points_per_subject = 10;
    /// The irregular group difference is sigmoid(20(0.6-t)) gated to be zero
    /// on the first 45 grid points; this flag gates the other side instead.
    bool flip_null_region = false;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SimulatedData {
    LongitudinalDataset dataset;  // covariates: (Intercept), group
    TimeGrid grid;
    Matrix truth;  // 2 x S coefficient values on the grid
};

SimulatedData generate_regular_missing(const ScenarioParams& params, std::uint64_t seed);
SimulatedData generate_irregular(const ScenarioParams& params, std::uint64_t seed);
SimulatedData generate(const ScenarioParams& params, std::uint64_t seed);

struct Metrics {
    double mae = 0.0;
    double accuracy = 0.0;
    double tpr = 0.0;
    double fdr = 0.0;
};

/// Estimation and support-recovery metrics of one coefficient row against
/// the truth on the same grid. tpr is NaN when the truth has no nonzero
/// entry.
Metrics evaluate(const Vector& estimate, const Vector& truth);

enum class Method { LSVCMM, LSVCM, ALasso };

Method method_from_name(const std::string& name);
std::string method_name(Method method);

/// Shared tuning defaults for the benchmarked methods: LSVCMM smooths with a
/// compound-symmetry working covariance, LSVCM with an independent one, and
/// ALasso degenerates the kernel to pointwise blocks (scale small enough
/// that truncation separates neighbouring grid points).
struct MethodConfig {
    double h = 0.2;
    double alpha = 0.5;
    double gamma = 1.0;
    double ebic_gamma = 0.25;
    int n_lambda = 30;
    double lambda_min_ratio = 1e-3;
    double tol = 1e-6;
    int max_iter = 50000;
    int covariance_cycles = 2;
    double truncation_radius = 4.0;
};

double pointwise_scale(const TimeGrid& grid, double truncation_radius);

/// EBIC-selected fit of one method on a generated dataset.
FitResult fit_scenario_method(const SimulatedData& data, Method method,
                              const MethodConfig& cfg);

struct ExperimentSpec {
    ScenarioParams base;
    std::string vary = "sigma2";  // sigma2 | missingness | ratio | n_subjects
    std::vector<double> values;   // empty: per-axis defaults
    std::vector<Method> methods = {Method::LSVCMM, Method::LSVCM, Method::ALasso};
    MethodConfig method;
    int n_reps = 20;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const;
    [[nodiscard]] std::vector<double> axis_values() const;
};

struct ExperimentRow {
    std::string scenario;
    std::string vary;
    double setting = 0.0;
    std::string method;
    int replicate = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    Metrics metrics;
};

/// One row per (setting, replicate, method); methods share the replicate's
/// dataset. Failures are recorded, not fatal. Deterministic given the seed.
std::vector<ExperimentRow> run_experiment(const ExperimentSpec& spec);

}  // namespace lsvcmm
