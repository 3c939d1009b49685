#include "lsvcmm/simulation.hpp"

#include "lsvcmm/parallel.hpp"
#include "lsvcmm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace lsvcmm {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument(message);
}

double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

Vector unit_grid(int n_points) {
    Vector t(n_points);
    for (int s = 0; s < n_points; ++s)
        t(s) = static_cast<double>(s) / static_cast<double>(n_points - 1);
    return t;
}

int round_count(double fraction, int total) {
    return static_cast<int>(std::floor(fraction * static_cast<double>(total) + 0.5));
}

std::vector<int> sample_without_replacement(Rng& rng, int total, int count) {
    std::vector<int> pool(static_cast<std::size_t>(total));
    std::iota(pool.begin(), pool.end(), 0);
    for (int k = 0; k < count; ++k) {
        const auto pick = static_cast<std::size_t>(
            rng.uniform_index(static_cast<std::uint64_t>(total - k)));
        std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(k) + pick]);
    }
    pool.resize(static_cast<std::size_t>(count));
    std::sort(pool.begin(), pool.end());
    return pool;
}

SimulatedData assemble(const ScenarioParams& params, std::uint64_t seed,
                       const Vector& grid_points, const Matrix& truth,
                       const std::vector<std::vector<int>>& observed) {
    SimulatedData out;
    out.grid.points = grid_points;
    out.truth = truth;
    out.dataset.covariate_names = {"(Intercept)", "group"};

    Rng rng(derive_seed(seed, 2));
    const double theta_sd = std::sqrt(params.sigma2 * params.ratio);
    const double noise_sd = std::sqrt(params.sigma2);
    for (int i = 0; i < params.n_subjects; ++i) {
        const double group = i < params.n_subjects / 2 ? 0.0 : 1.0;
        const double intercept = theta_sd * rng.normal();
        const auto& points = observed[static_cast<std::size_t>(i)];
        SubjectRecord subject;
        subject.id = std::to_string(i);
        subject.times.resize(static_cast<Index>(points.size()));
        subject.responses.resize(static_cast<Index>(points.size()));
        subject.design.resize(static_cast<Index>(points.size()), 2);
        for (std::size_t n = 0; n < points.size(); ++n) {
            const int s = points[n];
            const double mean = truth(0, s) + truth(1, s) * group;
            subject.times(static_cast<Index>(n)) = grid_points(s);
            subject.responses(static_cast<Index>(n)) =
                mean + intercept + noise_sd * rng.normal();
            subject.design(static_cast<Index>(n), 0) = 1.0;
            subject.design(static_cast<Index>(n), 1) = group;
        }
        out.dataset.subjects.push_back(std::move(subject));
    }
    return out;
}

}  // namespace

Scenario scenario_from_name(const std::string& name) {
    if (name == "regular-missing" || name == "regular_missing")
        return Scenario::RegularMissing;
    if (name == "irregular") return Scenario::Irregular;
    throw std::invalid_argument("unknown scenario '" + name + "'");
}

std::string scenario_name(Scenario scenario) {
    return scenario == Scenario::RegularMissing ? "regular-missing" : "irregular";
}

void ScenarioParams::validate() const {
    require(n_subjects >= 2, "need at least two subjects");
    require(std::isfinite(sigma2) && sigma2 > 0.0, "sigma2 must be positive");
    require(std::isfinite(ratio) && ratio >= 0.0, "ratio must be nonnegative");
    require(missing_frac_points >= 0.0 && missing_frac_points <= 1.0 &&
                missing_frac_subjects >= 0.0 && missing_frac_subjects <= 1.0,
            "missing fractions must be in [0, 1]");
    require(points_per_subject >= 1 && points_per_subject <= 100,
            "points per subject must be in [1, 100]");
}

SimulatedData generate_regular_missing(const ScenarioParams& params,
                                       std::uint64_t seed) {
    params.validate();
    const int n_points = 10;
    const Vector grid = unit_grid(n_points);
    Matrix truth = Matrix::Zero(2, n_points);
    for (int s = 0; s < n_points; ++s)
        truth(1, s) = std::max(std::sin(2.0 * kPi * (grid(s) - 0.25)), 0.0);

    const int deleted_points = round_count(params.missing_frac_points, n_points);
    const int deleted_subjects =
        round_count(params.missing_frac_subjects, params.n_subjects);

    std::vector<std::vector<int>> observed;
    bool ok = false;
    for (std::uint64_t attempt = 0; attempt < 100 && !ok; ++attempt) {
        Rng rng(derive_seed(seed, 1, attempt));
        const auto points = sample_without_replacement(rng, n_points, deleted_points);
        const auto subjects =
            sample_without_replacement(rng, params.n_subjects, deleted_subjects);
        std::vector<bool> point_deleted(static_cast<std::size_t>(n_points), false);
        for (const int s : points) point_deleted[static_cast<std::size_t>(s)] = true;
        std::vector<bool> subject_deleted(static_cast<std::size_t>(params.n_subjects),
                                          false);
        for (const int i : subjects) subject_deleted[static_cast<std::size_t>(i)] = true;

        observed.assign(static_cast<std::size_t>(params.n_subjects), {});
        ok = true;
        for (int i = 0; i < params.n_subjects; ++i) {
            for (int s = 0; s < n_points; ++s)
                if (!(subject_deleted[static_cast<std::size_t>(i)] &&
                      point_deleted[static_cast<std::size_t>(s)]))
                    observed[static_cast<std::size_t>(i)].push_back(s);
            if (observed[static_cast<std::size_t>(i)].empty()) {
                ok = false;
                break;
            }
        }
    }
    if (!ok)
        throw std::runtime_error(
            "could not draw a missingness pattern leaving every subject observed");
    return assemble(params, seed, grid, truth, observed);
}

SimulatedData generate_irregular(const ScenarioParams& params, std::uint64_t seed) {
    params.validate();
    const int n_points = 100;
    const Vector grid = unit_grid(n_points);
    Matrix truth = Matrix::Zero(2, n_points);
    for (int s = 0; s < n_points; ++s) {
        const bool in_support =
            params.flip_null_region ? grid(s) < 0.45 : grid(s) >= 0.45;
        truth(1, s) = in_support ? sigmoid(20.0 * (0.6 - grid(s))) : 0.0;
    }

    Rng rng(derive_seed(seed, 1, 0));
    std::vector<std::vector<int>> observed(static_cast<std::size_t>(params.n_subjects));
    for (int i = 0; i < params.n_subjects; ++i)
        observed[static_cast<std::size_t>(i)] =
            sample_without_replacement(rng, n_points, params.points_per_subject);
    return assemble(params, seed, grid, truth, observed);
}

SimulatedData generate(const ScenarioParams& params, std::uint64_t seed) {
    return params.scenario == Scenario::RegularMissing
               ? generate_regular_missing(params, seed)
               : generate_irregular(params, seed);
}

Metrics evaluate(const Vector& estimate, const Vector& truth) {
    require(estimate.size() == truth.size() && estimate.size() > 0,
            "estimate and truth must have equal positive length");
    Metrics metrics;
    Index agree = 0, true_nonzero = 0, recovered = 0, positives = 0, false_pos = 0;
    for (Index s = 0; s < estimate.size(); ++s) {
        const bool est_zero = estimate(s) == 0.0;
        const bool truth_zero = truth(s) == 0.0;
        metrics.mae += std::abs(estimate(s) - truth(s));
        if (est_zero == truth_zero) ++agree;
        if (!truth_zero) {
            ++true_nonzero;
            if (!est_zero) ++recovered;
        }
        if (!est_zero) {
            ++positives;
            if (truth_zero) ++false_pos;
        }
    }
    const double n = static_cast<double>(estimate.size());
    metrics.mae /= n;
    metrics.accuracy = static_cast<double>(agree) / n;
    metrics.tpr = true_nonzero > 0
                      ? static_cast<double>(recovered) / static_cast<double>(true_nonzero)
                      : std::numeric_limits<double>::quiet_NaN();
    metrics.fdr = static_cast<double>(false_pos) /
                  std::max(1.0, static_cast<double>(positives));
    return metrics;
}

Method method_from_name(const std::string& name) {
    if (name == "LSVCMM" || name == "lsvcmm") return Method::LSVCMM;
    if (name == "LSVCM" || name == "lsvcm") return Method::LSVCM;
    if (name == "ALasso" || name == "alasso") return Method::ALasso;
    throw std::invalid_argument("unknown method '" + name + "'");
}

std::string method_name(Method method) {
    switch (method) {
        case Method::LSVCMM: return "LSVCMM";
        case Method::LSVCM: return "LSVCM";
        case Method::ALasso: return "ALasso";
    }
    return "LSVCMM";
}

double pointwise_scale(const TimeGrid& grid, double truncation_radius) {
    require(grid.size() >= 2, "pointwise scale needs at least two grid points");
    double min_gap = std::numeric_limits<double>::infinity();
    for (Index s = 1; s < grid.size(); ++s)
        min_gap = std::min(min_gap, grid.points(s) - grid.points(s - 1));
    return min_gap / (2.0 * truncation_radius);
}

FitResult fit_scenario_method(const SimulatedData& data, Method method,
                              const MethodConfig& cfg) {
    PathConfig path_cfg;
    path_cfg.n_lambda = cfg.n_lambda;
    path_cfg.lambda_min_ratio = cfg.lambda_min_ratio;
    path_cfg.ebic_gamma = cfg.ebic_gamma;
    path_cfg.fit.kernel.truncation_radius = cfg.truncation_radius;
    path_cfg.fit.kernel.scale = method == Method::ALasso
                                    ? pointwise_scale(data.grid, cfg.truncation_radius)
                                    : cfg.h;
    path_cfg.h_grid = {path_cfg.fit.kernel.scale};
    path_cfg.fit.penalty.alpha = cfg.alpha;
    path_cfg.fit.penalty.gamma = cfg.gamma;
    path_cfg.fit.penalty.penalized = {false, true};  // intercept unpenalized
    path_cfg.fit.tol = cfg.tol;
    path_cfg.fit.max_iter = cfg.max_iter;
    path_cfg.fit.covariance_cycles = cfg.covariance_cycles;
    path_cfg.fit.init_params.family = method == Method::LSVCMM
                                          ? CovarianceFamily::CompoundSymmetry
                                          : CovarianceFamily::Independent;
    const PathResult path = fit_path(data.dataset, data.grid, path_cfg);
    return path.selected_entry().fit;
}

void ExperimentSpec::validate() const {
    base.validate();
    require(vary == "sigma2" || vary == "missingness" || vary == "ratio" ||
                vary == "n_subjects",
            "unknown experiment axis '" + vary + "'");
    require(n_reps >= 1, "n_reps must be at least 1");
    require(!methods.empty(), "no methods requested");
}

std::vector<double> ExperimentSpec::axis_values() const {
    if (!values.empty()) return values;
    if (vary == "sigma2") return {0.25, 0.5, 1.0, 2.0, 4.0};
    if (vary == "ratio") return {0.0, 0.5, 1.0, 2.0, 4.0};
    if (vary == "n_subjects") return {25, 50, 100, 200};
    // missingness: observed points per subject
    if (base.scenario == Scenario::RegularMissing) return {3, 4, 5, 6, 7, 8, 9, 10};
    return {5, 10, 20, 30, 40, 50};
}

std::vector<ExperimentRow> run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    const std::vector<double> axis = spec.axis_values();
    const std::size_t n_tasks = axis.size() * static_cast<std::size_t>(spec.n_reps);
    std::vector<std::vector<ExperimentRow>> rows(n_tasks);

    parallel_for(n_tasks, spec.threads, [&](std::size_t task) {
        const std::size_t setting_index = task / static_cast<std::size_t>(spec.n_reps);
        const int replicate = static_cast<int>(task % static_cast<std::size_t>(spec.n_reps));
        const double value = axis[setting_index];

        ScenarioParams params = spec.base;
        if (spec.vary == "sigma2") {
            params.sigma2 = value;
        } else if (spec.vary == "ratio") {
            params.ratio = value;
        } else if (spec.vary == "n_subjects") {
            params.n_subjects = static_cast<int>(value);
        } else if (spec.base.scenario == Scenario::RegularMissing) {
            // observed points per affected subject -> deleted share of points
            params.missing_frac_points = (10.0 - value) / 10.0;
        } else {
            params.points_per_subject = static_cast<int>(value);
        }

        const std::uint64_t rep_seed =
            derive_seed(spec.seed, setting_index, static_cast<std::uint64_t>(replicate));
        const SimulatedData data = generate(params, rep_seed);

        for (const Method method : spec.methods) {
            ExperimentRow row;
            row.scenario = scenario_name(params.scenario);
            row.vary = spec.vary;
            row.setting = value;
            row.method = method_name(method);
            row.replicate = replicate;
            row.seed = rep_seed;
            try {
                const FitResult fit = fit_scenario_method(data, method, spec.method);
                row.metrics = evaluate(fit.coefficients.values.row(1), data.truth.row(1));
                row.ok = true;
            } catch (const std::exception& e) {
                row.ok = false;
                row.error = e.what();
            }
            rows[task].push_back(std::move(row));
        }
    });

    std::vector<ExperimentRow> flat;
    for (auto& block : rows)
        for (auto& row : block) flat.push_back(std::move(row));
    return flat;
}

}  // namespace lsvcmm
