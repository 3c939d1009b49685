#include "lsvcmm/selection.hpp"

#include "lsvcmm/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lsvcmm {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument(message);
}

double soft_threshold(double value, double threshold) {
    if (value > threshold) return value - threshold;
    if (value < -threshold) return value + threshold;
    return 0.0;
}

// Group-kill margin at lambda: || soft(u, lambda alpha w) ||_2 minus the
// group threshold; the row stays at zero whenever this is <= 0. The prox
// step size cancels out of the condition.
double kill_margin(const Vector& score, double lambda, double alpha,
                   double group_weight, const Vector& entry_weights) {
    double squared = 0.0;
    for (Index s = 0; s < score.size(); ++s) {
        const double v = soft_threshold(score(s), lambda * alpha * entry_weights(s));
        squared += v * v;
    }
    const double sqrt_s = std::sqrt(static_cast<double>(score.size()));
    return std::sqrt(squared) - lambda * (1.0 - alpha) * sqrt_s * group_weight;
}

double row_lambda_max(const Vector& score, double alpha, double group_weight,
                      const Vector& entry_weights) {
    const double sqrt_s = std::sqrt(static_cast<double>(score.size()));
    const double score_norm = score.norm();
    if (score_norm == 0.0) return 0.0;

    // Upper bounds from either penalty part alone.
    double hi = std::numeric_limits<double>::infinity();
    if (group_weight > 0.0 && alpha < 1.0)
        hi = std::min(hi, score_norm / ((1.0 - alpha) * sqrt_s * group_weight));
    if (alpha > 0.0) {
        double l1_bound = 0.0;
        bool l1_covers = true;
        for (Index s = 0; s < score.size(); ++s) {
            if (entry_weights(s) > 0.0)
                l1_bound = std::max(l1_bound, std::abs(score(s)) / (alpha * entry_weights(s)));
            else if (score(s) != 0.0)
                l1_covers = false;
        }
        if (l1_covers) hi = std::min(hi, l1_bound);
    }
    if (!std::isfinite(hi))
        throw std::invalid_argument(
            "a penalized row has zero weights on a nonzero score and can never "
            "be shrunk to zero");
    if (hi == 0.0) return 0.0;

    double lo = 0.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (kill_margin(score, mid, alpha, group_weight, entry_weights) <= 0.0)
            hi = mid;
        else
            lo = mid;
    }
    return hi;
}

std::vector<double> log_spaced_descending(double hi, double lo, int count) {
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(count));
    if (count == 1) {
        values.push_back(hi);
        return values;
    }
    const double step = (std::log(lo) - std::log(hi)) / (count - 1);
    for (int k = 0; k < count; ++k) values.push_back(std::exp(std::log(hi) + step * k));
    return values;
}

}  // namespace

long degrees_of_freedom(const CoefficientMatrix& coefficients) {
    long df = 0;
    for (Index j = 0; j < coefficients.n_rows(); ++j) {
        if (!coefficients.penalized[static_cast<std::size_t>(j)]) {
            df += coefficients.n_points();
            continue;
        }
        for (Index s = 0; s < coefficients.n_points(); ++s)
            if (coefficients.values(j, s) != 0.0) ++df;
    }
    return df;
}

double smoothed_degrees_of_freedom(const CoefficientMatrix& coefficients,
                                   const KernelConfig& kernel) {
    const double peak = kernel_weight(0.0, kernel);
    double total = 0.0;
    for (Index j = 0; j < coefficients.n_rows(); ++j) {
        std::vector<Index> active;
        for (Index s = 0; s < coefficients.n_points(); ++s)
            if (!coefficients.penalized[static_cast<std::size_t>(j)] ||
                coefficients.values(j, s) != 0.0)
                active.push_back(s);
        for (const Index s : active) {
            double mass = 0.0;
            for (const Index s2 : active)
                mass += kernel_weight(
                    coefficients.grid.points(s) - coefficients.grid.points(s2), kernel);
            total += peak / mass;
        }
    }
    return total;
}

double ebic(const FitResult& fit, const LongitudinalDataset& data, double ebic_gamma) {
    require(std::isfinite(ebic_gamma) && ebic_gamma >= 0.0,
            "EBIC gamma must be nonnegative");
    const long df = degrees_of_freedom(fit.coefficients);
    const double n_obs = static_cast<double>(data.n_obs_total());
    const double model_size = static_cast<double>(fit.coefficients.n_rows() *
                                                  fit.coefficients.n_points());
    return -2.0 * fit.quasi_loglik + static_cast<double>(df) * std::log(n_obs) +
           2.0 * ebic_gamma * static_cast<double>(df) * std::log(model_size);
}

double lambda_max(FitEngine& engine, const FitConfig& cfg) {
    const PenaltyConfig& penalty = cfg.penalty;
    penalty.validate();
    require(penalty.group_weights.size() == engine.n_rows() &&
                penalty.entry_weights.cols() == engine.n_points(),
            "penalty weights do not match the problem dimensions");
    bool any_penalized = false;
    std::vector<bool> unpenalized_rows(penalty.penalized.size());
    for (std::size_t j = 0; j < penalty.penalized.size(); ++j) {
        unpenalized_rows[j] = !penalty.penalized[j];
        any_penalized = any_penalized || penalty.penalized[j];
    }
    if (!any_penalized) return 0.0;

    const auto row_roots = [&] {
        const Matrix base = restricted_stationary_fit(engine, unpenalized_rows);
        const Matrix score = engine.estimating_function(base);
        double best = 0.0;
        for (Index j = 0; j < engine.n_rows(); ++j) {
            if (!penalty.penalized[static_cast<std::size_t>(j)]) continue;
            best = std::max(best, row_lambda_max(score.row(j), penalty.alpha,
                                                 penalty.group_weights(j),
                                                 penalty.entry_weights.row(j)));
        }
        return best;
    };

    // Root the kill condition under every covariance the fit will re-weight
    // with while the penalized rows stay at zero.
    const VarianceParams calibration = engine.covariance();
    VarianceParams weighting = calibration;
    double best = row_roots();
    for (int cycle = 1;
         cycle < cfg.covariance_cycles && best > 0.0 &&
         weighting.family != CovarianceFamily::Independent;
         ++cycle) {
        const Matrix base = restricted_stationary_fit(engine, unpenalized_rows);
        const VarianceParams refreshed =
            update_covariance(engine.residuals(base), engine.subject_times(),
                              weighting.family, weighting);
        weighting.ratio = refreshed.ratio;
        weighting.rho = refreshed.rho;
        engine.set_covariance(weighting);
        best = std::max(best, row_roots());
    }
    engine.set_covariance(calibration);
    if (best == 0.0) return 0.0;
    best *= 1.0 + 1e-9;

    // The spec'd guarantee: the fit at lambda_max keeps penalized rows zero.
    FitConfig check = cfg;
    for (int attempt = 0; attempt < 60; ++attempt) {
        check.penalty.lambda = best;
        const FitResult fit = fit_penalized(engine, check);
        engine.set_covariance(calibration);
        bool all_zero = true;
        for (Index j = 0; j < engine.n_rows(); ++j)
            if (penalty.penalized[static_cast<std::size_t>(j)] &&
                fit.coefficients.values.row(j).cwiseAbs().maxCoeff() > 0.0)
                all_zero = false;
        if (all_zero) return best;
        best *= 1.02;
    }
    throw std::runtime_error("lambda_max verification did not stabilize");
}

double lambda_max(const LongitudinalDataset& data, const TimeGrid& grid,
                  const KernelConfig& kernel, const VarianceParams& params,
                  const PenaltyConfig& penalty) {
    FitEngine engine(data, grid, kernel);
    engine.set_covariance(params);
    FitConfig cfg;
    cfg.kernel = kernel;
    cfg.penalty = penalty;
    cfg.init_params = params;
    return lambda_max(engine, cfg);
}

std::vector<double> default_h_grid(const TimeGrid& grid) {
    grid.validate();
    if (grid.size() < 2) return {1.0};
    std::vector<double> gaps;
    for (Index s = 1; s < grid.size(); ++s)
        gaps.push_back(grid.points(s) - grid.points(s - 1));
    std::sort(gaps.begin(), gaps.end());
    const double median_gap = gaps[gaps.size() / 2];
    const double lo = 0.5 * median_gap;
    const double hi = grid.range();
    std::vector<double> scales;
    const int count = 10;
    for (int k = 0; k < count; ++k)
        scales.push_back(std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) *
                                                     static_cast<double>(k) / (count - 1)));
    return scales;
}

void PathConfig::validate() const {
    fit.validate();
    require(n_lambda >= 1, "n_lambda must be at least 1");
    require(lambda_min_ratio > 0.0 && lambda_min_ratio <= 1.0,
            "lambda_min_ratio must be in (0, 1]");
    require(std::isfinite(ebic_gamma) && ebic_gamma >= 0.0,
            "EBIC gamma must be nonnegative");
    require(weight_cap > 0.0, "weight cap must be positive");
    for (const double h : h_grid)
        require(std::isfinite(h) && h > 0.0, "kernel scales must be positive");
}

FitConfig PathResult::selected_config(const FitConfig& base) const {
    const PathEntry& entry = selected_entry();
    FitConfig cfg = base;
    cfg.kernel.scale = entry.h;
    cfg.penalty = entry.penalty;
    cfg.penalty.lambda = entry.lambda;
    cfg.init_params = entry.calibration;
    return cfg;
}

PathResult fit_path(const LongitudinalDataset& data, const TimeGrid& grid,
                    const PathConfig& cfg) {
    cfg.validate();
    require(static_cast<Index>(cfg.fit.penalty.penalized.size()) ==
                data.n_covariates(),
            "penalty mask length must match the number of covariates");
    const std::vector<double> scales =
        cfg.h_grid.empty() ? default_h_grid(grid) : cfg.h_grid;

    std::vector<std::vector<PathEntry>> per_scale(scales.size());
    parallel_for(scales.size(), cfg.threads, [&](std::size_t hi) {
        const double h = scales[hi];
        FitConfig fit_cfg = cfg.fit;
        fit_cfg.kernel.scale = h;
        FitEngine engine(data, grid, fit_cfg.kernel);

        // The unpenalized stage only feeds the adaptive weights and the
        // calibration covariance; stop it at a score-scaled tolerance so
        // large problems do not burn the absolute-score iteration cap.
        FitConfig mle_cfg = fit_cfg;
        engine.set_covariance(mle_cfg.init_params);
        const double score_scale =
            engine.estimating_function(Matrix::Zero(engine.n_rows(), engine.n_points()))
                .cwiseAbs()
                .maxCoeff();
        mle_cfg.tol = std::max(fit_cfg.tol, 1e-9 * (1.0 + score_scale));
        FitResult mle = fit_unpenalized(engine, mle_cfg);
        const AdaptiveWeights weights =
            adaptive_weights(mle.coefficients.values, fit_cfg.penalty.gamma,
                             fit_cfg.penalty.penalized, cfg.weight_cap);
        fit_cfg.penalty.group_weights = weights.group;
        fit_cfg.penalty.entry_weights = weights.entry;
        fit_cfg.init_params = mle.params;

        engine.set_covariance(mle.params);
        const double max_lambda = lambda_max(engine, fit_cfg);
        const std::vector<double> lambdas =
            max_lambda > 0.0
                ? log_spaced_descending(max_lambda,
                                        max_lambda * cfg.lambda_min_ratio, cfg.n_lambda)
                : std::vector<double>{0.0};

        Matrix warm;
        bool have_warm = false;
        for (const double lambda : lambdas) {
            fit_cfg.penalty.lambda = lambda;
            PathEntry entry;
            entry.h = h;
            entry.lambda = lambda;
            entry.fit = fit_penalized(engine, fit_cfg, have_warm ? &warm : nullptr);
            entry.penalty = fit_cfg.penalty;
            entry.calibration = mle.params;
            entry.df = degrees_of_freedom(entry.fit.coefficients);
            // Selection statistic: the quasi-log-likelihood of every entry is
            // evaluated under the shared calibration covariance (re-estimating
            // the noise variance per entry lets misfitting sparse models hide
            // their misfit in an inflated sigma2); the model size is the
            // kernel-overlap-adjusted count, and the BIC sample size is the
            // number of independent clusters.
            const double loglik = quasi_loglik(
                engine.residuals(entry.fit.coefficients.values),
                engine.subject_times(), mle.params);
            const double df =
                smoothed_degrees_of_freedom(entry.fit.coefficients, fit_cfg.kernel);
            entry.ebic = -2.0 * loglik +
                         df * std::log(static_cast<double>(data.n_obs_total())) +
                         2.0 * cfg.ebic_gamma * df *
                             std::log(static_cast<double>(data.n_covariates() *
                                                          grid.size()));
            // only a converged fit seeds the next warm start; slow drift
            // along nearly-null score modes must not ride down the path
            warm = entry.fit.coefficients.values;
            have_warm = entry.fit.converged;
            per_scale[hi].push_back(std::move(entry));
        }
    });

    PathResult result;
    for (auto& block : per_scale)
        for (auto& entry : block) result.entries.push_back(std::move(entry));
    require(!result.entries.empty(), "empty regularization path");

    result.selected = 0;
    for (std::size_t k = 1; k < result.entries.size(); ++k) {
        const PathEntry& candidate = result.entries[k];
        const PathEntry& incumbent = result.entries[result.selected];
        const bool better =
            candidate.ebic < incumbent.ebic ||
            (candidate.ebic == incumbent.ebic &&
             (candidate.lambda > incumbent.lambda ||
              (candidate.lambda == incumbent.lambda && candidate.h > incumbent.h)));
        if (better) result.selected = k;
    }
    return result;
}

}  // namespace lsvcmm
