#include "lsvcmm/inference.hpp"

#include "lsvcmm/parallel.hpp"
#include "lsvcmm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lsvcmm {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument(message);
}

constexpr int kMaxAttempts = 10;

Matrix entrywise_sd(const std::vector<Matrix>& draws, Index rows, Index cols) {
    Matrix mean = Matrix::Zero(rows, cols);
    for (const auto& draw : draws) mean += draw;
    mean /= static_cast<double>(draws.size());
    Matrix sq = Matrix::Zero(rows, cols);
    for (const auto& draw : draws) sq += (draw - mean).cwiseAbs2();
    return (sq / static_cast<double>(draws.size() - 1)).cwiseSqrt();
}

}  // namespace

void BandConfig::validate() const {
    require(n_boot >= 100, "at least 100 bootstrap replicates are required");
    require(level > 0.0 && level < 1.0, "band level must be in (0, 1)");
    require(threads >= 1, "threads must be at least 1");
}

double normal_quantile(double probability) {
    require(probability > 0.0 && probability < 1.0,
            "quantile probability must be in (0, 1)");
    // Acklam's rational approximation, then one Halley polish step.
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double p_low = 0.02425;
    double x;
    if (probability < p_low) {
        const double q = std::sqrt(-2.0 * std::log(probability));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (probability <= 1.0 - p_low) {
        const double q = probability - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - probability));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double error = 0.5 * std::erfc(-x / std::sqrt(2.0)) - probability;
    const double u = error * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

double sup_quantile(const std::vector<double>& draws, double level) {
    require(!draws.empty(), "no sup-statistic draws");
    require(level > 0.0 && level < 1.0, "band level must be in (0, 1)");
    std::vector<double> sorted(draws);
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    std::size_t index = static_cast<std::size_t>(
        std::floor(level * static_cast<double>(m + 1)));
    index = std::min(index + 1, m);  // strict order statistic, 1-based
    return sorted[index - 1];
}

double band_pvalue(const Matrix& row_draws, const Vector& row_estimate) {
    require(row_draws.cols() == row_estimate.size(),
            "draw matrix width does not match the estimate row");
    require(row_draws.rows() >= 2, "at least two bootstrap draws are required");
    if (row_estimate.isZero(0.0)) return 1.0;

    const Index m = row_draws.rows();
    Vector se(row_estimate.size());
    for (Index s = 0; s < row_estimate.size(); ++s) {
        const double mean = row_draws.col(s).mean();
        se(s) = std::sqrt((row_draws.col(s).array() - mean).square().sum() /
                          static_cast<double>(m - 1));
    }
    if (!(se.array() > 0.0).any()) return 1.0;

    double observed = 0.0;
    for (Index s = 0; s < se.size(); ++s)
        if (se(s) > 0.0)
            observed = std::max(observed, std::abs(row_estimate(s)) / se(s));

    Index exceed = 0;
    for (Index draw = 0; draw < m; ++draw) {
        double sup = 0.0;
        for (Index s = 0; s < se.size(); ++s)
            if (se(s) > 0.0)
                sup = std::max(sup,
                               std::abs(row_draws(draw, s) - row_estimate(s)) / se(s));
        if (sup >= observed) ++exceed;
    }
    return static_cast<double>(1 + exceed) / static_cast<double>(m + 1);
}

BandResult bootstrap_bands(const LongitudinalDataset& data, const TimeGrid& grid,
                           const FitConfig& selected,
                           const CoefficientMatrix& estimate, const BandConfig& cfg) {
    cfg.validate();
    selected.validate();
    selected.penalty.validate();
    data.validate();
    estimate.validate();
    require(estimate.n_rows() == data.n_covariates(),
            "estimate rows do not match the dataset covariates");

    const Index p = estimate.n_rows();
    const Index n_points = estimate.n_points();
    const std::size_t n_subjects = data.subjects.size();

    std::vector<Matrix> draws(static_cast<std::size_t>(cfg.n_boot));
    std::vector<char> success(static_cast<std::size_t>(cfg.n_boot), 0);

    parallel_for(static_cast<std::size_t>(cfg.n_boot), cfg.threads, [&](std::size_t rep) {
        for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
            Rng rng(derive_seed(cfg.seed, rep, static_cast<std::uint64_t>(attempt)));
            LongitudinalDataset resampled;
            resampled.covariate_names = data.covariate_names;
            resampled.subjects.reserve(n_subjects);
            for (std::size_t k = 0; k < n_subjects; ++k) {
                SubjectRecord subject =
                    data.subjects[rng.uniform_index(n_subjects)];
                subject.id = std::to_string(k);
                resampled.subjects.push_back(std::move(subject));
            }
            try {
                // warm start at the original estimate: deterministic and
                // much closer to the refit's fixed point than the default
                const FitResult refit =
                    fit_penalized(resampled, grid, selected, &estimate.values);
                if (!refit.converged) continue;  // counts as a failed refit
                draws[rep] = refit.coefficients.values;
                success[rep] = 1;
                return;
            } catch (const std::exception&) {
                // retry with a fresh resample
            }
        }
    });

    std::vector<Matrix> kept;
    kept.reserve(draws.size());
    for (std::size_t rep = 0; rep < draws.size(); ++rep)
        if (success[rep]) kept.push_back(std::move(draws[rep]));
    const int n_failed = cfg.n_boot - static_cast<int>(kept.size());
    if (static_cast<double>(n_failed) > 0.05 * static_cast<double>(cfg.n_boot))
        throw std::runtime_error("more than 5% of bootstrap refits failed (" +
                                 std::to_string(n_failed) + " of " +
                                 std::to_string(cfg.n_boot) + ")");

    BandResult result;
    result.level = cfg.level;
    result.n_boot = static_cast<int>(kept.size());
    result.n_failed = n_failed;
    result.se = entrywise_sd(kept, p, n_points);
    result.multipliers = Vector::Zero(p);
    result.p_values = Vector::Ones(p);

    for (Index j = 0; j < p; ++j) {
        Index n_valid = 0;
        for (Index s = 0; s < n_points; ++s)
            if (result.se(j, s) > 0.0) ++n_valid;
        if (n_valid == 0) continue;  // degenerate row: point band, p = 1

        std::vector<double> sups;
        sups.reserve(kept.size());
        for (const auto& draw : kept) {
            double sup = 0.0;
            for (Index s = 0; s < n_points; ++s)
                if (result.se(j, s) > 0.0)
                    sup = std::max(sup, std::abs(draw(j, s) - estimate.values(j, s)) /
                                            result.se(j, s));
            sups.push_back(sup);
        }
        result.multipliers(j) =
            cfg.bonferroni
                ? normal_quantile(1.0 - (1.0 - cfg.level) /
                                            (2.0 * static_cast<double>(n_valid)))
                : sup_quantile(sups, cfg.level);

        if (estimate.values.row(j).isZero(0.0)) continue;  // p = 1 by convention
        double observed = 0.0;
        for (Index s = 0; s < n_points; ++s)
            if (result.se(j, s) > 0.0)
                observed = std::max(observed, std::abs(estimate.values(j, s)) /
                                                  result.se(j, s));
        Index exceed = 0;
        for (const double sup : sups)
            if (sup >= observed) ++exceed;
        result.p_values(j) = static_cast<double>(1 + exceed) /
                             static_cast<double>(kept.size() + 1);
    }

    result.lower = estimate.values -
                   result.multipliers.asDiagonal() * Matrix(result.se);
    result.upper = estimate.values +
                   result.multipliers.asDiagonal() * Matrix(result.se);
    return result;
}

}  // namespace lsvcmm
