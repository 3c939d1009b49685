#pragma once

#include "lsvcmm/estimator.hpp"

#include <vector>

namespace lsvcmm {

/// Nonzero entries of penalized rows plus every entry of unpenalized rows.
long degrees_of_freedom(const CoefficientMatrix& coefficients);

/// Kernel-overlap-adjusted model size: each active grid point contributes
/// its share of the kernel mass over the active region of its row,
/// k(0) / sum_{s' active} k(t_s - t_s'), so a dense block of points under a
/// wide kernel counts as a few bandwidths while isolated points (or any
/// pointwise kernel) count as one each.
double smoothed_degrees_of_freedom(const CoefficientMatrix& coefficients,
                                   const KernelConfig& kernel);

/// Extended BIC: -2 loglik + df log(n_obs) + 2 gamma df log(p S).
double ebic(const FitResult& fit, const LongitudinalDataset& data, double ebic_gamma);

/// Smallest lambda at which the zero solution (restricted stationary values
/// on unpenalized rows) stays a fixed point of the whole penalized fit,
/// including its covariance re-weighting cycles. The kill condition is
/// rooted under each covariance along the refresh sequence and then
/// verified by an actual fit, nudging lambda up if a row resurrects.
double lambda_max(FitEngine& engine, const FitConfig& cfg);
double lambda_max(const LongitudinalDataset& data, const TimeGrid& grid,
                  const KernelConfig& kernel, const VarianceParams& params,
                  const PenaltyConfig& penalty);

/// Ten log-spaced kernel scales from half the median grid gap to the range.
std::vector<double> default_h_grid(const TimeGrid& grid);

struct PathConfig {
    std::vector<double> h_grid;  // empty: default_h_grid of the fit grid
    int n_lambda = 30;
    double lambda_min_ratio = 1e-3;
    double ebic_gamma = 0.25;
    double weight_cap = kWeightCap;
    FitConfig fit;  // alpha/gamma/mask from fit.penalty; weights are derived
    int threads = 1;

    void validate() const;
};

struct PathEntry {
    double h = 0.0;
    double lambda = 0.0;
    FitResult fit;
    PenaltyConfig penalty;  // includes the adaptive weights used at this h
    /// Covariance the lambda grid was calibrated against (the unpenalized
    /// fit at this kernel scale); refits at this lambda must start from it.
    VarianceParams calibration;
    long df = 0;
    double ebic = 0.0;
};

struct PathResult {
    std::vector<PathEntry> entries;
    std::size_t selected = 0;

    [[nodiscard]] const PathEntry& selected_entry() const { return entries.at(selected); }

    /// Fit configuration pinned at the selected (h, lambda, weights) with the
    /// selected covariance as starting values; suitable for bootstrap refits.
    [[nodiscard]] FitConfig selected_config(const FitConfig& base) const;
};

/// Regularization path over (h, lambda): per kernel scale, an unpenalized
/// fit feeds the adaptive weights and the lambda grid, which is descended
/// with warm starts. Selection minimizes an information criterion built
/// from the quasi-log-likelihood under the calibration covariance, a
/// cluster-count BIC term, and an optional model-space term; ties resolve
/// toward larger lambda then larger h.
PathResult fit_path(const LongitudinalDataset& data, const TimeGrid& grid,
                    const PathConfig& cfg);

}  // namespace lsvcmm
