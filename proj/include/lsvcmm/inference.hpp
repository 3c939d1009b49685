#pragma once

#include "lsvcmm/estimator.hpp"

#include <cstdint>

namespace lsvcmm {

struct BandConfig {
    int n_boot = 1000;
    double level = 0.95;
    std::uint64_t seed = 0;
    int threads = 1;
    /// Cross-check mode: per-point normal quantile with a Bonferroni
    /// correction across the row instead of the bootstrap sup-t multiplier.
    bool bonferroni = false;

    void validate() const;
};

struct BandResult {
    Matrix lower;        // p x S
    Matrix upper;
    Matrix se;           // bootstrap standard errors; 0 marks degenerate entries
    Vector p_values;     // per covariate row
    Vector multipliers;  // per covariate row
    double level = 0.95;
    int n_boot = 0;   // successful replicates
    int n_failed = 0;
};

/// Standard normal quantile (Acklam's approximation polished with one
/// Halley step); used by the Bonferroni cross-check mode.
double normal_quantile(double probability);

/// Upper empirical quantile of sup-statistic draws, using the strict
/// (m+1)-convention order statistic so band exclusion at level 1-a agrees
/// exactly with p < a from band_pvalue.
double sup_quantile(const std::vector<double>& draws, double level);

/// Smallest nominal level at which the sup-t band built from the draws of
/// one covariate row excludes zero somewhere: 1 - F(max_s |b_s| / se_s),
/// with the add-one empirical tail. All-zero rows get p = 1 by convention.
double band_pvalue(const Matrix& row_draws, const Vector& row_estimate);

/// Cluster bootstrap: resamples whole subjects with replacement, refits at
/// the selected (h, lambda, alpha, weights) with the covariance re-estimated
/// per refit, and builds simultaneous sup-t bands around `estimate`.
/// Failed refits are retried with a fresh resample up to 10 times each;
/// more than 5% failed replicates is an error.
BandResult bootstrap_bands(const LongitudinalDataset& data, const TimeGrid& grid,
                           const FitConfig& selected,
                           const CoefficientMatrix& estimate,
                           const BandConfig& cfg);

}  // namespace lsvcmm
