#pragma once

#include "lsvcmm/covariance.hpp"
#include "lsvcmm/data.hpp"
#include "lsvcmm/penalty.hpp"

#include <limits>
#include <vector>

namespace lsvcmm {

struct FitConfig {
    KernelConfig kernel;
    PenaltyConfig penalty;
    VarianceParams init_params;
    int max_iter = 5000;
    double tol = 1e-6;
    int covariance_cycles = 2;

    void validate() const;
};

struct FitResult {
    CoefficientMatrix coefficients;
    VarianceParams params;
    /// Accepted step norms; nonincreasing within each mean-update phase by
    /// the line-search acceptance rule.
    std::vector<double> objective_trace;
    std::vector<std::size_t> phase_starts;
    int iterations = 0;
    bool converged = true;
    double quasi_loglik = std::numeric_limits<double>::quiet_NaN();
    /// Largest violation of the stationarity condition over nonzero entries
    /// of penalized rows and all entries of unpenalized rows.
    double kkt_residual = std::numeric_limits<double>::quiet_NaN();
    double step_size = std::numeric_limits<double>::quiet_NaN();
};

/// Precomputed per-subject state for one (dataset, grid, kernel) triple:
/// kernel weights, observation-to-grid mapping, and the working precision.
/// The estimating function evaluated here is
///   U(B) column s = -sum_i X_i' diag(k_i(t_s)) V_i^{-1} (y_i - m_i(B)).
class FitEngine {
public:
    FitEngine(const LongitudinalDataset& data, const TimeGrid& grid,
              const KernelConfig& kernel);

    void set_covariance(const VarianceParams& params);
    [[nodiscard]] const VarianceParams& covariance() const { return params_; }

    [[nodiscard]] Matrix estimating_function(const Matrix& coefficients) const;

    /// Directional derivative of the estimating function; the estimating
    /// function is affine in the coefficients at fixed covariance.
    [[nodiscard]] Matrix curvature_product(const Matrix& direction) const;

    /// Power-iteration estimate of the spectral norm of the curvature map;
    /// cached per covariance setting.
    [[nodiscard]] double curvature_norm() const;

    [[nodiscard]] std::vector<Vector> residuals(const Matrix& coefficients) const;

    [[nodiscard]] const LongitudinalDataset& data() const { return *data_; }
    [[nodiscard]] const TimeGrid& grid() const { return grid_; }
    [[nodiscard]] const KernelConfig& kernel() const { return kernel_; }
    [[nodiscard]] const std::vector<Vector>& subject_times() const { return times_; }
    [[nodiscard]] Index n_rows() const { return data_->n_covariates(); }
    [[nodiscard]] Index n_points() const { return grid_.size(); }
    [[nodiscard]] double grid_mass(Index s) const { return grid_mass_(s); }

private:
    Matrix curvature_adjoint(const Matrix& direction) const;
    void ensure_affine_cache() const;

    struct SubjectCache {
        Matrix kernel;                   // n_obs x S, truncated weights
        std::vector<Index> active_cols;  // grid columns with any nonzero weight
        std::vector<Index> grid_index;   // grid column of each observation
        PrecisionOperator precision;
    };

    const LongitudinalDataset* data_;
    TimeGrid grid_;
    KernelConfig kernel_;
    std::vector<Vector> times_;
    std::vector<SubjectCache> subjects_;
    Vector grid_mass_;  // total kernel weight reaching each grid point
    VarianceParams params_;
    mutable std::vector<std::pair<VarianceParams, double>> curvature_cache_;
    // Dense cache of the affine score map at the current covariance,
    // U(vec B) = score_zero_ + system_ vec B; built lazily for problems
    // small enough that the matvec beats per-subject accumulation.
    mutable bool affine_cached_ = false;
    mutable Matrix system_;
    mutable Vector score_zero_;
};

/// Estimating function for arbitrary inputs (one-shot engine).
Matrix estimating_function(const LongitudinalDataset& data,
                           const CoefficientMatrix& coefficients,
                           const VarianceParams& params, const KernelConfig& kernel);

/// Damped-iteration solve of the stationarity system U(B) = 0 over the rows
/// flagged free, the rest pinned at zero. Stops when the free-row score
/// drops below tol_scale relative to its starting magnitude.
Matrix restricted_stationary_fit(const FitEngine& engine,
                                 const std::vector<bool>& free_rows,
                                 double tol_scale = 1e-9, int max_iter = 50000);

/// Unpenalized fit: damped score iteration alternated with covariance
/// updates, stopping when |U|_inf < tol. Errors when some grid point
/// receives no kernel mass; non-convergence within max_iter is flagged.
FitResult fit_unpenalized(const LongitudinalDataset& data, const TimeGrid& grid,
                          const FitConfig& cfg);
FitResult fit_unpenalized(FitEngine& engine, const FitConfig& cfg);

/// Penalized fit by proximal gradient steps on the estimating function with
/// a backtracking step size, alternated with covariance updates; stops when
/// the relative coefficient change drops below tol. Starts from zeros on
/// penalized rows and the restricted stationary values on unpenalized rows
/// unless `initial` is given.
FitResult fit_penalized(const LongitudinalDataset& data, const TimeGrid& grid,
                        const FitConfig& cfg, const Matrix* initial = nullptr);
FitResult fit_penalized(FitEngine& engine, const FitConfig& cfg,
                        const Matrix* initial = nullptr);

}  // namespace lsvcmm
