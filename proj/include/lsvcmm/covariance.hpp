#pragma once

#include "lsvcmm/data.hpp"

#include <string>
#include <vector>

namespace lsvcmm {

enum class CovarianceFamily { Independent, CompoundSymmetry, AR1 };

std::string family_name(CovarianceFamily family);
CovarianceFamily family_from_name(const std::string& name);

/// Working-covariance parameters: marginal covariance of a subject observed
/// at times t is sigma2 * (K(t) + I), where K is zero (Independent), the
/// constant ratio (CompoundSymmetry), or ratio * rho^|t - t'| (AR1).
struct VarianceParams {
    CovarianceFamily family = CovarianceFamily::Independent;
    double sigma2 = 1.0;
    double ratio = 0.0;  // random-effect variance relative to sigma2
    double rho = 0.0;    // AR1 decay, in [0, 1)

    void validate() const;
};

/// Dense marginal covariance of one subject.
Matrix covariance_matrix(const Vector& times, const VarianceParams& params);

/// V^{-1} rhs through a symmetric (Cholesky) factorization. Throws when the
/// matrix is not numerically SPD.
Vector solve_precision(const Matrix& covariance, const Vector& rhs);
Matrix solve_precision(const Matrix& covariance, const Matrix& rhs);

/// Structure-aware precision of one subject: O(n) for Independent and
/// compound symmetry (rank-one update identity), dense Cholesky for AR1.
class PrecisionOperator {
public:
    PrecisionOperator() = default;
    PrecisionOperator(const Vector& times, const VarianceParams& params);

    [[nodiscard]] Vector apply(const Vector& rhs) const;
    [[nodiscard]] double quad_form(const Vector& residual) const;
    [[nodiscard]] double log_det_covariance() const;
    [[nodiscard]] Matrix dense_inverse() const;

private:
    CovarianceFamily family_ = CovarianceFamily::Independent;
    double sigma2_ = 1.0;
    double shrink_ = 0.0;  // ratio / (1 + n * ratio) for compound symmetry
    double log_det_ = 0.0;
    Index n_ = 0;
    Eigen::LLT<Matrix> chol_;  // AR1 only, factor of (K + I)
};

/// Gaussian quasi-log-likelihood of per-subject residuals:
/// -1/2 sum_i [log det(2 pi V_i) + r_i' V_i^{-1} r_i].
double quasi_loglik(const std::vector<Vector>& residuals,
                    const std::vector<Vector>& times,
                    const VarianceParams& params);

/// Maximizes the quasi-log-likelihood over the family's parameters with the
/// noise variance profiled out in closed form; the ratio (and AR1 decay) are
/// found by a coarse scan plus golden-section refinement. Never returns
/// parameters worse than `current`.
VarianceParams update_covariance(const std::vector<Vector>& residuals,
                                 const std::vector<Vector>& times,
                                 CovarianceFamily family,
                                 const VarianceParams& current);

}  // namespace lsvcmm
