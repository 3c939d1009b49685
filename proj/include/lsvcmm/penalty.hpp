#pragma once

#include "lsvcmm/data.hpp"

#include <vector>

namespace lsvcmm {

/// Cap applied to adaptive weights so coefficients with a zero unpenalized
/// estimate stay maximally penalized without producing non-finite weights.
constexpr double kWeightCap = 1e6;

/// Sparse group Lasso configuration. Row j contributes
///   lambda * [(1 - alpha) * sqrt(S) * group_weights[j] * ||b_j||_2
///             + alpha * sum_s entry_weights(j, s) * |b_j^(s)|].
/// Rows with penalized[j] == false must carry all-zero weights.
struct PenaltyConfig {
    double lambda = 0.0;
    double alpha = 0.5;
    double gamma = 1.0;  // adaptive-weight exponent
    Vector group_weights;
    Matrix entry_weights;
    std::vector<bool> penalized;

    void validate() const;
};

double penalty_value(const Matrix& coefficients, const PenaltyConfig& cfg);

struct AdaptiveWeights {
    Vector group;
    Matrix entry;
};

/// Inverse-magnitude weights from an unpenalized fit, ||b_j||^-gamma per row
/// and |b_j^(s)|^-gamma per entry, clipped at `cap`; unpenalized rows get 0.
AdaptiveWeights adaptive_weights(const Matrix& unpenalized_fit, double gamma,
                                 const std::vector<bool>& penalized,
                                 double cap = kWeightCap);

/// Proximal operator of one row of the penalty at step size kappa:
/// elementwise soft-thresholding at kappa * lambda * alpha * entry_weight,
/// then group shrinkage by max(0, 1 - kappa * lambda * (1-alpha) * sqrt(S) *
/// group_weight / ||.||).
Vector prox_sgl(const Vector& row, double step, double lambda, double alpha,
                double group_weight, const Vector& entry_weights);

/// Row-wise proximal operator over the whole coefficient matrix.
Matrix prox_sgl_rows(const Matrix& coefficients, double step, const PenaltyConfig& cfg);

}  // namespace lsvcmm
