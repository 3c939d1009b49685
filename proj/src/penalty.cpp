#include "lsvcmm/penalty.hpp"

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

}  // namespace

void PenaltyConfig::validate() const {
    require(std::isfinite(lambda) && lambda >= 0.0, "lambda must be nonnegative");
    require(std::isfinite(alpha) && alpha >= 0.0 && alpha <= 1.0,
            "alpha must be in [0, 1]");
    require(std::isfinite(gamma) && gamma > 0.0, "gamma must be positive");
    const Index p = group_weights.size();
    require(entry_weights.rows() == p, "entry weights rows mismatch group weights");
    require(static_cast<Index>(penalized.size()) == p,
            "penalty mask length mismatch");
    require((group_weights.array() >= 0.0).all() &&
                (entry_weights.array() >= 0.0).all(),
            "penalty weights must be nonnegative");
    for (Index j = 0; j < p; ++j)
        if (!penalized[static_cast<std::size_t>(j)])
            require(group_weights(j) == 0.0 && entry_weights.row(j).isZero(0.0),
                    "unpenalized rows must carry zero weights");
}

double penalty_value(const Matrix& coefficients, const PenaltyConfig& cfg) {
    cfg.validate();
    require(coefficients.rows() == cfg.group_weights.size() &&
                coefficients.cols() == cfg.entry_weights.cols(),
            "coefficient dimensions do not match the penalty weights");
    const double sqrt_s = std::sqrt(static_cast<double>(coefficients.cols()));
    double total = 0.0;
    for (Index j = 0; j < coefficients.rows(); ++j) {
        total += (1.0 - cfg.alpha) * sqrt_s * cfg.group_weights(j) *
                 coefficients.row(j).norm();
        total += cfg.alpha *
                 (cfg.entry_weights.row(j).array() *
                  coefficients.row(j).array().abs())
                     .sum();
    }
    return cfg.lambda * total;
}

AdaptiveWeights adaptive_weights(const Matrix& unpenalized_fit, double gamma,
                                 const std::vector<bool>& penalized, double cap) {
    require(gamma > 0.0, "gamma must be positive");
    require(cap > 0.0, "weight cap must be positive");
    require(static_cast<Index>(penalized.size()) == unpenalized_fit.rows(),
            "penalty mask length mismatch");
    AdaptiveWeights weights;
    weights.group = Vector::Zero(unpenalized_fit.rows());
    weights.entry = Matrix::Zero(unpenalized_fit.rows(), unpenalized_fit.cols());
    for (Index j = 0; j < unpenalized_fit.rows(); ++j) {
        if (!penalized[static_cast<std::size_t>(j)]) continue;
        const double row_norm = unpenalized_fit.row(j).norm();
        weights.group(j) =
            row_norm > 0.0 ? std::min(std::pow(row_norm, -gamma), cap) : cap;
        for (Index s = 0; s < unpenalized_fit.cols(); ++s) {
            const double magnitude = std::abs(unpenalized_fit(j, s));
            weights.entry(j, s) =
                magnitude > 0.0 ? std::min(std::pow(magnitude, -gamma), cap) : cap;
        }
    }
    return weights;
}

Vector prox_sgl(const Vector& row, double step, double lambda, double alpha,
                double group_weight, const Vector& entry_weights) {
    require(step > 0.0, "prox step must be positive");
    require(entry_weights.size() == row.size(), "entry weight length mismatch");
    const double sqrt_s = std::sqrt(static_cast<double>(row.size()));
    Vector out(row.size());
    for (Index s = 0; s < row.size(); ++s)
        out(s) = soft_threshold(row(s), step * lambda * alpha * entry_weights(s));
    const double norm = out.norm();
    if (norm == 0.0) return out;
    const double shrink =
        1.0 - step * lambda * (1.0 - alpha) * sqrt_s * group_weight / norm;
    return shrink > 0.0 ? Vector(out * shrink) : Vector(Vector::Zero(row.size()));
}

Matrix prox_sgl_rows(const Matrix& coefficients, double step, const PenaltyConfig& cfg) {
    Matrix out(coefficients.rows(), coefficients.cols());
    for (Index j = 0; j < coefficients.rows(); ++j)
        out.row(j) = prox_sgl(coefficients.row(j), step, cfg.lambda, cfg.alpha,
                              cfg.group_weights(j), cfg.entry_weights.row(j));
    return out;
}

}  // namespace lsvcmm
