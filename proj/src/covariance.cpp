#include "lsvcmm/covariance.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

namespace lsvcmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kRatioMax = 1e3;
constexpr double kRatioMin = 1e-8;

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument(message);
}

double golden_section(const std::function<double(double)>& f, double a, double b,
                      int iterations) {
    const double inv_phi = 0.6180339887498949;
    double x1 = b - inv_phi * (b - a);
    double x2 = a + inv_phi * (b - a);
    double f1 = f(x1);
    double f2 = f(x2);
    for (int it = 0; it < iterations; ++it) {
        if (f1 <= f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    return f1 <= f2 ? x1 : x2;
}

Matrix unscaled_working_matrix(const Vector& times, CovarianceFamily family,
                               double ratio, double rho) {
    const Index n = times.size();
    Matrix w = Matrix::Identity(n, n);
    switch (family) {
        case CovarianceFamily::Independent:
            break;
        case CovarianceFamily::CompoundSymmetry:
            w.array() += ratio;
            break;
        case CovarianceFamily::AR1:
            for (Index a = 0; a < n; ++a)
                for (Index b = 0; b < n; ++b)
                    w(a, b) += ratio * std::pow(rho, std::abs(times(a) - times(b)));
            break;
    }
    return w;
}

// Sum over subjects of r' W^{-1} r and log det W for W = K + I at unit noise
// variance; the noise variance is profiled out of these two quantities.
struct ProfileTerms {
    double quad = 0.0;
    double log_det = 0.0;
};

ProfileTerms profile_terms(const std::vector<Vector>& residuals,
                           const std::vector<Vector>& times,
                           CovarianceFamily family, double ratio, double rho) {
    ProfileTerms terms;
    for (std::size_t i = 0; i < residuals.size(); ++i) {
        const Vector& r = residuals[i];
        const Index n = r.size();
        switch (family) {
            case CovarianceFamily::Independent:
                terms.quad += r.squaredNorm();
                break;
            case CovarianceFamily::CompoundSymmetry: {
                const double total = r.sum();
                const double shrink = ratio / (1.0 + static_cast<double>(n) * ratio);
                terms.quad += r.squaredNorm() - shrink * total * total;
                terms.log_det += std::log1p(static_cast<double>(n) * ratio);
                break;
            }
            case CovarianceFamily::AR1: {
                const Matrix w = unscaled_working_matrix(times[i], family, ratio, rho);
                Eigen::LLT<Matrix> chol(w);
                if (chol.info() != Eigen::Success)
                    throw std::runtime_error("working covariance factorization failed");
                terms.quad += r.dot(chol.solve(r));
                terms.log_det +=
                    2.0 * chol.matrixL().toDenseMatrix().diagonal().array().log().sum();
                break;
            }
        }
    }
    return terms;
}

// Negative profiled log-likelihood up to constants; lower is better.
double profile_objective(const std::vector<Vector>& residuals,
                         const std::vector<Vector>& times, Index n_total,
                         CovarianceFamily family, double ratio, double rho) {
    const ProfileTerms terms = profile_terms(residuals, times, family, ratio, rho);
    if (!(terms.quad > 0.0)) return std::numeric_limits<double>::infinity();
    return static_cast<double>(n_total) * std::log(terms.quad / static_cast<double>(n_total)) +
           terms.log_det;
}

std::vector<double> log_spaced(double lo, double hi, int count) {
    std::vector<double> values(static_cast<std::size_t>(count));
    const double step = (std::log(hi) - std::log(lo)) / (count - 1);
    for (int k = 0; k < count; ++k)
        values[static_cast<std::size_t>(k)] = std::exp(std::log(lo) + step * k);
    return values;
}

}  // namespace

std::string family_name(CovarianceFamily family) {
    switch (family) {
        case CovarianceFamily::Independent: return "independent";
        case CovarianceFamily::CompoundSymmetry: return "compound_symmetry";
        case CovarianceFamily::AR1: return "ar1";
    }
    return "independent";
}

CovarianceFamily family_from_name(const std::string& name) {
    if (name == "independent") return CovarianceFamily::Independent;
    if (name == "compound_symmetry" || name == "cs")
        return CovarianceFamily::CompoundSymmetry;
    if (name == "ar1") return CovarianceFamily::AR1;
    throw std::invalid_argument("unknown covariance family '" + name + "'");
}

void VarianceParams::validate() const {
    require(std::isfinite(sigma2) && sigma2 > 0.0, "sigma2 must be positive");
    require(std::isfinite(ratio) && ratio >= 0.0, "variance ratio must be nonnegative");
    require(std::isfinite(rho) && rho >= 0.0 && rho < 1.0, "AR1 rho must be in [0, 1)");
}

Matrix covariance_matrix(const Vector& times, const VarianceParams& params) {
    params.validate();
    require(times.allFinite(), "times must be finite");
    return params.sigma2 *
           unscaled_working_matrix(times, params.family, params.ratio, params.rho);
}

Vector solve_precision(const Matrix& covariance, const Vector& rhs) {
    Eigen::LLT<Matrix> chol(covariance);
    if (chol.info() != Eigen::Success)
        throw std::runtime_error("covariance matrix is not positive definite");
    return chol.solve(rhs);
}

Matrix solve_precision(const Matrix& covariance, const Matrix& rhs) {
    Eigen::LLT<Matrix> chol(covariance);
    if (chol.info() != Eigen::Success)
        throw std::runtime_error("covariance matrix is not positive definite");
    return chol.solve(rhs);
}

PrecisionOperator::PrecisionOperator(const Vector& times, const VarianceParams& params)
    : family_(params.family), sigma2_(params.sigma2), n_(times.size()) {
    params.validate();
    const double n = static_cast<double>(n_);
    switch (family_) {
        case CovarianceFamily::Independent:
            log_det_ = n * std::log(sigma2_);
            break;
        case CovarianceFamily::CompoundSymmetry:
            shrink_ = params.ratio / (1.0 + n * params.ratio);
            log_det_ = n * std::log(sigma2_) + std::log1p(n * params.ratio);
            break;
        case CovarianceFamily::AR1: {
            const Matrix w =
                unscaled_working_matrix(times, family_, params.ratio, params.rho);
            chol_.compute(w);
            if (chol_.info() != Eigen::Success)
                throw std::runtime_error("covariance matrix is not positive definite");
            log_det_ = n * std::log(sigma2_) +
                       2.0 * chol_.matrixL().toDenseMatrix().diagonal().array().log().sum();
            break;
        }
    }
}

Vector PrecisionOperator::apply(const Vector& rhs) const {
    switch (family_) {
        case CovarianceFamily::Independent:
            return rhs / sigma2_;
        case CovarianceFamily::CompoundSymmetry:
            return (rhs.array() - shrink_ * rhs.sum()).matrix() / sigma2_;
        case CovarianceFamily::AR1:
            return chol_.solve(rhs) / sigma2_;
    }
    return rhs;
}

double PrecisionOperator::quad_form(const Vector& residual) const {
    return residual.dot(apply(residual));
}

double PrecisionOperator::log_det_covariance() const { return log_det_; }

Matrix PrecisionOperator::dense_inverse() const {
    Matrix identity = Matrix::Identity(n_, n_);
    Matrix out(n_, n_);
    for (Index c = 0; c < n_; ++c) out.col(c) = apply(identity.col(c));
    return out;
}

double quasi_loglik(const std::vector<Vector>& residuals,
                    const std::vector<Vector>& times, const VarianceParams& params) {
    params.validate();
    require(residuals.size() == times.size(),
            "residuals and times must have one entry per subject");
    double loglik = 0.0;
    for (std::size_t i = 0; i < residuals.size(); ++i) {
        require(residuals[i].size() == times[i].size(),
                "residual/time length mismatch within a subject");
        const PrecisionOperator precision(times[i], params);
        loglik -= 0.5 * (static_cast<double>(residuals[i].size()) * kLog2Pi +
                         precision.log_det_covariance() +
                         precision.quad_form(residuals[i]));
    }
    return loglik;
}

VarianceParams update_covariance(const std::vector<Vector>& residuals,
                                 const std::vector<Vector>& times,
                                 CovarianceFamily family,
                                 const VarianceParams& current) {
    require(residuals.size() == times.size() && !residuals.empty(),
            "residuals and times must have one entry per subject");
    Index n_total = 0;
    Index max_obs = 0;
    double sum_sq = 0.0;
    for (const auto& r : residuals) {
        n_total += r.size();
        max_obs = std::max(max_obs, r.size());
        sum_sq += r.squaredNorm();
    }
    if (!(sum_sq > 0.0))
        throw std::runtime_error("cannot estimate a noise variance from all-zero residuals");
    if (family != CovarianceFamily::Independent)
        require(max_obs >= 2,
                "variance ratio is unidentifiable without repeated measures");

    VarianceParams fitted;
    fitted.family = family;

    if (family == CovarianceFamily::Independent) {
        fitted.sigma2 = sum_sq / static_cast<double>(n_total);
        return fitted;
    }

    auto objective = [&](double ratio, double rho) {
        return profile_objective(residuals, times, n_total, family, ratio, rho);
    };

    // Coarse scan over the ratio (and AR1 decay), then golden-section
    // refinement between the neighbours of the best scan point.
    std::vector<double> ratio_grid{0.0};
    const int scan_points = family == CovarianceFamily::CompoundSymmetry ? 25 : 13;
    for (double r : log_spaced(kRatioMin, kRatioMax, scan_points)) ratio_grid.push_back(r);

    std::vector<double> rho_grid{0.0};
    if (family == CovarianceFamily::AR1)
        for (int k = 1; k < 20; ++k) rho_grid.push_back(0.05 * k);

    double best_ratio = 0.0, best_rho = 0.0;
    double best_value = std::numeric_limits<double>::infinity();
    std::size_t best_ratio_at = 0, best_rho_at = 0;
    for (std::size_t a = 0; a < ratio_grid.size(); ++a) {
        for (std::size_t b = 0; b < rho_grid.size(); ++b) {
            const double value = objective(ratio_grid[a], rho_grid[b]);
            if (value < best_value) {
                best_value = value;
                best_ratio = ratio_grid[a];
                best_rho = rho_grid[b];
                best_ratio_at = a;
                best_rho_at = b;
            }
        }
    }

    const int rounds = family == CovarianceFamily::AR1 ? 3 : 1;
    for (int round = 0; round < rounds; ++round) {
        const double lo =
            best_ratio_at == 0 ? kRatioMin / 10.0 : ratio_grid[best_ratio_at - 1];
        const double hi = best_ratio_at + 1 < ratio_grid.size()
                              ? ratio_grid[best_ratio_at + 1]
                              : kRatioMax;
        const double log_ratio = golden_section(
            [&](double u) { return objective(std::exp(u), best_rho); }, std::log(lo),
            std::log(hi), 70);
        const double refined = std::exp(log_ratio);
        if (objective(refined, best_rho) < best_value) {
            best_ratio = refined;
            best_value = objective(refined, best_rho);
        }
        if (family == CovarianceFamily::AR1) {
            const double rho_lo = best_rho_at == 0 ? 0.0 : rho_grid[best_rho_at - 1];
            const double rho_hi =
                best_rho_at + 1 < rho_grid.size() ? rho_grid[best_rho_at + 1] : 0.999;
            const double rho = golden_section(
                [&](double x) { return objective(best_ratio, x); }, rho_lo, rho_hi, 70);
            if (objective(best_ratio, rho) < best_value) {
                best_rho = rho;
                best_value = objective(best_ratio, rho);
            }
        }
    }
    if (objective(0.0, best_rho) <= best_value) best_ratio = 0.0;

    const ProfileTerms terms = profile_terms(residuals, times, family, best_ratio, best_rho);
    fitted.ratio = best_ratio;
    fitted.rho = best_rho;
    fitted.sigma2 = terms.quad / static_cast<double>(n_total);
    if (!(fitted.sigma2 > 0.0))
        throw std::runtime_error("profiled noise variance is degenerate");

    // Monotone-improvement contract relative to the incoming parameters.
    if (current.family == family) {
        const double new_ll = quasi_loglik(residuals, times, fitted);
        const double old_ll = quasi_loglik(residuals, times, current);
        if (old_ll > new_ll) return current;
    }
    return fitted;
}

}  // namespace lsvcmm
