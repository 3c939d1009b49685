#include "lsvcmm/estimator.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lsvcmm {

namespace {

constexpr double kStepFloor = 1e-12;
constexpr Index kAffineCacheLimit = 2000;  // flattened size p * S

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument(message);
}

bool same_params(const VarianceParams& a, const VarianceParams& b) {
    return a.family == b.family && a.sigma2 == b.sigma2 && a.ratio == b.ratio &&
           a.rho == b.rho;
}

}  // namespace

void FitConfig::validate() const {
    kernel.validate();
    init_params.validate();
    require(max_iter >= 1, "max_iter must be at least 1");
    require(std::isfinite(tol) && tol > 0.0, "tolerance must be positive");
    require(covariance_cycles >= 1, "covariance_cycles must be at least 1");
}

FitEngine::FitEngine(const LongitudinalDataset& data, const TimeGrid& grid,
                     const KernelConfig& kernel)
    : data_(&data), grid_(grid), kernel_(kernel) {
    data.validate();
    grid.validate();
    kernel.validate();
    const auto indices = grid_indices(data, grid);
    const Index n_points = grid.size();
    grid_mass_ = Vector::Zero(n_points);
    subjects_.resize(data.subjects.size());
    times_.reserve(data.subjects.size());
    for (std::size_t i = 0; i < data.subjects.size(); ++i) {
        const auto& subject = data.subjects[i];
        auto& cache = subjects_[i];
        cache.grid_index = indices[i];
        cache.kernel = Matrix::Zero(subject.n_obs(), n_points);
        for (Index s = 0; s < n_points; ++s) {
            bool any = false;
            for (Index n = 0; n < subject.n_obs(); ++n) {
                const double w =
                    kernel_weight(grid.points(s) - subject.times(n), kernel);
                cache.kernel(n, s) = w;
                any = any || w > 0.0;
            }
            if (any) cache.active_cols.push_back(s);
            grid_mass_(s) += cache.kernel.col(s).sum();
        }
        times_.push_back(subject.times);
    }
    set_covariance(VarianceParams{});
}

void FitEngine::set_covariance(const VarianceParams& params) {
    params.validate();
    params_ = params;
    affine_cached_ = false;
    for (std::size_t i = 0; i < subjects_.size(); ++i)
        subjects_[i].precision = PrecisionOperator(times_[i], params);
}

void FitEngine::ensure_affine_cache() const {
    if (affine_cached_) return;
    const Index p = n_rows();
    const Index dim = p * n_points();
    system_ = Matrix::Zero(dim, dim);
    score_zero_ = Vector::Zero(dim);
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
        const auto& subject = data_->subjects[i];
        const auto& cache = subjects_[i];
        const Matrix precision = cache.precision.dense_inverse();
        const Vector weighted_y = cache.precision.apply(subject.responses);
        for (const Index s : cache.active_cols) {
            const Vector k_col = cache.kernel.col(s);
            const Vector gy =
                subject.design.transpose() * k_col.cwiseProduct(weighted_y);
            score_zero_.segment(s * p, p) -= gy;
            // coupling of grid column s with the column of every observation
            const Matrix t = subject.design.transpose() * k_col.asDiagonal() * precision;
            for (Index n2 = 0; n2 < subject.n_obs(); ++n2) {
                const Index s2 = cache.grid_index[static_cast<std::size_t>(n2)];
                for (Index j2 = 0; j2 < p; ++j2) {
                    const double x2 = subject.design(n2, j2);
                    if (x2 == 0.0) continue;
                    system_.block(s * p, s2 * p + j2, p, 1) += t.col(n2) * x2;
                }
            }
        }
    }
    affine_cached_ = true;
}

Matrix FitEngine::estimating_function(const Matrix& coefficients) const {
    require(coefficients.rows() == n_rows() && coefficients.cols() == n_points(),
            "coefficient dimensions do not match the engine");
    if (n_rows() * n_points() <= kAffineCacheLimit) {
        ensure_affine_cache();
        const Eigen::Map<const Vector> flat(coefficients.data(),
                                            coefficients.size());
        Vector score = score_zero_ + system_ * flat;
        return Eigen::Map<Matrix>(score.data(), n_rows(), n_points());
    }
    Matrix score = Matrix::Zero(n_rows(), n_points());
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
        const auto& subject = data_->subjects[i];
        const auto& cache = subjects_[i];
        Vector residual(subject.n_obs());
        for (Index n = 0; n < subject.n_obs(); ++n)
            residual(n) =
                subject.responses(n) -
                subject.design.row(n).dot(
                    coefficients.col(cache.grid_index[static_cast<std::size_t>(n)]));
        const Vector weighted = cache.precision.apply(residual);
        for (const Index s : cache.active_cols)
            score.col(s) -=
                subject.design.transpose() * cache.kernel.col(s).cwiseProduct(weighted);
    }
    return score;
}

Matrix FitEngine::curvature_product(const Matrix& direction) const {
    if (n_rows() * n_points() <= kAffineCacheLimit) {
        ensure_affine_cache();
        const Eigen::Map<const Vector> flat(direction.data(), direction.size());
        Vector out = system_ * flat;
        return Eigen::Map<Matrix>(out.data(), n_rows(), n_points());
    }
    Matrix out = Matrix::Zero(n_rows(), n_points());
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
        const auto& subject = data_->subjects[i];
        const auto& cache = subjects_[i];
        Vector shift(subject.n_obs());
        for (Index n = 0; n < subject.n_obs(); ++n)
            shift(n) = subject.design.row(n).dot(
                direction.col(cache.grid_index[static_cast<std::size_t>(n)]));
        const Vector weighted = cache.precision.apply(shift);
        for (const Index s : cache.active_cols)
            out.col(s) +=
                subject.design.transpose() * cache.kernel.col(s).cwiseProduct(weighted);
    }
    return out;
}

Matrix FitEngine::curvature_adjoint(const Matrix& direction) const {
    if (n_rows() * n_points() <= kAffineCacheLimit) {
        ensure_affine_cache();
        const Eigen::Map<const Vector> flat(direction.data(), direction.size());
        Vector out = system_.transpose() * flat;
        return Eigen::Map<Matrix>(out.data(), n_rows(), n_points());
    }
    Matrix out = Matrix::Zero(n_rows(), n_points());
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
        const auto& subject = data_->subjects[i];
        const auto& cache = subjects_[i];
        Vector collapsed = Vector::Zero(subject.n_obs());
        for (const Index s : cache.active_cols)
            collapsed +=
                cache.kernel.col(s).cwiseProduct(subject.design * direction.col(s));
        const Vector weighted = cache.precision.apply(collapsed);
        for (Index n = 0; n < subject.n_obs(); ++n)
            out.col(cache.grid_index[static_cast<std::size_t>(n)]) +=
                weighted(n) * subject.design.row(n).transpose();
    }
    return out;
}

double FitEngine::curvature_norm() const {
    for (const auto& entry : curvature_cache_)
        if (same_params(entry.first, params_)) return entry.second;
    Matrix v(n_rows(), n_points());
    for (Index j = 0; j < v.rows(); ++j)
        for (Index s = 0; s < v.cols(); ++s)
            v(j, s) = 1.0 + 0.01 * static_cast<double>(((j * 131 + s * 31) % 97));
    v /= v.norm();
    double estimate = 0.0;
    for (int it = 0; it < 200; ++it) {
        const Matrix w = curvature_adjoint(curvature_product(v));
        const double norm = w.norm();
        if (norm == 0.0) {
            estimate = 0.0;
            break;
        }
        const double next = std::sqrt(norm);
        v = w / norm;
        if (it > 4 && std::abs(next - estimate) <= 1e-4 * next) {
            estimate = next;
            break;
        }
        estimate = next;
    }
    const double safe = estimate * 1.01;
    if (curvature_cache_.size() >= 8) curvature_cache_.erase(curvature_cache_.begin());
    curvature_cache_.emplace_back(params_, safe);
    return safe;
}

std::vector<Vector> FitEngine::residuals(const Matrix& coefficients) const {
    std::vector<Vector> out;
    out.reserve(subjects_.size());
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
        const auto& subject = data_->subjects[i];
        const auto& cache = subjects_[i];
        Vector residual(subject.n_obs());
        for (Index n = 0; n < subject.n_obs(); ++n)
            residual(n) =
                subject.responses(n) -
                subject.design.row(n).dot(
                    coefficients.col(cache.grid_index[static_cast<std::size_t>(n)]));
        out.push_back(residual);
    }
    return out;
}

Matrix estimating_function(const LongitudinalDataset& data,
                           const CoefficientMatrix& coefficients,
                           const VarianceParams& params, const KernelConfig& kernel) {
    FitEngine engine(data, coefficients.grid, kernel);
    engine.set_covariance(params);
    return engine.estimating_function(coefficients.values);
}

namespace {

enum class StopRule { ScoreNorm, RelativeChange };

struct PhaseResult {
    int iterations = 0;
    bool converged = false;
    double step_size = 0.0;
};

// One damped (proximal) score-iteration phase at fixed covariance. With a
// penalty the update is B <- prox(B - step U(B)); without one it is a plain
// damped step, optionally restricted to the free rows. The step is accepted
// when the curvature along the move stays below 1/step and the step norms do
// not increase; otherwise it is halved.
PhaseResult run_phase(const FitEngine& engine, Matrix& coefficients,
                      const PenaltyConfig* penalty, const std::vector<bool>* free_rows,
                      StopRule stop, int max_iter, double tol,
                      std::vector<double>* trace,
                      std::vector<std::size_t>* phase_starts) {
    PhaseResult phase;
    if (phase_starts != nullptr && trace != nullptr)
        phase_starts->push_back(trace->size());
    const double curvature = engine.curvature_norm();
    double step = curvature > 0.0 ? 1.0 / curvature : 1.0;

    const auto masked_score = [&](const Matrix& at) {
        Matrix score = engine.estimating_function(at);
        if (free_rows != nullptr)
            for (Index j = 0; j < score.rows(); ++j)
                if (!(*free_rows)[static_cast<std::size_t>(j)]) score.row(j).setZero();
        return score;
    };

    Matrix score = masked_score(coefficients);
    // The weighted score field can carry slightly negative-real modes on
    // irregular designs; the iterate with the smallest accepted step is kept
    // so a slow divergence along such modes never leaves the phase.
    double best_norm = std::numeric_limits<double>::infinity();
    Matrix best_coefficients = coefficients;
    Matrix best_score = score;
    std::size_t best_trace = trace != nullptr ? trace->size() : 0;
    for (int it = 0; it < max_iter; ++it) {
        if (stop == StopRule::ScoreNorm &&
            score.cwiseAbs().maxCoeff() < tol) {
            phase.converged = true;
            break;
        }
        Matrix next, next_score, delta;
        double delta_norm = 0.0;
        for (;;) {
            next = penalty != nullptr
                       ? prox_sgl_rows(coefficients - step * score, step, *penalty)
                       : Matrix(coefficients - step * score);
            next_score = masked_score(next);
            delta = next - coefficients;
            const double squared = delta.squaredNorm();
            delta_norm = std::sqrt(squared);
            // descent-lemma analogue for the affine score field: curvature
            // along the accepted move must stay below 1/step
            const double curvature_along =
                ((next_score - score).array() * delta.array()).sum();
            if (curvature_along <= squared / step + 1e-12 * (1.0 + squared)) break;
            step *= 0.5;
            if (step < kStepFloor)
                throw std::runtime_error(
                    "proximal step size underflow; the weighted system appears "
                    "ill-conditioned");
        }
        if (trace != nullptr) trace->push_back(delta_norm);
        const double relative =
            delta.cwiseAbs().maxCoeff() / (1.0 + coefficients.cwiseAbs().maxCoeff());
        coefficients = next;
        score = next_score;
        ++phase.iterations;
        if (delta_norm < best_norm) {
            best_norm = delta_norm;
            best_coefficients = coefficients;
            best_score = score;
            if (trace != nullptr) best_trace = trace->size();
        } else if (delta_norm > 3.0 * best_norm) {
            // diverging; rewind to the best iterate and give up on the phase
            coefficients = best_coefficients;
            score = best_score;
            if (trace != nullptr) trace->resize(best_trace);
            phase.converged = false;
            phase.step_size = step;
            return phase;
        }
        if (stop == StopRule::RelativeChange && relative < tol) {
            phase.converged = true;
            break;
        }
        // Near-interpolating fits push the score scale past what floating
        // point can resolve; numeric stagnation counts as stationary.
        if (stop == StopRule::ScoreNorm && relative < 1e-14) {
            phase.converged = true;
            break;
        }
    }
    if (stop == StopRule::ScoreNorm && !phase.converged)
        phase.converged = score.cwiseAbs().maxCoeff() < tol;
    phase.step_size = step;
    return phase;
}

double stationarity_residual(const FitEngine& engine, const Matrix& coefficients,
                             const PenaltyConfig& penalty) {
    const Matrix score = engine.estimating_function(coefficients);
    const double sqrt_s = std::sqrt(static_cast<double>(coefficients.cols()));
    double worst = 0.0;
    for (Index j = 0; j < coefficients.rows(); ++j) {
        if (!penalty.penalized[static_cast<std::size_t>(j)]) {
            worst = std::max(worst, score.row(j).cwiseAbs().maxCoeff());
            continue;
        }
        const double row_norm = coefficients.row(j).norm();
        if (row_norm == 0.0) continue;
        for (Index s = 0; s < coefficients.cols(); ++s) {
            const double b = coefficients(j, s);
            if (b == 0.0) continue;
            const double subgradient =
                score(j, s) +
                penalty.lambda * penalty.alpha * penalty.entry_weights(j, s) *
                    (b > 0.0 ? 1.0 : -1.0) +
                penalty.lambda * (1.0 - penalty.alpha) * sqrt_s *
                    penalty.group_weights(j) * b / row_norm;
            worst = std::max(worst, std::abs(subgradient));
        }
    }
    return worst;
}

FitResult finish_result(const FitEngine& engine, Matrix coefficients,
                        const VarianceParams& params,
                        const std::vector<bool>& penalized) {
    FitResult result;
    result.coefficients.values = std::move(coefficients);
    result.coefficients.grid = engine.grid();
    result.coefficients.penalized = penalized;
    result.params = params;
    const auto resid = engine.residuals(result.coefficients.values);
    result.quasi_loglik = quasi_loglik(resid, engine.subject_times(), params);
    return result;
}

// Full covariance re-estimate at the final fit; an interpolating fit with
// exactly zero residuals keeps the weighting parameters instead.
VarianceParams reestimate_or_keep(const FitEngine& engine, const Matrix& coefficients,
                                  const VarianceParams& weighting) {
    const auto residuals = engine.residuals(coefficients);
    double sum_sq = 0.0;
    for (const auto& r : residuals) sum_sq += r.squaredNorm();
    if (!(sum_sq > 0.0)) return weighting;
    return update_covariance(residuals, engine.subject_times(), weighting.family,
                             weighting);
}

void check_grid_mass(const FitEngine& engine) {
    for (Index s = 0; s < engine.n_points(); ++s)
        if (!(engine.grid_mass(s) > 0.0)) {
            std::ostringstream msg;
            msg << "no kernel mass reaches grid point " << s << " (t = "
                << engine.grid().points(s)
                << "); widen the kernel scale or drop the point";
            throw std::runtime_error(msg.str());
        }
}

}  // namespace

Matrix restricted_stationary_fit(const FitEngine& engine,
                                 const std::vector<bool>& free_rows, double tol_scale,
                                 int max_iter) {
    require(static_cast<Index>(free_rows.size()) == engine.n_rows(),
            "free-row mask length mismatch");
    Matrix coefficients = Matrix::Zero(engine.n_rows(), engine.n_points());
    bool any = false;
    for (const bool free_row : free_rows) any = any || free_row;
    if (!any) return coefficients;

    Matrix initial_score = engine.estimating_function(coefficients);
    for (Index j = 0; j < initial_score.rows(); ++j)
        if (!free_rows[static_cast<std::size_t>(j)]) initial_score.row(j).setZero();
    const double tol = tol_scale * (1.0 + initial_score.cwiseAbs().maxCoeff());
    run_phase(engine, coefficients, nullptr, &free_rows, StopRule::ScoreNorm, max_iter,
              tol, nullptr, nullptr);
    return coefficients;
}

FitResult fit_unpenalized(FitEngine& engine, const FitConfig& cfg) {
    cfg.validate();
    check_grid_mass(engine);
    VarianceParams weighting = cfg.init_params;
    Matrix coefficients = Matrix::Zero(engine.n_rows(), engine.n_points());

    // Re-weighting between phases adopts the refreshed correlation
    // parameters only (the estimate and the score tolerance scale are
    // invariant to the noise variance); the returned covariance is fully
    // re-estimated at the final residuals.
    FitResult bookkeeping;
    engine.set_covariance(weighting);
    for (int cycle = 0; cycle < cfg.covariance_cycles; ++cycle) {
        if (cycle > 0) {
            const VarianceParams refreshed =
                update_covariance(engine.residuals(coefficients),
                                  engine.subject_times(), weighting.family, weighting);
            weighting.ratio = refreshed.ratio;
            weighting.rho = refreshed.rho;
            engine.set_covariance(weighting);
        }
        const PhaseResult phase = run_phase(
            engine, coefficients, nullptr, nullptr, StopRule::ScoreNorm, cfg.max_iter,
            cfg.tol, &bookkeeping.objective_trace, &bookkeeping.phase_starts);
        bookkeeping.iterations += phase.iterations;
        bookkeeping.converged = phase.converged;
        bookkeeping.step_size = phase.step_size;
    }
    const double score_norm =
        engine.estimating_function(coefficients).cwiseAbs().maxCoeff();
    const VarianceParams reported =
        reestimate_or_keep(engine, coefficients, weighting);

    FitResult result = finish_result(engine, std::move(coefficients), reported,
                                     std::vector<bool>(
                                         static_cast<std::size_t>(engine.n_rows()),
                                         false));
    result.objective_trace = std::move(bookkeeping.objective_trace);
    result.phase_starts = std::move(bookkeeping.phase_starts);
    result.iterations = bookkeeping.iterations;
    result.converged = bookkeeping.converged;
    result.step_size = bookkeeping.step_size;
    result.kkt_residual = score_norm;
    return result;
}

FitResult fit_unpenalized(const LongitudinalDataset& data, const TimeGrid& grid,
                          const FitConfig& cfg) {
    FitEngine engine(data, grid, cfg.kernel);
    return fit_unpenalized(engine, cfg);
}

FitResult fit_penalized(FitEngine& engine, const FitConfig& cfg, const Matrix* initial) {
    cfg.validate();
    cfg.penalty.validate();
    require(cfg.penalty.group_weights.size() == engine.n_rows() &&
                cfg.penalty.entry_weights.cols() == engine.n_points(),
            "penalty weights do not match the problem dimensions");

    VarianceParams params = cfg.init_params;
    engine.set_covariance(params);

    Matrix coefficients;
    if (initial != nullptr) {
        require(initial->rows() == engine.n_rows() &&
                    initial->cols() == engine.n_points(),
                "initial coefficients have wrong dimensions");
        coefficients = *initial;
    } else {
        // Zeros on penalized rows, restricted stationary fit on the rest.
        std::vector<bool> unpenalized_rows(cfg.penalty.penalized.size());
        for (std::size_t j = 0; j < cfg.penalty.penalized.size(); ++j)
            unpenalized_rows[j] = !cfg.penalty.penalized[j];
        coefficients = restricted_stationary_fit(engine, unpenalized_rows);
    }

    // The penalty strength was calibrated against the score scale of the
    // incoming covariance, and the score scales with 1/sigma2, so the
    // re-weighting between mean phases only adopts the refreshed correlation
    // parameters. The returned covariance is fully re-estimated at the end.
    FitResult bookkeeping;
    VarianceParams weighting = params;
    bool phase_ok = true;
    for (int cycle = 0; cycle < cfg.covariance_cycles; ++cycle) {
        if (cycle > 0) {
            if (!phase_ok) break;  // do not refresh from an unconverged fit
            const VarianceParams refreshed =
                update_covariance(engine.residuals(coefficients),
                                  engine.subject_times(), params.family, weighting);
            weighting.ratio = refreshed.ratio;
            weighting.rho = refreshed.rho;
            engine.set_covariance(weighting);
        }
        const PhaseResult phase =
            run_phase(engine, coefficients, &cfg.penalty, nullptr,
                      StopRule::RelativeChange, cfg.max_iter, cfg.tol,
                      &bookkeeping.objective_trace, &bookkeeping.phase_starts);
        bookkeeping.iterations += phase.iterations;
        bookkeeping.converged = phase.converged;
        bookkeeping.step_size = phase.step_size;
        phase_ok = phase.converged;
    }
    const double kkt =
        stationarity_residual(engine, coefficients, cfg.penalty);
    const VarianceParams reported =
        reestimate_or_keep(engine, coefficients, weighting);

    FitResult finished = finish_result(engine, std::move(coefficients), reported,
                                       cfg.penalty.penalized);
    finished.objective_trace = std::move(bookkeeping.objective_trace);
    finished.phase_starts = std::move(bookkeeping.phase_starts);
    finished.iterations = bookkeeping.iterations;
    finished.converged = bookkeeping.converged;
    finished.step_size = bookkeeping.step_size;
    finished.kkt_residual = kkt;
    return finished;
}

FitResult fit_penalized(const LongitudinalDataset& data, const TimeGrid& grid,
                        const FitConfig& cfg, const Matrix* initial) {
    FitEngine engine(data, grid, cfg.kernel);
    return fit_penalized(engine, cfg, initial);
}

}  // namespace lsvcmm
