#include "lsvcmm/estimator.hpp"

#include "lsvcmm/rng.hpp"
#include "unit/helpers.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace lsvcmm;
using lsvcmm::testing::make_grid;
using lsvcmm::testing::make_subject;

namespace {

// Naive per-observation assembly of the estimating function through dense
// covariance inverses; deliberately independent of FitEngine.
Matrix triple_loop_score(const LongitudinalDataset& data, const CoefficientMatrix& coef,
                         const VarianceParams& params, const KernelConfig& kernel) {
    const auto indices = grid_indices(data, coef.grid);
    Matrix score = Matrix::Zero(coef.n_rows(), coef.n_points());
    for (std::size_t i = 0; i < data.subjects.size(); ++i) {
        const auto& subject = data.subjects[i];
        Vector residual(subject.n_obs());
        for (Index n = 0; n < subject.n_obs(); ++n)
            residual(n) =
                subject.responses(n) -
                subject.design.row(n).dot(
                    coef.values.col(indices[i][static_cast<std::size_t>(n)]));
        const Matrix precision = covariance_matrix(subject.times, params).inverse();
        const Vector weighted = precision * residual;
        for (Index s = 0; s < coef.n_points(); ++s)
            for (Index n = 0; n < subject.n_obs(); ++n)
                for (Index j = 0; j < coef.n_rows(); ++j)
                    score(j, s) -= subject.design(n, j) *
                                   kernel_weight(coef.grid.points(s) - subject.times(n),
                                                 kernel) *
                                   weighted(n);
    }
    return score;
}

// Two-group panel on a shared regular grid.
LongitudinalDataset two_group_panel(Rng& rng, int n_subjects, const Vector& grid_points,
                                    double noise = 1.0, double ratio = 0.0) {
    LongitudinalDataset data;
    data.covariate_names = {"(Intercept)", "group"};
    for (int i = 0; i < n_subjects; ++i) {
        const double group = i % 2 == 0 ? 0.0 : 1.0;
        const double intercept = std::sqrt(ratio) * rng.normal();
        SubjectRecord subject;
        subject.id = std::to_string(i);
        subject.times = grid_points;
        subject.responses.resize(grid_points.size());
        subject.design.resize(grid_points.size(), 2);
        for (Index n = 0; n < grid_points.size(); ++n) {
            subject.responses(n) = intercept + noise * rng.normal();
            subject.design(n, 0) = 1.0;
            subject.design(n, 1) = group;
        }
        data.subjects.push_back(std::move(subject));
    }
    return data;
}

VarianceParams independent_params(double sigma2 = 1.0) {
    VarianceParams params;
    params.family = CovarianceFamily::Independent;
    params.sigma2 = sigma2;
    return params;
}

PenaltyConfig uniform_penalty(Index p, Index n_points, double lambda, double alpha) {
    PenaltyConfig cfg;
    cfg.lambda = lambda;
    cfg.alpha = alpha;
    cfg.group_weights = Vector::Ones(p);
    cfg.entry_weights = Matrix::Ones(p, n_points);
    cfg.penalized.assign(static_cast<std::size_t>(p), true);
    return cfg;
}

}  // namespace

TEST_CASE("estimating_function matches the triple-loop oracle") {
    Rng rng(101);
    for (int trial = 0; trial < 8; ++trial) {
        LongitudinalDataset data = lsvcmm::testing::random_dataset(rng, 4, 3, 2);
        CoefficientMatrix coef;
        coef.grid = make_grid({0.1, 0.5, 0.9});
        // snap observation times onto the grid so the mapping is exact
        for (auto& subject : data.subjects)
            for (Index n = 0; n < subject.n_obs(); ++n)
                subject.times(n) = coef.grid.points(n % 3);
        for (auto& subject : data.subjects) {
            std::vector<double> sorted{subject.times(0), subject.times(1),
                                       subject.times(2)};
            std::sort(sorted.begin(), sorted.end());
            for (Index n = 0; n < 3; ++n) subject.times(n) = sorted[static_cast<std::size_t>(n)];
        }
        coef.values = Matrix::NullaryExpr(2, 3, [&](Index, Index) { return rng.normal(); });
        coef.penalized = {true, true};
        KernelConfig kernel;
        kernel.scale = 0.25 + 0.5 * rng.uniform();
        VarianceParams params;
        params.family = trial % 2 == 0 ? CovarianceFamily::CompoundSymmetry
                                       : CovarianceFamily::Independent;
        params.sigma2 = 0.8;
        params.ratio = trial % 2 == 0 ? 0.7 : 0.0;

        const Matrix fast = estimating_function(data, coef, params, kernel);
        const Matrix slow = triple_loop_score(data, coef, params, kernel);
        CHECK((fast - slow).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("estimating_function flattens to the pooled score as h -> inf") {
    Rng rng(103);
    const Vector grid_points = Vector::LinSpaced(4, 0.0, 1.0);
    LongitudinalDataset data = two_group_panel(rng, 6, grid_points);
    CoefficientMatrix coef;
    coef.grid = make_grid({0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0});
    coef.grid.points = grid_points;
    coef.values = Matrix::NullaryExpr(2, 4, [&](Index, Index) { return rng.normal(); });
    coef.penalized = {true, true};
    KernelConfig kernel;
    kernel.scale = 1e6;

    const Matrix score = estimating_function(data, coef, independent_params(), kernel);
    // pooled cross-sectional score, scaled by the flat kernel weight
    Vector pooled = Vector::Zero(2);
    const auto residuals = mean_and_residuals(data, coef);
    for (std::size_t i = 0; i < data.subjects.size(); ++i)
        pooled -= data.subjects[i].design.transpose() * residuals.residuals[i];
    pooled *= kernel_weight(0.0, kernel);
    for (Index s = 0; s < 4; ++s)
        CHECK((score.col(s) - pooled).norm() <= 1e-6 * (1.0 + pooled.norm()));
}

TEST_CASE("fit_unpenalized limit cases") {
    SUBCASE("constant model at huge h recovers the grand mean") {
        Rng rng(107);
        LongitudinalDataset data;
        data.covariate_names = {"x"};
        double total = 0.0;
        int count = 0;
        for (int i = 0; i < 7; ++i) {
            SubjectRecord subject;
            subject.id = std::to_string(i);
            const int n_obs = 2 + i % 3;
            subject.times.resize(n_obs);
            subject.responses.resize(n_obs);
            subject.design = Matrix::Ones(n_obs, 1);
            for (int n = 0; n < n_obs; ++n) {
                subject.times(n) = (i + 7.0 * n + 1.0) / 30.0;
                subject.responses(n) = rng.normal();
                total += subject.responses(n);
                ++count;
            }
            data.subjects.push_back(std::move(subject));
        }
        const double grand_mean = total / count;
        const TimeGrid grid = default_grid(data);
        FitConfig cfg;
        cfg.kernel.scale = 1e5 * grid.range();
        cfg.init_params = independent_params();
        cfg.covariance_cycles = 1;
        cfg.tol = 1e-11;  // the score scale shrinks with 1/h
        cfg.max_iter = 20000;
        const FitResult fit = fit_unpenalized(data, grid, cfg);
        CHECK(fit.converged);
        CHECK((fit.coefficients.values.array() - grand_mean).abs().maxCoeff() < 1e-6);
        CHECK(fit.kkt_residual < 1e-5);
    }

    SUBCASE("pointwise h on a regular design recovers per-time means") {
        Rng rng(109);
        const Vector grid_points = Vector::LinSpaced(5, 0.0, 1.0);
        LongitudinalDataset data;
        data.covariate_names = {"x"};
        for (int i = 0; i < 6; ++i) {
            SubjectRecord subject;
            subject.id = std::to_string(i);
            subject.times = grid_points;
            subject.responses =
                Vector::NullaryExpr(5, [&](Index) { return rng.normal(); });
            subject.design = Matrix::Ones(5, 1);
            data.subjects.push_back(std::move(subject));
        }
        TimeGrid grid;
        grid.points = grid_points;
        FitConfig cfg;
        cfg.kernel.scale = 0.25 / (4.0 * cfg.kernel.truncation_radius);
        cfg.init_params = independent_params();
        cfg.covariance_cycles = 1;
        cfg.tol = 1e-10;
        cfg.max_iter = 20000;
        const FitResult fit = fit_unpenalized(data, grid, cfg);
        CHECK(fit.converged);
        for (Index s = 0; s < 5; ++s) {
            double mean = 0.0;
            for (const auto& subject : data.subjects) mean += subject.responses(s);
            mean /= static_cast<double>(data.subjects.size());
            CHECK(fit.coefficients.values(0, s) == doctest::Approx(mean).epsilon(1e-7));
        }
    }

    SUBCASE("pointwise h recovers per-time group mean differences") {
        Rng rng(113);
        const Vector grid_points = Vector::LinSpaced(4, 0.0, 1.0);
        LongitudinalDataset data = two_group_panel(rng, 10, grid_points);
        TimeGrid grid;
        grid.points = grid_points;
        FitConfig cfg;
        cfg.kernel.scale = (1.0 / 3.0) / (4.0 * cfg.kernel.truncation_radius);
        cfg.init_params = independent_params();
        cfg.covariance_cycles = 1;
        cfg.tol = 1e-10;
        cfg.max_iter = 20000;
        const FitResult fit = fit_unpenalized(data, grid, cfg);
        CHECK(fit.converged);
        for (Index s = 0; s < 4; ++s) {
            double mean0 = 0.0, mean1 = 0.0;
            int count0 = 0, count1 = 0;
            for (const auto& subject : data.subjects) {
                if (subject.design(0, 1) > 0.5) {
                    mean1 += subject.responses(s);
                    ++count1;
                } else {
                    mean0 += subject.responses(s);
                    ++count0;
                }
            }
            mean0 /= count0;
            mean1 /= count1;
            CHECK(fit.coefficients.values(1, s) ==
                  doctest::Approx(mean1 - mean0).epsilon(1e-7));
        }
    }

    SUBCASE("zero kernel mass at a grid point is an error naming the point") {
        LongitudinalDataset data;
        data.covariate_names = {"x"};
        data.subjects.push_back(make_subject("1", {0.0, 0.1}, {1.0, 2.0}, {{1.0}, {1.0}}));
        TimeGrid grid = make_grid({0.0, 0.1, 0.9});
        FitConfig cfg;
        cfg.kernel.scale = 0.01;
        cfg.init_params = independent_params();
        CHECK_THROWS_WITH_AS(fit_unpenalized(data, grid, cfg),
                             doctest::Contains("0.9"), std::runtime_error);
    }
}

TEST_CASE("fit_penalized") {
    Rng rng(127);
    const Vector grid_points = Vector::LinSpaced(5, 0.0, 1.0);
    LongitudinalDataset data = two_group_panel(rng, 12, grid_points, 0.6);
    // inject a signal in the middle of the domain
    for (auto& subject : data.subjects)
        if (subject.design(0, 1) > 0.5)
            for (Index n = 1; n < 4; ++n) subject.responses(n) += 1.5;
    TimeGrid grid;
    grid.points = grid_points;

    FitConfig cfg;
    cfg.kernel.scale = 0.3;
    cfg.init_params = independent_params();
    cfg.covariance_cycles = 1;
    cfg.penalty = uniform_penalty(2, 5, 0.0, 0.5);
    cfg.penalty.penalized = {false, true};
    cfg.penalty.group_weights(0) = 0.0;
    cfg.penalty.entry_weights.row(0).setZero();

    SUBCASE("lambda = 0 matches the unpenalized fit") {
        FitConfig tight = cfg;
        tight.tol = 1e-9;
        tight.max_iter = 100000;
        const FitResult penalized = fit_penalized(data, grid, tight);
        const FitResult direct = fit_unpenalized(data, grid, tight);
        CHECK((penalized.coefficients.values - direct.coefficients.values)
                  .cwiseAbs()
                  .maxCoeff() < 10.0 * 1e-6);
        CHECK(penalized.converged);
        CHECK(direct.converged);
    }

    SUBCASE("objective trace is nonincreasing within each phase") {
        cfg.penalty.lambda = 0.4;
        cfg.covariance_cycles = 2;
        cfg.init_params.family = CovarianceFamily::CompoundSymmetry;
        const FitResult fit = fit_penalized(data, grid, cfg);
        REQUIRE(!fit.phase_starts.empty());
        for (std::size_t phase = 0; phase < fit.phase_starts.size(); ++phase) {
            const std::size_t begin = fit.phase_starts[phase];
            const std::size_t end = phase + 1 < fit.phase_starts.size()
                                        ? fit.phase_starts[phase + 1]
                                        : fit.objective_trace.size();
            for (std::size_t k = begin + 1; k < end; ++k)
                CHECK(fit.objective_trace[k] <=
                      fit.objective_trace[k - 1] +
                          1e-8 * (1.0 + fit.objective_trace[k - 1]));
        }
    }

    SUBCASE("stationarity holds at the solution on a small instance") {
        cfg.penalty.lambda = 0.3;
        cfg.tol = 1e-9;
        LongitudinalDataset small;
        small.covariate_names = {"(Intercept)", "group"};
        Rng rng2(5);
        for (int i = 0; i < 4; ++i) {
            SubjectRecord subject;
            subject.id = std::to_string(i);
            subject.times = Vector::LinSpaced(3, 0.0, 1.0);
            subject.responses =
                Vector::NullaryExpr(3, [&](Index) { return 0.5 * rng2.normal(); });
            subject.design.resize(3, 2);
            subject.design.col(0).setOnes();
            subject.design.col(1).setConstant(i % 2);
            small.subjects.push_back(std::move(subject));
        }
        TimeGrid small_grid = make_grid({0.0, 0.5, 1.0});
        FitConfig small_cfg = cfg;
        small_cfg.kernel.scale = 0.4;
        small_cfg.penalty = uniform_penalty(2, 3, 0.05, 0.5);
        small_cfg.penalty.penalized = {false, true};
        small_cfg.penalty.group_weights(0) = 0.0;
        small_cfg.penalty.entry_weights.row(0).setZero();
        small_cfg.tol = 1e-9;

        FitEngine engine(small, small_grid, small_cfg.kernel);
        engine.set_covariance(small_cfg.init_params);
        // the 10 * tol bound presumes curvature of order one
        REQUIRE(engine.curvature_norm() < 50.0);
        const FitResult fit = fit_penalized(engine, small_cfg);
        CHECK(fit.converged);
        CHECK(fit.kkt_residual < 10.0 * 1e-6);
    }

    SUBCASE("subject order does not change the fit") {
        cfg.penalty.lambda = 0.2;
        const FitResult forward = fit_penalized(data, grid, cfg);
        LongitudinalDataset reversed;
        reversed.covariate_names = data.covariate_names;
        reversed.subjects.assign(data.subjects.rbegin(), data.subjects.rend());
        const FitResult backward = fit_penalized(reversed, grid, cfg);
        CHECK((forward.coefficients.values - backward.coefficients.values)
                  .cwiseAbs()
                  .maxCoeff() < 1e-12);
    }
}

TEST_CASE("singleton grid reduces to the pooled adaptive sparse group lasso") {
    // All observations share one time point, so the kernel collapses to a
    // constant and the fixed point must solve the pooled penalized model.
    Rng rng(131);
    const Index p = 3, n_obs_total = 40;
    LongitudinalDataset data;
    data.covariate_names = {"x0", "x1", "x2"};
    Matrix pooled_design(n_obs_total, p);
    Vector pooled_response(n_obs_total);
    for (Index r = 0; r < n_obs_total; ++r) {
        SubjectRecord subject;
        subject.id = std::to_string(r);
        subject.times = Vector::Constant(1, 0.5);
        subject.design.resize(1, p);
        for (Index c = 0; c < p; ++c) subject.design(0, c) = rng.normal();
        const double signal = 1.2 * subject.design(0, 0);
        subject.responses = Vector::Constant(1, signal + 0.3 * rng.normal());
        pooled_design.row(r) = subject.design.row(0);
        pooled_response(r) = subject.responses(0);
        data.subjects.push_back(std::move(subject));
    }
    TimeGrid grid = make_grid({0.5});

    FitConfig cfg;
    cfg.kernel.scale = 0.7;
    cfg.init_params = independent_params();
    cfg.covariance_cycles = 1;
    cfg.tol = 1e-10;
    cfg.penalty = uniform_penalty(p, 1, 0.8, 0.6);
    Rng wrng(7);
    for (Index j = 0; j < p; ++j) {
        cfg.penalty.group_weights(j) = 0.5 + wrng.uniform();
        cfg.penalty.entry_weights(j, 0) = 0.5 + wrng.uniform();
    }

    const FitResult fit = fit_penalized(data, grid, cfg);

    // direct proximal descent on the pooled objective, scaled to match
    const double scale = kernel_weight(0.0, cfg.kernel);
    Vector b = Vector::Zero(p);
    const double lipschitz =
        scale * (pooled_design.transpose() * pooled_design).norm();
    const double step = 1.0 / lipschitz;
    for (int it = 0; it < 20000; ++it) {
        const Vector gradient =
            -scale * pooled_design.transpose() * (pooled_response - pooled_design * b);
        Vector next(p);
        for (Index j = 0; j < p; ++j) {
            Vector row = (b - step * gradient).segment(j, 1);
            next.segment(j, 1) =
                prox_sgl(row, step, cfg.penalty.lambda, cfg.penalty.alpha,
                         cfg.penalty.group_weights(j),
                         cfg.penalty.entry_weights.row(j).segment(0, 1));
        }
        if ((next - b).cwiseAbs().maxCoeff() < 1e-13) {
            b = next;
            break;
        }
        b = next;
    }
    CHECK((fit.coefficients.values.col(0) - b).cwiseAbs().maxCoeff() < 1e-6);
}
