#include "lsvcmm/covariance.hpp"

#include "lsvcmm/rng.hpp"
#include "unit/helpers.hpp"

#include <doctest.h>

#include <cmath>

using namespace lsvcmm;

namespace {

VarianceParams make_params(CovarianceFamily family, double sigma2, double ratio = 0.0,
                           double rho = 0.0) {
    VarianceParams params;
    params.family = family;
    params.sigma2 = sigma2;
    params.ratio = ratio;
    params.rho = rho;
    return params;
}

// Simulated per-subject residuals from a random-intercept model.
void draw_residuals(Rng& rng, int n_subjects, int n_obs, double sigma2, double ratio,
                    std::vector<Vector>& residuals, std::vector<Vector>& times) {
    residuals.clear();
    times.clear();
    for (int i = 0; i < n_subjects; ++i) {
        const double intercept = std::sqrt(sigma2 * ratio) * rng.normal();
        Vector r(n_obs), t(n_obs);
        for (int n = 0; n < n_obs; ++n) {
            t(n) = static_cast<double>(n);
            r(n) = intercept + std::sqrt(sigma2) * rng.normal();
        }
        residuals.push_back(r);
        times.push_back(t);
    }
}

}  // namespace

TEST_CASE("covariance_matrix structures") {
    Vector two(2);
    two << 0.0, 1.0;

    const Matrix cs = covariance_matrix(two, make_params(CovarianceFamily::CompoundSymmetry, 1.0, 1.0));
    CHECK(cs(0, 0) == doctest::Approx(2.0));
    CHECK(cs(0, 1) == doctest::Approx(1.0));
    CHECK(cs(1, 0) == doctest::Approx(1.0));
    CHECK(cs(1, 1) == doctest::Approx(2.0));

    const Matrix ind = covariance_matrix(two, make_params(CovarianceFamily::Independent, 2.0));
    CHECK((ind - 2.0 * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() == 0.0);

    Vector three(3);
    three << 0.0, 1.0, 2.0;
    const Matrix ar1 =
        covariance_matrix(three, make_params(CovarianceFamily::AR1, 1.0, 1.0, 0.5));
    Matrix expected(3, 3);
    expected << 2.0, 0.5, 0.25, 0.5, 2.0, 0.5, 0.25, 0.5, 2.0;
    CHECK((ar1 - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("covariance_matrix is symmetric positive definite") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Vector times(4);
        times << 0.0, 0.3 + rng.uniform(), 1.5 + rng.uniform(), 3.0 + rng.uniform();
        const auto family = trial % 3 == 0   ? CovarianceFamily::Independent
                            : trial % 3 == 1 ? CovarianceFamily::CompoundSymmetry
                                             : CovarianceFamily::AR1;
        const double sigma2 = 0.5 + rng.uniform();
        const auto params = make_params(family, sigma2, 2.0 * rng.uniform(),
                                        0.95 * rng.uniform());
        const Matrix v = covariance_matrix(times, params);
        CHECK((v - v.transpose()).cwiseAbs().maxCoeff() == 0.0);
        const Eigen::SelfAdjointEigenSolver<Matrix> eigen(v);
        if (family != CovarianceFamily::AR1)
            CHECK(eigen.eigenvalues().minCoeff() >= sigma2 * (1.0 - 1e-10));
        CHECK(eigen.eigenvalues().minCoeff() > 0.0);  // SPD for rho in [0, 1)
    }
}

TEST_CASE("solve_precision") {
    SUBCASE("identity") {
        Vector rhs(3);
        rhs << 1.0, -2.0, 0.5;
        const Vector out = solve_precision(Matrix::Identity(3, 3), rhs);
        CHECK((out - rhs).cwiseAbs().maxCoeff() < 1e-14);
    }

    SUBCASE("explicit 2x2 inverse") {
        Matrix v(2, 2);
        v << 2.0, 1.0, 1.0, 2.0;
        Vector rhs(2);
        rhs << 1.0, 0.0;
        const Vector out = solve_precision(v, rhs);
        CHECK(out(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK(out(1) == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
    }

    SUBCASE("multiply-back on random SPD matrices") {
        Rng rng(17);
        for (int trial = 0; trial < 10; ++trial) {
            Matrix a = Matrix::NullaryExpr(5, 5, [&](Index, Index) { return rng.normal(); });
            Matrix v = a * a.transpose() + 0.5 * Matrix::Identity(5, 5);
            Vector rhs = Vector::NullaryExpr(5, [&](Index) { return rng.normal(); });
            const Vector x = solve_precision(v, rhs);
            CHECK((v * x - rhs).norm() < 1e-10);
        }
    }

    SUBCASE("non-SPD input is rejected") {
        Matrix v(2, 2);
        v << 1.0, 2.0, 2.0, 1.0;  // indefinite
        Vector rhs = Vector::Ones(2);
        CHECK_THROWS_AS(solve_precision(v, rhs), std::runtime_error);
    }
}

TEST_CASE("PrecisionOperator agrees with the dense factorization") {
    Rng rng(23);
    Vector times(6);
    for (Index n = 0; n < 6; ++n) times(n) = n + 0.3 * rng.uniform();
    for (const auto family : {CovarianceFamily::Independent,
                              CovarianceFamily::CompoundSymmetry, CovarianceFamily::AR1}) {
        const auto params = make_params(family, 1.7, 0.8, 0.6);
        const Matrix v = covariance_matrix(times, params);
        const PrecisionOperator precision(times, params);
        Vector rhs = Vector::NullaryExpr(6, [&](Index) { return rng.normal(); });
        CHECK((precision.apply(rhs) - solve_precision(v, rhs)).cwiseAbs().maxCoeff() <
              1e-10);
        CHECK(precision.log_det_covariance() ==
              doctest::Approx(std::log(v.determinant())).epsilon(1e-8));
        CHECK((precision.dense_inverse() * v - Matrix::Identity(6, 6))
                  .cwiseAbs()
                  .maxCoeff() < 1e-10);
    }
}

TEST_CASE("quasi_loglik closed-form values") {
    const double log_2pi = std::log(2.0 * M_PI);
    std::vector<Vector> times{Vector::Zero(1)};

    std::vector<Vector> zero{Vector::Zero(1)};
    CHECK(quasi_loglik(zero, times, make_params(CovarianceFamily::Independent, 1.0)) ==
          doctest::Approx(-0.5 * log_2pi).epsilon(1e-12));

    std::vector<Vector> one{Vector::Ones(1)};
    CHECK(quasi_loglik(one, times, make_params(CovarianceFamily::Independent, 1.0)) ==
          doctest::Approx(-0.5 * log_2pi - 0.5).epsilon(1e-12));
}

TEST_CASE("quasi_loglik matches a dense-matrix oracle") {
    Rng rng(31);
    std::vector<Vector> residuals, times;
    draw_residuals(rng, 5, 4, 1.3, 0.9, residuals, times);
    const auto params = make_params(CovarianceFamily::CompoundSymmetry, 1.3, 0.9);

    double oracle = 0.0;
    for (std::size_t i = 0; i < residuals.size(); ++i) {
        const Matrix v = covariance_matrix(times[i], params);
        const Eigen::LLT<Matrix> chol(v);
        const double log_det =
            2.0 * chol.matrixL().toDenseMatrix().diagonal().array().log().sum();
        oracle -= 0.5 * (times[i].size() * std::log(2.0 * M_PI) + log_det +
                         residuals[i].dot(chol.solve(residuals[i])));
    }
    CHECK(quasi_loglik(residuals, times, params) ==
          doctest::Approx(oracle).epsilon(1e-8));
}

TEST_CASE("quasi_loglik is unimodal in sigma2 at the profiled optimum") {
    Rng rng(41);
    std::vector<Vector> residuals, times;
    draw_residuals(rng, 50, 5, 1.0, 1.0, residuals, times);
    const VarianceParams fitted = update_covariance(
        residuals, times, CovarianceFamily::CompoundSymmetry,
        make_params(CovarianceFamily::CompoundSymmetry, 1.0, 1.0));
    const double at_optimum = quasi_loglik(residuals, times, fitted);
    for (const double scale : {0.5, 2.0}) {
        VarianceParams off = fitted;
        off.sigma2 *= scale;
        CHECK(at_optimum >= quasi_loglik(residuals, times, off));
    }
}

TEST_CASE("update_covariance") {
    SUBCASE("independent family closed form") {
        Rng rng(2);
        std::vector<Vector> residuals, times;
        draw_residuals(rng, 10, 3, 2.0, 0.0, residuals, times);
        double sum_sq = 0.0;
        Index count = 0;
        for (const auto& r : residuals) {
            sum_sq += r.squaredNorm();
            count += r.size();
        }
        const VarianceParams fitted =
            update_covariance(residuals, times, CovarianceFamily::Independent,
                              make_params(CovarianceFamily::Independent, 1.0));
        CHECK(fitted.sigma2 == doctest::Approx(sum_sq / count).epsilon(1e-14));
    }

    SUBCASE("iid noise keeps the ratio near zero") {
        Rng rng(57);
        std::vector<Vector> residuals, times;
        draw_residuals(rng, 500, 6, 1.0, 0.0, residuals, times);
        const VarianceParams fitted = update_covariance(
            residuals, times, CovarianceFamily::CompoundSymmetry,
            make_params(CovarianceFamily::CompoundSymmetry, 1.0, 1.0));
        CHECK(fitted.ratio < 0.05);
        CHECK(fitted.sigma2 > 0.9);
        CHECK(fitted.sigma2 < 1.1);
    }

    SUBCASE("balanced compound-symmetry recovery with an ANOVA cross-check") {
        Rng rng(91);
        const int n_subjects = 500, n_obs = 6;
        std::vector<Vector> residuals, times;
        draw_residuals(rng, n_subjects, n_obs, 1.0, 1.0, residuals, times);
        const VarianceParams fitted = update_covariance(
            residuals, times, CovarianceFamily::CompoundSymmetry,
            make_params(CovarianceFamily::CompoundSymmetry, 1.0, 0.5));
        CHECK(fitted.ratio > 0.8);
        CHECK(fitted.ratio < 1.25);
        CHECK(fitted.sigma2 > 0.9);
        CHECK(fitted.sigma2 < 1.1);

        // one-way ANOVA variance components on the balanced panel
        double grand = 0.0;
        for (const auto& r : residuals) grand += r.sum();
        grand /= n_subjects * n_obs;
        double ss_within = 0.0, ss_between = 0.0;
        for (const auto& r : residuals) {
            const double mean = r.mean();
            ss_within += (r.array() - mean).square().sum();
            ss_between += n_obs * (mean - grand) * (mean - grand);
        }
        const double ms_within = ss_within / (n_subjects * (n_obs - 1));
        const double ms_between = ss_between / (n_subjects - 1);
        const double sigma2_anova = ms_within;
        const double ratio_anova = (ms_between - ms_within) / (n_obs * ms_within);
        CHECK(std::abs(fitted.sigma2 - sigma2_anova) < 0.02);
        CHECK(std::abs(fitted.ratio - ratio_anova) < 0.08);
    }

    SUBCASE("AR1 recovery stays in a sane range") {
        Rng rng(13);
        std::vector<Vector> residuals, times;
        const double rho = 0.6;
        for (int i = 0; i < 800; ++i) {
            Vector t(8), r(8);
            double process = rng.normal();  // stationary AR(1), unit variance
            for (int n = 0; n < 8; ++n) {
                t(n) = n;
                if (n > 0)
                    process = rho * process + std::sqrt(1.0 - rho * rho) * rng.normal();
                r(n) = process + rng.normal();
            }
            residuals.push_back(r);
            times.push_back(t);
        }
        const VarianceParams fitted =
            update_covariance(residuals, times, CovarianceFamily::AR1,
                              make_params(CovarianceFamily::AR1, 1.0, 1.0, 0.5));
        CHECK(fitted.ratio > 0.6);
        CHECK(fitted.ratio < 1.6);
        CHECK(fitted.rho > 0.4);
        CHECK(fitted.rho < 0.8);
        CHECK(fitted.sigma2 > 0.75);
        CHECK(fitted.sigma2 < 1.25);
    }

    SUBCASE("never decreases the quasi-log-likelihood") {
        Rng rng(71);
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<Vector> residuals, times;
            draw_residuals(rng, 20, 4, 0.5 + rng.uniform(), 2.0 * rng.uniform(),
                           residuals, times);
            const auto start = make_params(CovarianceFamily::CompoundSymmetry,
                                           0.5 + rng.uniform(), 3.0 * rng.uniform());
            const VarianceParams fitted = update_covariance(
                residuals, times, CovarianceFamily::CompoundSymmetry, start);
            CHECK(quasi_loglik(residuals, times, fitted) >=
                  quasi_loglik(residuals, times, start) - 1e-8);
        }
    }

    SUBCASE("degenerate inputs are rejected") {
        std::vector<Vector> residuals{Vector::Zero(3)};
        std::vector<Vector> times{Vector::LinSpaced(3, 0.0, 2.0)};
        CHECK_THROWS_AS(
            update_covariance(residuals, times, CovarianceFamily::Independent,
                              make_params(CovarianceFamily::Independent, 1.0)),
            std::runtime_error);

        std::vector<Vector> singletons{Vector::Ones(1), Vector::Ones(1)};
        std::vector<Vector> single_times{Vector::Zero(1), Vector::Ones(1)};
        CHECK_THROWS_AS(
            update_covariance(singletons, single_times,
                              CovarianceFamily::CompoundSymmetry,
                              make_params(CovarianceFamily::CompoundSymmetry, 1.0)),
            std::invalid_argument);
    }
}
