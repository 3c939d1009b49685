#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace lsvcmm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// One sampling unit: observation times with the responses and design rows
/// aligned to them. Subjects with constant covariates store one row per
/// observation anyway, so time-varying covariates need no special casing.
struct SubjectRecord {
    std::string id;
    Vector times;      // strictly increasing
    Vector responses;  // same length as times
    Matrix design;     // n_obs x p

    [[nodiscard]] Index n_obs() const { return times.size(); }

    void validate() const;
};

struct LongitudinalDataset {
    std::vector<SubjectRecord> subjects;
    std::vector<std::string> covariate_names;

    [[nodiscard]] Index n_subjects() const { return static_cast<Index>(subjects.size()); }
    [[nodiscard]] Index n_covariates() const { return static_cast<Index>(covariate_names.size()); }
    [[nodiscard]] Index n_obs_total() const;

    void validate() const;
};

struct TimeGrid {
    Vector points;  // strictly increasing

    [[nodiscard]] Index size() const { return points.size(); }
    [[nodiscard]] double range() const {
        return points.size() > 0 ? points(points.size() - 1) - points(0) : 0.0;
    }

    void validate() const;
};

/// Varying-coefficient values on a grid: row j holds coefficient j evaluated
/// at every grid point. `penalized[j] == false` exempts row j from shrinkage.
struct CoefficientMatrix {
    Matrix values;  // p x S
    TimeGrid grid;
    std::vector<bool> penalized;

    [[nodiscard]] Index n_rows() const { return values.rows(); }
    [[nodiscard]] Index n_points() const { return values.cols(); }

    void validate() const;
};

/// Gaussian smoothing kernel, hard-truncated to zero beyond
/// truncation_radius * scale.
struct KernelConfig {
    double scale = 0.2;
    double truncation_radius = 4.0;

    void validate() const;
};

/// k(d / h) / h with k the standard normal density; exactly zero past the
/// truncation radius.
double kernel_weight(double distance, const KernelConfig& cfg);

/// Kernel weights from grid time t to every observation time of a subject.
Vector kernel_vector(double t, const SubjectRecord& subject, const KernelConfig& cfg);

/// Sorted unique observation times across all subjects.
TimeGrid default_grid(const LongitudinalDataset& data);

/// Maps every observed time to a grid index. A time matches the nearest grid
/// point when within 1e-8 * grid range; anything farther is an error naming
/// the subject and time (silent interpolation would change the estimator).
std::vector<std::vector<Index>> grid_indices(const LongitudinalDataset& data,
                                             const TimeGrid& grid);

struct MeanResiduals {
    std::vector<Vector> means;
    std::vector<Vector> residuals;
};

/// Per-subject fitted means x_in' B[:, grid(t_in)] and residuals y - mean.
MeanResiduals mean_and_residuals(const LongitudinalDataset& data,
                                 const CoefficientMatrix& coef);

/// Centered log-ratio transform of a samples x taxa count matrix:
/// log(counts + pseudocount), centered within each row.
Matrix clr_transform(const Matrix& counts, double pseudocount);

}  // namespace lsvcmm
