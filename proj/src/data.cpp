#include "lsvcmm/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lsvcmm {

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument(message);
}

}  // namespace

void SubjectRecord::validate() const {
    require(times.size() >= 1, "subject '" + id + "' has no observations");
    require(responses.size() == times.size() && design.rows() == times.size(),
            "subject '" + id + "' has inconsistent times/responses/design lengths");
    for (Index n = 1; n < times.size(); ++n)
        require(times(n) > times(n - 1),
                "subject '" + id + "' times are not strictly increasing");
    require(times.allFinite() && responses.allFinite() && design.allFinite(),
            "subject '" + id + "' contains non-finite values");
}

Index LongitudinalDataset::n_obs_total() const {
    Index total = 0;
    for (const auto& s : subjects) total += s.n_obs();
    return total;
}

void LongitudinalDataset::validate() const {
    require(!subjects.empty(), "dataset has no subjects");
    const Index p = n_covariates();
    std::set<std::string> seen;
    for (const auto& s : subjects) {
        s.validate();
        require(s.design.cols() == p,
                "subject '" + s.id + "' design has wrong number of covariates");
        require(seen.insert(s.id).second, "duplicate subject id '" + s.id + "'");
    }
}

void TimeGrid::validate() const {
    require(points.size() >= 1, "time grid is empty");
    require(points.allFinite(), "time grid contains non-finite values");
    for (Index s = 1; s < points.size(); ++s)
        require(points(s) > points(s - 1), "time grid is not strictly increasing");
}

void CoefficientMatrix::validate() const {
    grid.validate();
    require(values.cols() == grid.size(),
            "coefficient matrix width does not match the grid");
    require(static_cast<Index>(penalized.size()) == values.rows(),
            "penalty mask length does not match the coefficient rows");
    require(values.allFinite(), "coefficient matrix contains non-finite values");
}

void KernelConfig::validate() const {
    require(std::isfinite(scale) && scale > 0.0, "kernel scale must be positive");
    require(truncation_radius >= 3.0, "kernel truncation radius must be >= 3");
}

double kernel_weight(double distance, const KernelConfig& cfg) {
    cfg.validate();
    require(std::isfinite(distance), "kernel distance must be finite");
    const double u = distance / cfg.scale;
    if (std::abs(u) > cfg.truncation_radius) return 0.0;
    return kInvSqrt2Pi * std::exp(-0.5 * u * u) / cfg.scale;
}

Vector kernel_vector(double t, const SubjectRecord& subject, const KernelConfig& cfg) {
    cfg.validate();
    subject.validate();
    Vector weights(subject.n_obs());
    for (Index n = 0; n < subject.n_obs(); ++n)
        weights(n) = kernel_weight(t - subject.times(n), cfg);
    return weights;
}

TimeGrid default_grid(const LongitudinalDataset& data) {
    data.validate();
    std::vector<double> all;
    for (const auto& s : data.subjects)
        for (Index n = 0; n < s.n_obs(); ++n) all.push_back(s.times(n));
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    TimeGrid grid;
    grid.points = Eigen::Map<const Vector>(all.data(), static_cast<Index>(all.size()));
    return grid;
}

std::vector<std::vector<Index>> grid_indices(const LongitudinalDataset& data,
                                             const TimeGrid& grid) {
    grid.validate();
    const double tolerance = 1e-8 * grid.range();
    std::vector<std::vector<Index>> indices(data.subjects.size());
    for (std::size_t i = 0; i < data.subjects.size(); ++i) {
        const auto& subject = data.subjects[i];
        indices[i].resize(static_cast<std::size_t>(subject.n_obs()));
        for (Index n = 0; n < subject.n_obs(); ++n) {
            const double t = subject.times(n);
            const double* begin = grid.points.data();
            const double* end = begin + grid.points.size();
            const double* lower = std::lower_bound(begin, end, t);
            Index best = static_cast<Index>(lower - begin);
            if (best == grid.points.size()) best -= 1;
            if (best > 0 &&
                std::abs(grid.points(best - 1) - t) <= std::abs(grid.points(best) - t))
                best -= 1;
            if (std::abs(grid.points(best) - t) > tolerance) {
                std::ostringstream msg;
                msg << "observed time " << t << " of subject '" << subject.id
                    << "' does not match any grid point";
                throw std::invalid_argument(msg.str());
            }
            indices[i][static_cast<std::size_t>(n)] = best;
        }
    }
    return indices;
}

MeanResiduals mean_and_residuals(const LongitudinalDataset& data,
                                 const CoefficientMatrix& coef) {
    data.validate();
    coef.validate();
    require(coef.n_rows() == data.n_covariates(),
            "coefficient rows do not match the dataset covariates");
    const auto indices = grid_indices(data, coef.grid);
    MeanResiduals out;
    out.means.reserve(data.subjects.size());
    out.residuals.reserve(data.subjects.size());
    for (std::size_t i = 0; i < data.subjects.size(); ++i) {
        const auto& subject = data.subjects[i];
        Vector mean(subject.n_obs());
        for (Index n = 0; n < subject.n_obs(); ++n) {
            const Index s = indices[i][static_cast<std::size_t>(n)];
            mean(n) = subject.design.row(n).dot(coef.values.col(s));
        }
        out.means.push_back(mean);
        out.residuals.push_back(subject.responses - mean);
    }
    return out;
}

Matrix clr_transform(const Matrix& counts, double pseudocount) {
    require(std::isfinite(pseudocount) && pseudocount > 0.0,
            "pseudocount must be positive");
    require(counts.allFinite() && (counts.array() >= 0.0).all(),
            "counts must be nonnegative");
    Matrix out = (counts.array() + pseudocount).log().matrix();
    const Vector row_means = out.rowwise().mean();
    out.colwise() -= row_means;
    return out;
}

}  // namespace lsvcmm
