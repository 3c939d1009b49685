#pragma once

#include "lsvcmm/data.hpp"
#include "lsvcmm/rng.hpp"

#include <string>
#include <vector>

namespace lsvcmm::testing {

inline SubjectRecord make_subject(const std::string& id, std::vector<double> times,
                                  std::vector<double> responses,
                                  std::vector<std::vector<double>> design) {
    SubjectRecord subject;
    subject.id = id;
    subject.times = Eigen::Map<const Vector>(times.data(),
                                             static_cast<Index>(times.size()));
    subject.responses = Eigen::Map<const Vector>(responses.data(),
                                                 static_cast<Index>(responses.size()));
    subject.design.resize(static_cast<Index>(design.size()),
                          static_cast<Index>(design.front().size()));
    for (std::size_t r = 0; r < design.size(); ++r)
        for (std::size_t c = 0; c < design[r].size(); ++c)
            subject.design(static_cast<Index>(r), static_cast<Index>(c)) = design[r][c];
    return subject;
}

inline TimeGrid make_grid(std::vector<double> points) {
    TimeGrid grid;
    grid.points = Eigen::Map<const Vector>(points.data(),
                                           static_cast<Index>(points.size()));
    return grid;
}

// Small random panel: n subjects on a shared grid with per-observation
// designs, responses pure noise plus an optional group effect.
inline LongitudinalDataset random_dataset(Rng& rng, int n_subjects, int n_obs, int p,
                                          double noise = 1.0) {
    LongitudinalDataset data;
    for (int c = 0; c < p; ++c) data.covariate_names.push_back("x" + std::to_string(c));
    for (int i = 0; i < n_subjects; ++i) {
        SubjectRecord subject;
        subject.id = std::to_string(i);
        subject.times.resize(n_obs);
        subject.responses.resize(n_obs);
        subject.design.resize(n_obs, p);
        for (int n = 0; n < n_obs; ++n) {
            subject.times(n) = (n + rng.uniform() * 0.5) / n_obs;
            subject.responses(n) = noise * rng.normal();
            subject.design(n, 0) = 1.0;
            for (int c = 1; c < p; ++c) subject.design(n, c) = rng.normal();
        }
        data.subjects.push_back(std::move(subject));
    }
    return data;
}

}  // namespace lsvcmm::testing
