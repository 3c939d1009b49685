#include "lsvcmm/inference.hpp"
#include "lsvcmm/selection.hpp"
#include "lsvcmm/simulation.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <map>
#include <stdexcept>

namespace py = pybind11;
using namespace lsvcmm;

namespace {

LongitudinalDataset dataset_from_arrays(const std::vector<std::string>& subject,
                                        const Vector& time, const Vector& response,
                                        const Matrix& design,
                                        std::vector<std::string> names) {
    const Index n = time.size();
    if (static_cast<Index>(subject.size()) != n || response.size() != n ||
        design.rows() != n)
        throw std::invalid_argument("subject, time, response and design rows must align");
    if (names.empty())
        for (Index c = 0; c < design.cols(); ++c) names.push_back("x" + std::to_string(c));
    if (static_cast<Index>(names.size()) != design.cols())
        throw std::invalid_argument("covariate names must match the design columns");

    struct Row {
        double time;
        double response;
        Index at;
    };
    std::vector<std::string> order;
    std::map<std::string, std::vector<Row>> groups;
    for (Index r = 0; r < n; ++r) {
        const std::string& id = subject[static_cast<std::size_t>(r)];
        if (groups.find(id) == groups.end()) order.push_back(id);
        groups[id].push_back({time(r), response(r), r});
    }
    LongitudinalDataset data;
    data.covariate_names = std::move(names);
    for (const auto& id : order) {
        auto& rows = groups[id];
        std::stable_sort(rows.begin(), rows.end(),
                         [](const Row& a, const Row& b) { return a.time < b.time; });
        SubjectRecord record;
        record.id = id;
        record.times.resize(static_cast<Index>(rows.size()));
        record.responses.resize(static_cast<Index>(rows.size()));
        record.design.resize(static_cast<Index>(rows.size()), design.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) {
            record.times(static_cast<Index>(k)) = rows[k].time;
            record.responses(static_cast<Index>(k)) = rows[k].response;
            record.design.row(static_cast<Index>(k)) = design.row(rows[k].at);
        }
        data.subjects.push_back(std::move(record));
    }
    data.validate();
    return data;
}

TimeGrid grid_from_vector(const Vector& points, const LongitudinalDataset& data) {
    if (points.size() == 0) return default_grid(data);
    TimeGrid grid;
    grid.points = points;
    grid.validate();
    return grid;
}

VarianceParams params_from_args(const std::string& family, double sigma2, double ratio,
                                double rho) {
    VarianceParams params;
    params.family = family_from_name(family);
    params.sigma2 = sigma2;
    params.ratio = ratio;
    params.rho = rho;
    params.validate();
    return params;
}

py::dict variance_to_dict(const VarianceParams& params) {
    py::dict out;
    out["family"] = family_name(params.family);
    out["sigma2"] = params.sigma2;
    out["ratio"] = params.ratio;
    out["rho"] = params.rho;
    return out;
}

py::dict fit_to_dict(const PathResult& path, const TimeGrid& grid) {
    const PathEntry& entry = path.selected_entry();
    py::dict out;
    out["grid"] = grid.points;
    out["coefficients"] = entry.fit.coefficients.values;
    out["penalized"] = entry.fit.coefficients.penalized;
    py::dict selected;
    selected["h"] = entry.h;
    selected["lambda"] = entry.lambda;
    selected["df"] = entry.df;
    selected["ebic"] = entry.ebic;
    out["selected"] = selected;
    out["variance"] = variance_to_dict(entry.fit.params);
    out["calibration"] = variance_to_dict(entry.calibration);
    out["group_weights"] = entry.penalty.group_weights;
    out["entry_weights"] = entry.penalty.entry_weights;
    out["alpha"] = entry.penalty.alpha;
    out["converged"] = entry.fit.converged;
    out["quasi_loglik"] = entry.fit.quasi_loglik;
    out["kkt_residual"] = entry.fit.kkt_residual;
    std::vector<double> hs, lambdas, ebics;
    std::vector<long> dfs;
    for (const auto& e : path.entries) {
        hs.push_back(e.h);
        lambdas.push_back(e.lambda);
        dfs.push_back(e.df);
        ebics.push_back(e.ebic);
    }
    py::dict table;
    table["h"] = hs;
    table["lambda"] = lambdas;
    table["df"] = dfs;
    table["ebic"] = ebics;
    table["selected"] = path.selected;
    out["path"] = table;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Locally sparse varying-coefficient mixed models";

    m.def(
        "kernel_weight",
        [](double distance, double scale, double truncation_radius) {
            KernelConfig cfg;
            cfg.scale = scale;
            cfg.truncation_radius = truncation_radius;
            return kernel_weight(distance, cfg);
        },
        py::arg("distance"), py::arg("scale"), py::arg("truncation_radius") = 4.0);

    m.def("clr_transform", &clr_transform, py::arg("counts"),
          py::arg("pseudocount") = 0.5);

    m.def("prox_sgl", &prox_sgl, py::arg("row"), py::arg("step"), py::arg("lambda_"),
          py::arg("alpha"), py::arg("group_weight"), py::arg("entry_weights"));

    m.def(
        "penalty_value",
        [](const Matrix& coefficients, double lambda, double alpha,
           const Vector& group_weights, const Matrix& entry_weights,
           const std::vector<bool>& penalized) {
            PenaltyConfig cfg;
            cfg.lambda = lambda;
            cfg.alpha = alpha;
            cfg.group_weights = group_weights;
            cfg.entry_weights = entry_weights;
            cfg.penalized = penalized;
            return penalty_value(coefficients, cfg);
        },
        py::arg("coefficients"), py::arg("lambda_"), py::arg("alpha"),
        py::arg("group_weights"), py::arg("entry_weights"), py::arg("penalized"));

    m.def(
        "covariance_matrix",
        [](const Vector& times, const std::string& family, double sigma2, double ratio,
           double rho) {
            return covariance_matrix(times, params_from_args(family, sigma2, ratio, rho));
        },
        py::arg("times"), py::arg("family"), py::arg("sigma2") = 1.0,
        py::arg("ratio") = 0.0, py::arg("rho") = 0.0);

    m.def(
        "quasi_loglik",
        [](const std::vector<Vector>& residuals, const std::vector<Vector>& times,
           const std::string& family, double sigma2, double ratio, double rho) {
            return quasi_loglik(residuals, times,
                                params_from_args(family, sigma2, ratio, rho));
        },
        py::arg("residuals"), py::arg("times"), py::arg("family"),
        py::arg("sigma2") = 1.0, py::arg("ratio") = 0.0, py::arg("rho") = 0.0);

    m.def(
        "update_covariance",
        [](const std::vector<Vector>& residuals, const std::vector<Vector>& times,
           const std::string& family) {
            VarianceParams start;
            start.family = family_from_name(family);
            return variance_to_dict(
                update_covariance(residuals, times, start.family, start));
        },
        py::arg("residuals"), py::arg("times"), py::arg("family"));

    m.def(
        "evaluate",
        [](const Vector& estimate, const Vector& truth) {
            const Metrics metrics = evaluate(estimate, truth);
            py::dict out;
            out["mae"] = metrics.mae;
            out["accuracy"] = metrics.accuracy;
            out["tpr"] = metrics.tpr;
            out["fdr"] = metrics.fdr;
            return out;
        },
        py::arg("estimate"), py::arg("truth"));

    m.def(
        "simulate",
        [](const std::string& scenario, int n_subjects, double sigma2, double ratio,
           double missing_frac_points, double missing_frac_subjects,
           int points_per_subject, bool flip_null_region, std::uint64_t seed) {
            ScenarioParams params;
            params.scenario = scenario_from_name(scenario);
            params.n_subjects = n_subjects;
            params.sigma2 = sigma2;
            params.ratio = ratio;
            params.missing_frac_points = missing_frac_points;
            params.missing_frac_subjects = missing_frac_subjects;
            params.points_per_subject = points_per_subject;
            params.flip_null_region = flip_null_region;
            const SimulatedData sim = generate(params, seed);
            std::vector<std::string> subject;
            std::vector<double> time, response, group;
            for (const auto& record : sim.dataset.subjects)
                for (Index n = 0; n < record.n_obs(); ++n) {
                    subject.push_back(record.id);
                    time.push_back(record.times(n));
                    response.push_back(record.responses(n));
                    group.push_back(record.design(n, 1));
                }
            py::dict out;
            out["subject"] = subject;
            out["time"] = time;
            out["response"] = response;
            out["group"] = group;
            out["grid"] = sim.grid.points;
            out["truth"] = sim.truth;
            return out;
        },
        py::arg("scenario") = "regular-missing", py::arg("n_subjects") = 100,
        py::arg("sigma2") = 1.0, py::arg("ratio") = 1.0,
        py::arg("missing_frac_points") = 0.71, py::arg("missing_frac_subjects") = 0.71,
        py::arg("points_per_subject") = 10, py::arg("flip_null_region") = false,
        py::arg("seed") = 0);

    m.def(
        "fit",
        [](const std::vector<std::string>& subject, const Vector& time,
           const Vector& response, const Matrix& design,
           std::vector<std::string> names, std::vector<bool> penalized,
           const Vector& grid_points, std::vector<double> h_grid,
           const std::string& family, double alpha, double gamma, int n_lambda,
           double lambda_min_ratio, double ebic_gamma, double truncation_radius,
           double tol, int max_iter, int covariance_cycles, int threads) {
            const LongitudinalDataset data =
                dataset_from_arrays(subject, time, response, design, std::move(names));
            const TimeGrid grid = grid_from_vector(grid_points, data);
            if (penalized.empty())
                penalized.assign(static_cast<std::size_t>(data.n_covariates()), true);
            PathConfig cfg;
            cfg.h_grid = std::move(h_grid);
            cfg.n_lambda = n_lambda;
            cfg.lambda_min_ratio = lambda_min_ratio;
            cfg.ebic_gamma = ebic_gamma;
            cfg.threads = threads;
            cfg.fit.kernel.truncation_radius = truncation_radius;
            cfg.fit.penalty.alpha = alpha;
            cfg.fit.penalty.gamma = gamma;
            cfg.fit.penalty.penalized = std::move(penalized);
            cfg.fit.init_params.family = family_from_name(family);
            cfg.fit.tol = tol;
            cfg.fit.max_iter = max_iter;
            cfg.fit.covariance_cycles = covariance_cycles;
            const PathResult path = fit_path(data, grid, cfg);
            return fit_to_dict(path, grid);
        },
        py::arg("subject"), py::arg("time"), py::arg("response"), py::arg("design"),
        py::arg("names") = std::vector<std::string>{},
        py::arg("penalized") = std::vector<bool>{},
        py::arg("grid") = Vector(), py::arg("h_grid") = std::vector<double>{},
        py::arg("family") = "compound_symmetry", py::arg("alpha") = 0.5,
        py::arg("gamma") = 1.0, py::arg("n_lambda") = 30,
        py::arg("lambda_min_ratio") = 1e-3, py::arg("ebic_gamma") = 1.0,
        py::arg("truncation_radius") = 4.0, py::arg("tol") = 1e-6,
        py::arg("max_iter") = 5000, py::arg("covariance_cycles") = 2,
        py::arg("threads") = 1);

    m.def(
        "bootstrap_bands",
        [](const std::vector<std::string>& subject, const Vector& time,
           const Vector& response, const Matrix& design,
           std::vector<std::string> names, const py::dict& model, int n_boot,
           double level, std::uint64_t seed, int threads, bool bonferroni,
           double truncation_radius, double tol, int max_iter, int covariance_cycles) {
            const LongitudinalDataset data =
                dataset_from_arrays(subject, time, response, design, std::move(names));
            TimeGrid grid;
            grid.points = model["grid"].cast<Vector>();
            CoefficientMatrix estimate;
            estimate.values = model["coefficients"].cast<Matrix>();
            estimate.grid = grid;
            estimate.penalized = model["penalized"].cast<std::vector<bool>>();

            const py::dict selected = model["selected"].cast<py::dict>();
            const py::dict variance = model["calibration"].cast<py::dict>();
            FitConfig refit;
            refit.kernel.scale = selected["h"].cast<double>();
            refit.kernel.truncation_radius = truncation_radius;
            refit.penalty.lambda = selected["lambda"].cast<double>();
            refit.penalty.alpha = model["alpha"].cast<double>();
            refit.penalty.group_weights = model["group_weights"].cast<Vector>();
            refit.penalty.entry_weights = model["entry_weights"].cast<Matrix>();
            refit.penalty.penalized = estimate.penalized;
            refit.init_params = params_from_args(
                variance["family"].cast<std::string>(), variance["sigma2"].cast<double>(),
                variance["ratio"].cast<double>(), variance["rho"].cast<double>());
            refit.tol = tol;
            refit.max_iter = max_iter;
            refit.covariance_cycles = covariance_cycles;

            BandConfig cfg;
            cfg.n_boot = n_boot;
            cfg.level = level;
            cfg.seed = seed;
            cfg.threads = threads;
            cfg.bonferroni = bonferroni;
            const BandResult bands = bootstrap_bands(data, grid, refit, estimate, cfg);
            py::dict out;
            out["lower"] = bands.lower;
            out["upper"] = bands.upper;
            out["se"] = bands.se;
            out["p_values"] = bands.p_values;
            out["multipliers"] = bands.multipliers;
            out["level"] = bands.level;
            out["n_boot"] = bands.n_boot;
            out["n_failed"] = bands.n_failed;
            return out;
        },
        py::arg("subject"), py::arg("time"), py::arg("response"), py::arg("design"),
        py::arg("names"), py::arg("model"), py::arg("n_boot") = 1000,
        py::arg("level") = 0.95, py::arg("seed") = 0, py::arg("threads") = 1,
        py::arg("bonferroni") = false, py::arg("truncation_radius") = 4.0,
        py::arg("tol") = 1e-6, py::arg("max_iter") = 5000,
        py::arg("covariance_cycles") = 2);

    m.attr("__version__") = "0.1.0";
}
