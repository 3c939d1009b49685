#include "lsvcmm/io.hpp"
#include "lsvcmm/rng.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <random>
#include <string>

namespace {

using nlohmann::json;

std::uint64_t fresh_seed() {
    std::random_device device;
    return (static_cast<std::uint64_t>(device()) << 32) ^ device();
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::filesystem::create_directories(dir);
}

// The JSON config file provides defaults; any flag given on the command
// line overrides the corresponding field.
lsvcmm::RunConfig load_config(int argc, char** argv, bool& seed_in_config) {
    lsvcmm::RunConfig cfg;
    seed_in_config = false;
    for (int k = 1; k + 1 < argc; ++k) {
        if (std::string(argv[k]) == "--config") {
            const json j = json::parse(lsvcmm::read_text_file(argv[k + 1]));
            cfg = j.get<lsvcmm::RunConfig>();
            seed_in_config = j.contains("seed");
            break;
        }
    }
    return cfg;
}

struct FitFlags {
    std::vector<int> penalize;
    double h = 0.0;
    std::string config_path;
};

void add_common_fit_options(CLI::App* cmd, lsvcmm::RunConfig& cfg, FitFlags& flags) {
    cmd->add_option("--config", flags.config_path,
                    "JSON config file providing defaults")
        ->check(CLI::ExistingFile);
    cmd->add_option("--input", cfg.input, "long-format CSV input");
    cmd->add_option("--subject", cfg.subject_column, "subject id column");
    cmd->add_option("--time", cfg.time_column, "time column");
    cmd->add_option("--response", cfg.response_column, "response column");
    cmd->add_option("--covariates", cfg.covariates, "covariate columns")
        ->delimiter(',');
    cmd->add_option("--penalize", flags.penalize,
                    "per-covariate 0/1 penalty flags (default: all 1)")
        ->delimiter(',');
    cmd->add_flag("!--no-intercept", cfg.add_intercept,
                  "do not add an intercept column");
    cmd->add_flag("--penalize-intercept", cfg.penalize_intercept,
                  "penalize the intercept row as well");
    cmd->add_flag("--clr", cfg.clr, "apply a centered log-ratio transform");
    cmd->add_option("--pseudocount", cfg.pseudocount, "clr pseudocount");
    cmd->add_option("--counts", cfg.counts_columns, "count columns for --clr")
        ->delimiter(',');
    cmd->add_option("--h", flags.h, "single kernel scale");
    cmd->add_option("--h-grid", cfg.h_grid, "kernel scale grid")->delimiter(',');
    cmd->add_option("--truncation-radius", cfg.truncation_radius,
                    "kernel truncation radius in units of h");
    cmd->add_option("--grid", cfg.grid, "evaluation grid (default: observed times)")
        ->delimiter(',');
    cmd->add_option("--alpha", cfg.alpha, "penalty mix in [0,1]");
    cmd->add_option("--gamma", cfg.gamma, "adaptive weight exponent");
    cmd->add_option("--n-lambda", cfg.n_lambda, "points on the lambda grid");
    cmd->add_option("--lambda-min-ratio", cfg.lambda_min_ratio,
                    "smallest lambda relative to lambda_max");
    cmd->add_option("--family", cfg.family,
                    "working covariance: independent|compound_symmetry|ar1");
    cmd->add_option("--ebic-gamma", cfg.ebic_gamma, "EBIC model-space weight");
    cmd->add_option("--tol", cfg.tol, "convergence tolerance");
    cmd->add_option("--max-iter", cfg.max_iter, "iteration cap per mean phase");
    cmd->add_option("--covariance-cycles", cfg.covariance_cycles,
                    "mean/covariance alternations");
    cmd->add_option("--out-dir", cfg.output_dir, "output directory");
    cmd->add_option("--threads", cfg.threads, "worker thread cap");
}

int run_fit(lsvcmm::RunConfig cfg) {
    lsvcmm::LongitudinalDataset data = lsvcmm::load_dataset(cfg);
    const lsvcmm::TimeGrid grid = lsvcmm::resolve_grid(cfg, data);
    const lsvcmm::PathConfig path_cfg = lsvcmm::resolve_path_config(cfg, data, grid);
    const lsvcmm::PathResult path = lsvcmm::fit_path(data, grid, path_cfg);

    ensure_dir(cfg.output_dir);
    const auto& entry = path.selected_entry();
    lsvcmm::write_coefficients_csv(join_path(cfg.output_dir, "coefficients.csv"),
                                   entry.fit.coefficients, data.covariate_names);
    lsvcmm::write_path_csv(join_path(cfg.output_dir, "path.csv"), path);
    const json model = lsvcmm::model_to_json(cfg, grid, data.covariate_names, path);
    lsvcmm::write_text_file(join_path(cfg.output_dir, "model.json"),
                            model.dump(2) + "\n");
    std::cout << "selected h=" << lsvcmm::format_double(entry.h)
              << " lambda=" << lsvcmm::format_double(entry.lambda)
              << " df=" << entry.df << " ebic=" << lsvcmm::format_double(entry.ebic)
              << "\n";
    return 0;
}

int run_bootstrap(const std::string& model_path, lsvcmm::RunConfig overrides,
                  bool seed_given, bool input_given, bool threads_given,
                  bool n_boot_given, bool level_given, bool bonferroni_given,
                  bool out_given) {
    const json j = json::parse(lsvcmm::read_text_file(model_path));
    lsvcmm::LoadedModel model = lsvcmm::model_from_json(j);
    if (input_given) model.config.input = overrides.input;
    if (out_given) model.config.output_dir = overrides.output_dir;
    if (threads_given) model.config.threads = overrides.threads;
    if (n_boot_given) model.config.n_boot = overrides.n_boot;
    if (level_given) model.config.level = overrides.level;
    if (bonferroni_given) model.config.bonferroni = overrides.bonferroni;
    if (seed_given) model.config.seed = overrides.seed;

    lsvcmm::LongitudinalDataset data = lsvcmm::load_dataset(model.config);
    lsvcmm::BandConfig band_cfg;
    band_cfg.n_boot = model.config.n_boot;
    band_cfg.level = model.config.level;
    band_cfg.seed = model.config.seed;
    band_cfg.threads = model.config.threads;
    band_cfg.bonferroni = model.config.bonferroni;

    const lsvcmm::BandResult bands = lsvcmm::bootstrap_bands(
        data, model.grid, model.refit, model.estimate, band_cfg);

    ensure_dir(model.config.output_dir);
    lsvcmm::write_bands_csv(join_path(model.config.output_dir, "bands.csv"),
                            model.covariate_names, model.estimate, bands);
    lsvcmm::write_pvalues_csv(join_path(model.config.output_dir, "pvalues.csv"),
                              model.covariate_names, bands);
    std::cout << "bootstrap replicates=" << bands.n_boot << " failed=" << bands.n_failed
              << "\n";
    return 0;
}

int run_simulate(const lsvcmm::ScenarioParams& params, std::uint64_t seed,
                 const std::string& out_dir) {
    const lsvcmm::SimulatedData sim = lsvcmm::generate(params, seed);
    ensure_dir(out_dir);
    lsvcmm::write_dataset_csv(join_path(out_dir, "dataset.csv"), sim.dataset);
    lsvcmm::write_truth_csv(join_path(out_dir, "truth.csv"), sim.grid, sim.truth,
                            sim.dataset.covariate_names);
    json meta;
    meta["scenario"] = lsvcmm::scenario_name(params.scenario);
    meta["n_subjects"] = params.n_subjects;
    meta["sigma2"] = params.sigma2;
    meta["ratio"] = params.ratio;
    meta["missing_frac_points"] = params.missing_frac_points;
    meta["missing_frac_subjects"] = params.missing_frac_subjects;
    meta["points_per_subject"] = params.points_per_subject;
    meta["flip_null_region"] = params.flip_null_region;
    meta["seed"] = seed;
    lsvcmm::write_text_file(join_path(out_dir, "meta.json"), meta.dump(2) + "\n");
    std::cout << "wrote " << sim.dataset.n_subjects() << " subjects, "
              << sim.dataset.n_obs_total() << " observations\n";
    return 0;
}

int run_bench(const lsvcmm::ExperimentSpec& spec, const std::string& out_dir) {
    const std::vector<lsvcmm::ExperimentRow> rows = lsvcmm::run_experiment(spec);
    ensure_dir(out_dir);
    lsvcmm::write_experiment_csv(join_path(out_dir, "results.csv"), rows);
    json meta;
    meta["scenario"] = lsvcmm::scenario_name(spec.base.scenario);
    meta["experiment"] = spec.vary;
    meta["values"] = spec.axis_values();
    meta["n_reps"] = spec.n_reps;
    meta["seed"] = spec.seed;
    std::vector<std::string> names;
    for (const auto method : spec.methods) names.push_back(lsvcmm::method_name(method));
    meta["methods"] = names;
    lsvcmm::write_text_file(join_path(out_dir, "meta.json"), meta.dump(2) + "\n");
    std::cout << "wrote " << rows.size() << " result rows\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Locally sparse varying-coefficient mixed models"};
    app.set_help_flag("--help", "print help");
    app.require_subcommand(1);

    bool seed_in_config = false;
    lsvcmm::RunConfig cfg = [&] {
        try {
            return load_config(argc, argv, seed_in_config);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            std::exit(2);
        }
    }();
    FitFlags flags;

    auto* fit = app.add_subcommand("fit", "fit a penalized varying-coefficient model");
    fit->set_help_flag("--help", "print help");
    add_common_fit_options(fit, cfg, flags);
    auto* fit_seed = fit->add_option("--seed", cfg.seed, "seed recorded for bootstrap");

    auto* boot = app.add_subcommand("bootstrap", "simultaneous confidence bands");
    boot->set_help_flag("--help", "print help");
    std::string model_path;
    boot->add_option("--model", model_path, "model.json from a prior fit")
        ->required()
        ->check(CLI::ExistingFile);
    auto* b_input = boot->add_option("--input", cfg.input, "override the input CSV");
    auto* b_nboot = boot->add_option("--n-boot", cfg.n_boot, "bootstrap replicates");
    auto* b_level = boot->add_option("--level", cfg.level, "simultaneous level");
    auto* b_seed = boot->add_option("--seed", cfg.seed, "bootstrap seed");
    auto* b_threads = boot->add_option("--threads", cfg.threads, "worker thread cap");
    auto* b_bonf = boot->add_flag("--bonferroni", cfg.bonferroni,
                                  "Bonferroni multiplier cross-check mode");
    auto* b_out = boot->add_option("--out-dir", cfg.output_dir, "output directory");

    auto* sim = app.add_subcommand("simulate", "generate synthetic data");
    sim->set_help_flag("--help", "print help");
    lsvcmm::ScenarioParams params;
    std::string scenario_text = "regular-missing";
    std::string sim_out = ".";
    sim->add_option("--scenario", scenario_text, "regular-missing|irregular");
    sim->add_option("--n-subjects", params.n_subjects, "number of subjects");
    sim->add_option("--sigma2", params.sigma2, "noise variance");
    sim->add_option("--ratio", params.ratio, "random-intercept variance ratio");
    sim->add_option("--missing-frac-points", params.missing_frac_points,
                    "share of grid points eligible for deletion");
    sim->add_option("--missing-frac-subjects", params.missing_frac_subjects,
                    "share of subjects eligible for deletion");
    sim->add_option("--points-per-subject", params.points_per_subject,
                    "observed points per subject (irregular)");
    sim->add_flag("--flip-null-region", params.flip_null_region,
                  "null region on the other side of t = 0.45 (irregular)");
    auto* sim_seed = sim->add_option("--seed", params.seed, "generator seed");
    sim->add_option("--out-dir", sim_out, "output directory");

    auto* bench = app.add_subcommand("bench", "estimator benchmark harness");
    bench->set_help_flag("--help", "print help");
    lsvcmm::ExperimentSpec spec;
    std::string bench_scenario = "regular-missing";
    std::string bench_out = ".";
    std::vector<std::string> bench_methods;
    bench->add_option("--scenario", bench_scenario, "regular-missing|irregular");
    bench->add_option("--experiment", spec.vary,
                      "sigma2|missingness|ratio|n_subjects");
    bench->add_option("--values", spec.values, "experiment axis values")
        ->delimiter(',');
    bench->add_option("--methods", bench_methods, "subset of LSVCMM,LSVCM,ALasso")
        ->delimiter(',');
    bench->add_option("--n-reps", spec.n_reps, "replicates per setting");
    bench->add_option("--n-subjects", spec.base.n_subjects, "number of subjects");
    bench->add_option("--sigma2", spec.base.sigma2, "noise variance");
    bench->add_option("--ratio", spec.base.ratio, "random-intercept variance ratio");
    bench->add_option("--h", spec.method.h, "kernel scale for the smoothed methods");
    bench->add_option("--n-lambda", spec.method.n_lambda, "points on the lambda grid");
    auto* bench_seed = bench->add_option("--seed", spec.seed, "root seed");
    bench->add_option("--threads", spec.threads, "worker thread cap");
    bench->add_option("--out-dir", bench_out, "output directory");

    try {
        app.parse(argc, argv);

        if (fit->parsed()) {
            if (!flags.penalize.empty()) {
                cfg.penalize.clear();
                for (const int v : flags.penalize) cfg.penalize.push_back(v != 0);
            }
            if (flags.h > 0.0) cfg.h_grid = {flags.h};
            if (fit_seed->count() == 0 && !seed_in_config) cfg.seed = fresh_seed();
            return run_fit(cfg);
        }
        if (boot->parsed()) {
            return run_bootstrap(model_path, cfg, b_seed->count() > 0,
                                 b_input->count() > 0, b_threads->count() > 0,
                                 b_nboot->count() > 0, b_level->count() > 0,
                                 b_bonf->count() > 0, b_out->count() > 0);
        }
        if (sim->parsed()) {
            params.scenario = lsvcmm::scenario_from_name(scenario_text);
            const std::uint64_t seed =
                sim_seed->count() > 0 ? params.seed : fresh_seed();
            return run_simulate(params, seed, sim_out);
        }
        if (bench->parsed()) {
            spec.base.scenario = lsvcmm::scenario_from_name(bench_scenario);
            if (!bench_methods.empty()) {
                spec.methods.clear();
                for (const auto& name : bench_methods)
                    spec.methods.push_back(lsvcmm::method_from_name(name));
            }
            if (bench_seed->count() == 0) spec.seed = fresh_seed();
            return run_bench(spec, bench_out);
        }
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
