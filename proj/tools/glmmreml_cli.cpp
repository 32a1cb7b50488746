#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "glmmreml/dbc.hpp"
#include "glmmreml/laplace.hpp"
#include "glmmreml/linearization.hpp"
#include "glmmreml/mpl.hpp"
#include "glmmreml/simulation.hpp"

using namespace glmmreml;
using nlohmann::json;

namespace {

std::vector<Method> parse_methods(const std::string& list) {
    std::vector<Method> out;
    std::stringstream ss(list);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(method_from_string(tok));
    if (out.empty()) throw std::invalid_argument("no methods given");
    return out;
}

json matrix_json(const MatrixXd& A) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        json r = json::array();
        for (Eigen::Index j = 0; j < A.cols(); ++j) r.push_back(A(i, j));
        rows.push_back(r);
    }
    return rows;
}

json vector_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json fit_json(const FitResult& f) {
    return {{"method", to_string(f.method)},
            {"converged", f.converged},
            {"unstable", f.unstable},
            {"iterations", f.iterations},
            {"objective", std::isfinite(f.objective) ? json(f.objective) : json(nullptr)},
            {"beta", vector_json(f.beta)},
            {"Sigma", matrix_json(f.Sigma)},
            {"theta", vector_json(f.theta.theta)},
            {"u", matrix_json(f.u.transpose())},
            {"notes", f.notes}};
}

FitResult fit_one(const GlmmSpec& spec, const Dataset& data, Method method, const QuadRule& rule, std::uint64_t seed,
                  int dbc_iters) {
    MplSettings mpl;
    mpl.rule = rule;
    DbcSettings dbc;
    dbc.rule = rule;
    dbc.seed = seed;
    dbc.outer_iters = dbc_iters;
    PqlSettings pql;
    switch (method) {
        case Method::PQL_ML: pql.reml = false; return pql_fit(spec, data, pql);
        case Method::PQL_REML: return pql_fit(spec, data, pql);
        case Method::MQL_REML: return mql_fit(spec, data, pql);
        case Method::LAPLACE_ML: return laplace_fit(spec, data, false);
        case Method::LAPLACE_REML: return laplace_fit(spec, data, true);
        case Method::MPL_ML: {
            const auto init = laplace_fit(spec, data, false);
            return ml_fit(spec, data, mpl, init.converged ? &init : nullptr);
        }
        case Method::MPL_REML: {
            const auto init = laplace_fit(spec, data, false);
            const auto ml = ml_fit(spec, data, mpl, init.converged ? &init : nullptr);
            return mpl_fit(spec, data, mpl, &ml);
        }
        case Method::DBC_ML: return dbc_solve(spec, data, false, dbc);
        case Method::DBC_REML: {
            const auto ml = dbc_solve(spec, data, false, dbc);
            return dbc_solve(spec, data, true, dbc, &ml);
        }
        case Method::IDEAL: break;
    }
    throw std::invalid_argument("the ideal estimator needs the true fixed effects; use `study`");
}

Family family_from(const std::string& name, double phi) {
    if (name == "binary" || name == "bernoulli") return Family::bernoulli();
    if (name == "poisson") return Family::poisson();
    if (name == "gaussian") return Family::gaussian(phi);
    throw std::invalid_argument("unknown family '" + name + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GLMM variance-component estimation"};
    app.require_subcommand(1);

    std::string family = "binary", methods = "pql,pql-reml,laplace,laplace-reml", out_dir = "study_out";
    int scenario = 1, reps = 500, clusters = 50, cluster_size = 10, threads = 1, quad_nodes = 25, dbc_iters = 50;
    std::uint64_t seed = 1;
    auto* study = app.add_subcommand("study", "simulate a scenario and fit every requested method");
    study->add_option("--family", family, "binary or poisson")->check(CLI::IsMember({"binary", "poisson"}));
    study->add_option("--scenario", scenario, "scenario number")->check(CLI::Range(1, 4));
    study->add_option("--reps", reps)->check(CLI::PositiveNumber);
    study->add_option("--seed", seed);
    study->add_option("--methods", methods, "comma-separated, e.g. pql,pql-reml,laplace,mpl-reml,dbc,ideal");
    study->add_option("--clusters", clusters)->check(CLI::Range(2, 1000000));
    study->add_option("--cluster-size", cluster_size)->check(CLI::PositiveNumber);
    study->add_option("--out", out_dir, "output directory");
    study->add_option("--threads", threads)->check(CLI::PositiveNumber);
    study->add_option("--quad-nodes", quad_nodes, "Gauss-Hermite nodes per dimension")->check(CLI::Range(5, 100));
    study->add_option("--dbc-iters", dbc_iters)->check(CLI::PositiveNumber);

    std::string data_path, method = "laplace-reml", fit_family = "binary";
    double phi = 1.0;
    bool diag_only = false;
    auto* fit = app.add_subcommand("fit", "fit one CSV dataset and print the result as JSON");
    fit->add_option("data", data_path, "CSV with columns y, x1..xp, z1..zq, cluster")->required()->check(CLI::ExistingFile);
    fit->add_option("--method", method);
    fit->add_option("--family", fit_family, "binary, poisson or gaussian");
    fit->add_option("--phi", phi, "known error variance (gaussian)");
    fit->add_flag("--diag-only", diag_only, "diagonal random-effects covariance");
    fit->add_option("--quad-nodes", quad_nodes)->check(CLI::Range(5, 100));
    fit->add_option("--seed", seed, "Monte Carlo seed (dbc)");
    fit->add_option("--dbc-iters", dbc_iters)->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        QuadRule rule;
        rule.nodes_per_dim = quad_nodes;
        if (*study) {
            const auto config = ScenarioConfig::make(family == "binary" ? FamilyKind::Bernoulli : FamilyKind::Poisson,
                                                     scenario, clusters, cluster_size);
            StudyOptions opts;
            opts.methods = parse_methods(methods);
            opts.reps = reps;
            opts.seed = seed;
            opts.threads = threads;
            opts.rule = rule;
            opts.dbc_iters = dbc_iters;
            const auto result = run_study(config, opts);

            std::filesystem::create_directories(out_dir);
            const std::filesystem::path dir(out_dir);
            const auto p = config.true_beta.size();
            const auto q = config.true_Sigma.rows();
            std::ofstream estimates(dir / "estimates.csv");
            write_estimates_csv(estimates, result.estimates, p, q);
            std::ofstream summary(dir / "summary.csv");
            write_summary_csv(summary, result.summary);
            std::ofstream failures(dir / "failures.csv");
            write_failures_csv(failures, result.estimates);
            std::ofstream timings(dir / "timings.csv");
            write_timings_csv(timings, result.estimates);

            for (const auto& [m, n] : result.summary.failures)
                std::cout << to_string(m) << ": " << n << " failed, " << result.summary.unstable.at(m)
                          << " unstable\n";
            const std::string sigma_name = "Sigma11";
            for (const auto& r : result.summary.rows)
                if (r.parameter == sigma_name && r.vs == "truth")
                    std::cout << to_string(r.method) << " Sigma11 bias " << r.mean_bias << " sd " << r.sd << '\n';
        } else {
            std::ifstream in(data_path);
            const Dataset data = read_dataset_csv(in);
            GlmmSpec spec;
            spec.family = family_from(fit_family, phi);
            spec.q = static_cast<int>(data.q());
            spec.diag_only = diag_only;
            const auto result = fit_one(spec, data, method_from_string(method), rule, seed, dbc_iters);
            std::cout << fit_json(result).dump(2) << '\n';
            return result.converged ? 0 : 2;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
