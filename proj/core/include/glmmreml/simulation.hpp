#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "glmmreml/model.hpp"
#include "glmmreml/quadrature.hpp"
#include "glmmreml/random.hpp"

namespace glmmreml {

/// Clustered binary (logit, random intercept and slope) or count (log, random
/// intercept) design. Scenario 1 has four informative fixed effects; 2 and 3
/// append 4 and 10 null cluster-level covariates; 4 (binary only) correlates
/// the intercept and slope.
struct ScenarioConfig {
    FamilyKind family = FamilyKind::Bernoulli;
    int scenario = 1;
    int m = 50;
    int cluster_size = 10;
    VectorXd true_beta;
    MatrixXd true_Sigma;

    static ScenarioConfig make(FamilyKind family, int scenario, int m = 50, int cluster_size = 10);

    int extra_covariates() const;
    GlmmSpec spec() const;
};

struct Covariates {
    VectorXd x;
    VectorXd z;
};

/// Design row of observation j (1-based) in cluster i (1-based). `noise` holds
/// the cluster's null covariates and may be empty for Scenario 1 and 4.
Covariates make_covariates(const ScenarioConfig& config, int i, int j, const VectorXd& noise = {});

/// Cluster-level null covariates, m x extra, drawn once per (seed, scenario).
MatrixXd design_noise(const ScenarioConfig& config, std::uint64_t seed);

/// Responses set to zero; the design alone.
Dataset scenario_design(const ScenarioConfig& config, std::uint64_t seed);

/// Reproducible from (seed, rep) alone.
Dataset simulate_dataset(const ScenarioConfig& config, std::uint64_t seed, int rep, RandomEffects* u_out = nullptr);

struct StudyOptions {
    std::vector<Method> methods;
    int reps = 500;
    std::uint64_t seed = 1;
    int threads = 1;
    QuadRule rule;
    int dbc_iters = 50;
    double unstable_threshold = 5.0;
};

/// One row per (replication, method).
struct EstimateRow {
    int rep = 0;
    Method method = Method::PQL_ML;
    bool converged = false;
    bool unstable = false;
    VectorXd beta;
    MatrixXd Sigma;
    std::string note;
    double seconds = 0.0;

    bool usable() const { return converged && !unstable; }
};

struct SummaryRow {
    Method method = Method::PQL_ML;
    std::string parameter;
    std::string vs;  // "truth" or "ideal"
    int n = 0;
    double mean_bias = 0.0;
    double sd = 0.0;
    double rmse = 0.0;
};

struct StudySummary {
    std::vector<SummaryRow> rows;
    std::map<Method, int> failures;
    std::map<Method, int> unstable;
    int reps = 0;
    std::uint64_t seed = 0;

    /// Row lookup; throws std::out_of_range when absent.
    const SummaryRow& at(Method method, const std::string& parameter, const std::string& vs = "truth") const;
};

struct StudyResult {
    std::vector<EstimateRow> estimates;  // ordered by rep, then by the requested method order
    StudySummary summary;
};

/// Fits one replication with every requested method.
std::vector<EstimateRow> fit_replication(const ScenarioConfig& config, const Dataset& data, int rep,
                                         const StudyOptions& options);

StudyResult run_study(const ScenarioConfig& config, const StudyOptions& options);

/// Parameter names in output order: beta0..beta{p-1}, then the lower triangle Sigma11, Sigma21, Sigma22, ...
std::vector<std::string> parameter_names(Eigen::Index p, Eigen::Index q);

/// Usable estimates only. Rows compared against `ideal` are paired by rep and
/// cover the Sigma entries; a usable estimate without an ideal row for its rep
/// raises AlignmentError, as does a repeated (method, rep) pair.
StudySummary summarize(const std::vector<EstimateRow>& estimates, const VectorXd& true_beta,
                       const MatrixXd& true_Sigma, const std::vector<EstimateRow>* ideal = nullptr);

void write_estimates_csv(std::ostream& out, const std::vector<EstimateRow>& rows, Eigen::Index p, Eigen::Index q);
void write_timings_csv(std::ostream& out, const std::vector<EstimateRow>& rows);
void write_summary_csv(std::ostream& out, const StudySummary& summary);
void write_failures_csv(std::ostream& out, const std::vector<EstimateRow>& rows);

}  // namespace glmmreml
