#pragma once

#include <optional>

#include "glmmreml/model.hpp"
#include "glmmreml/working_model.hpp"

namespace glmmreml {

struct PqlSettings {
    enum class VarianceUpdate { FixedPoint, ProfileOptimize };

    int max_outer_iter = 1000;
    double tol = 1e-6;
    VarianceUpdate variance_update = VarianceUpdate::ProfileOptimize;
    bool reml = true;
    int max_inner_iter = 50;
    double inner_tol = 1e-8;
    double variance_floor = 1e-8;
};

/// Working-model objective at a given beta:
/// -1/2 log|V| - 1/2 (xi - X beta)' V^-1 (xi - X beta) [- 1/2 log|X'V^-1 X| when reml],
/// with V = W^-1 + Z D Z' and additive constants omitted.
double pql_objective_theta(const CovParams& theta, const VectorXd& xi, const VectorXd& beta, const VectorXd& W,
                           const Dataset& data, bool reml);

/// Same objective with beta replaced by its GLS estimate at theta. Optionally
/// returns the analytic gradient in theta and the GLS beta.
double pql_profile_objective(const CovParams& theta, const VectorXd& xi, const VectorXd& W, const Dataset& data,
                             bool reml, VectorXd* grad = nullptr, VectorXd* beta_gls = nullptr);

/// sigma2 <- u'u / (q_k - trace(T_kk) / sigma2). Throws BoundaryError when the
/// numerator vanishes or the denominator is not positive.
double schall_update(const VectorXd& u_k, double trace_T_kk, double sigma2_k);

/// Fixed-effects-only GLM by iteratively reweighted least squares.
VectorXd glm_fit(const Family& family, const Dataset& data, int max_iter = 50, double tol = 1e-10);

FitResult pql_fit(const GlmmSpec& spec, const Dataset& data, const PqlSettings& settings = {},
                  const FitResult* init = nullptr);

/// Marginal linearization about u = 0; reports the BLUP of u at the final fit.
FitResult mql_fit(const GlmmSpec& spec, const Dataset& data, const PqlSettings& settings = {});

}  // namespace glmmreml
