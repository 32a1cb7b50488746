#pragma once

#include <vector>

#include "glmmreml/model.hpp"
#include "glmmreml/quadrature.hpp"

namespace glmmreml {

struct MplSettings {
    /// Auto uses the exact score covariance X'V^-1 X for Gaussian responses and
    /// the empirical outer-product estimate otherwise.
    enum class Correction { Auto, Empirical, ExpectedGaussian };

    QuadRule rule;
    Correction correction = Correction::Auto;
    bool literal_abs_det = false;  // 1/2 log|det(d2 l / d beta2)| instead of 1/2 log det J
    double unstable_threshold = 5.0;
    int max_iter = 300;
    double gtol = 1e-6;
    double fd_step = 1e-4;
    double log_sd_lower = -9.0;
    double log_sd_upper = 8.0;
    bool accept_stall = true;
};

/// Joint quasi-Newton maximization of the quadrature marginal likelihood over (beta, theta).
FitResult ml_fit(const GlmmSpec& spec, const Dataset& data, const MplSettings& settings = {},
                 const FitResult* init = nullptr);

/// Observed information J = -d2 l_M / d beta d beta' (Louis identity under quadrature).
MatrixXd beta_hessian(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                      const QuadRule& rule = {});

/// Per-cluster scores at the unrestricted ML fit, computed once per REML fit.
struct MlAnchor {
    VectorXd beta;
    CovParams theta;
    std::vector<VectorXd> scores;
};

MlAnchor make_anchor(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta_hat, const CovParams& theta_hat,
                     const QuadRule& rule = {});

/// sum_i s_i(beta_hat, theta_hat) s_i(beta_theta, theta)'
MatrixXd correction_C(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta_hat, const CovParams& theta_hat,
                      const VectorXd& beta_theta, const CovParams& theta, const QuadRule& rule = {});

struct MplTerms {
    double value = 0.0;
    double profile = 0.0;     // l_P(theta)
    double log_det_J = 0.0;
    double log_det_C = 0.0;
    VectorXd beta_theta;
};

/// l_P(theta) + 1/2 log det J(beta_theta, theta) - log |det C(theta)|.
/// `beta_theta` seeds the profile search when non-empty and receives the new value.
/// Returns -inf when J is not positive definite or C is singular.
MplTerms mpl_objective(const GlmmSpec& spec, const Dataset& data, const CovParams& theta, const MlAnchor& anchor,
                       const MplSettings& settings = {}, const VectorXd* beta_start = nullptr);

/// Requires an unrestricted fit for the anchor; computes one when `ml` is null.
FitResult mpl_fit(const GlmmSpec& spec, const Dataset& data, const MplSettings& settings = {},
                  const FitResult* ml = nullptr);

/// Profile likelihood in theta with beta pinned at its true value.
FitResult ideal_fit(const GlmmSpec& spec, const Dataset& data, const VectorXd& true_beta,
                    const MplSettings& settings = {}, const CovParams* start = nullptr);

/// Marks fits with a variance above the threshold.
bool exceeds_variance(const MatrixXd& Sigma, double threshold);

}  // namespace glmmreml
