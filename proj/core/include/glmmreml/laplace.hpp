#pragma once

#include "glmmreml/model.hpp"
#include "glmmreml/working_model.hpp"

namespace glmmreml {

enum class InnerOver { U_only, Beta_and_U };

struct InnerMode {
    VectorXd beta;
    RandomEffects u;
    double joint = 0.0;          // joint log-likelihood at the mode
    double log_det_omega = 0.0;  // log det of the negated Hessian over the maximized block
    int iterations = 0;
};

/// Newton maximization of the joint log-likelihood over u (beta held at `beta`)
/// or over (beta, u) jointly (`beta` is the starting value). Throws
/// InnerModeError after 100 unsuccessful steps.
InnerMode inner_mode(const GlmmSpec& spec, const Dataset& data, const CovParams& theta, InnerOver over,
                     const VectorXd& beta, const RandomEffects* warm_u = nullptr, double tol = 1e-10);

/// Negated Hessian of the joint log-likelihood in (beta, u), dense, for checks.
MatrixXd joint_neg_hessian(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const RandomEffects& u,
                           const CovParams& theta);

struct LaplaceSettings {
    bool expanded_form = false;  // REML only: the theta-dependent terms after block elimination
    double inner_tol = 1e-10;
    int max_iter = 300;
    double gtol = 1e-6;
    double log_sd_lower = -9.0;  // bounds on the log-Cholesky diagonal
    double log_sd_upper = 8.0;
    bool accept_stall = true;  // near a singular Sigma the objective is flat to rounding
};

/// Laplace approximation to the marginal log-likelihood at (beta, theta),
/// constants included. `grad`, when given, receives d/d(beta, theta).
/// `warm_u` seeds the mode search and is updated in place.
double laplace_ml_objective(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                            VectorXd* grad = nullptr, RandomEffects* warm_u = nullptr);

/// Laplace approximation to the integrated likelihood with a flat prior on
/// beta. `mode`, when given, seeds the search and receives the new joint mode.
double laplace_reml_objective(const GlmmSpec& spec, const Dataset& data, const CovParams& theta,
                              VectorXd* grad = nullptr, InnerMode* mode = nullptr, const LaplaceSettings& settings = {});

FitResult laplace_fit(const GlmmSpec& spec, const Dataset& data, bool reml, const LaplaceSettings& settings = {},
                      const FitResult* init = nullptr);

}  // namespace glmmreml
