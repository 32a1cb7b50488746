#pragma once

#include <cstdint>
#include <vector>

#include "glmmreml/model.hpp"
#include "glmmreml/quadrature.hpp"
#include "glmmreml/random.hpp"

namespace glmmreml {

struct DbcSettings {
    /// Auto takes the closed form for Gaussian responses and Monte Carlo otherwise.
    enum class BiasMode { Auto, MonteCarlo, ExactGaussian };

    int outer_iters = 50;
    int mc_reps_per_cluster = 1;  // simulated datasets per outer iteration
    std::uint64_t seed = 1;
    QuadRule rule;
    BiasMode bias_mode = BiasMode::Auto;
    bool running_average = true;  // average bias draws across iterations
    bool force_zero_bias = false;
    double tol = 0.0;  // > 0 stops once max |dSigma| / max |Sigma| drops below it
    double psd_floor = 1e-8;
    double divergence_bound = 1e6;
    int max_mc_errors = 5;
    double unstable_threshold = 5.0;
};

/// Monte Carlo estimate of E_y E(uu'|beta_hat_theta, theta; y) - E_y E(uu'|beta, theta; y),
/// averaged over clusters and `draws` simulated datasets generated at (beta, theta).
MatrixXd bias_estimate(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                       const QuadRule& rule, Rng& rng, int draws = 1);

/// Exact bias for a Gaussian response: -(1/m) sum_i D Z_i'V_i^-1 X_i (X'V^-1 X)^-1 X_i'V_i^-1 Z_i D.
MatrixXd gaussian_bias(const Family& family, const Dataset& data, const CovParams& theta);

/// Mean over clusters of E(u_i u_i' | y_i) at (beta, theta).
MatrixXd mean_cond_moment(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                          const QuadRule& rule, MatrixXd* modes = nullptr);

/// Root in D of h(theta; S): S itself, or its diagonal, projected to the PSD cone.
MatrixXd moment_root(const MatrixXd& S, bool diag_only, double floor, int* floored = nullptr);

struct DbcTrace {
    std::vector<MatrixXd> Sigma;  // starting value first, then one entry per iteration
    std::vector<VectorXd> beta;   // beta_hat_theta at each Sigma
    MatrixXd S;                   // mean conditional moment at the returned theta
    MatrixXd bias;                // bias used in the last update
    int psd_floored = 0;
    int mc_errors = 0;
};

/// Iterates D <- root of h(theta; S(theta) - bias) for a fixed number of
/// iterations (or until `tol`). reml=false drops the bias term.
/// Without `init` the start is a Laplace ML fit.
FitResult dbc_solve(const GlmmSpec& spec, const Dataset& data, bool reml, const DbcSettings& settings = {},
                    const FitResult* init = nullptr, DbcTrace* trace = nullptr);

}  // namespace glmmreml
