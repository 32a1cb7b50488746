#pragma once

#include <Eigen/Dense>

#include <vector>

#include "glmmreml/model.hpp"

namespace glmmreml {

struct QuadRule {
    enum class Kind { AdaptiveGH, GaussLegendreBox };
    int nodes_per_dim = 25;
    Kind kind = Kind::AdaptiveGH;
    double box_halfwidth = 6.0;  // in posterior standard deviations, box rule only
};

/// One-dimensional rules from the Golub-Welsch eigenproblem.
/// Hermite uses the weight exp(-t^2) on the real line, Legendre the unit weight on [-1, 1].
struct Rule1d {
    VectorXd nodes;
    VectorXd weights;
};
Rule1d gauss_hermite(int n);
Rule1d gauss_legendre(int n);

/// Tensor grid in standardized coordinates s, already pruned. `log_weight` includes
/// every factor other than the integrand and the 1/|L| scale of the adaptive map.
struct QuadGrid {
    MatrixXd s;  // q x K
    VectorXd log_weight;
};

/// Shared, thread-safe cache keyed by (rule, q).
const QuadGrid& quad_grid(const QuadRule& rule, int q);

enum QuadMoments : unsigned {
    kLogLikOnly = 0,
    kScoreBeta = 1u << 0,
    kHessianBeta = 1u << 1,
    kMomentUU = 1u << 2,
};

struct ClusterIntegral {
    double loglik = 0.0;
    VectorXd mode;
    VectorXd score_beta;    // d loglik / d beta
    MatrixXd hessian_beta;  // d^2 loglik / d beta d beta'
    MatrixXd Euu;           // E(u u' | y)
};

/// Maximizer over u of log p(y | offset + Z u) - u'D^-1 u / 2 by damped Newton.
/// On return `H_llt` holds the factorized negative Hessian Z'WZ + D^-1 at the mode.
VectorXd conditional_mode(const Family& family, const ClusterData& cluster, const VectorXd& offset,
                          const CovMatrices& cov, VectorXd start, Eigen::LLT<MatrixXd>& H_llt);

/// Adaptive quadrature over one cluster's random effects, centred at the
/// conditional mode with scale from the conditional curvature.
ClusterIntegral integrate_cluster(const Family& family, const ClusterData& cluster, const VectorXd& beta,
                                  const CovMatrices& cov, const QuadRule& rule, unsigned moments,
                                  const VectorXd* warm_mode = nullptr);

double cluster_marginal_loglik(const GlmmSpec& spec, const ClusterData& cluster, const VectorXd& beta,
                               const CovParams& theta, const QuadRule& rule = {});
double total_marginal_loglik(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta,
                             const CovParams& theta, const QuadRule& rule = {});
VectorXd cluster_score_beta(const GlmmSpec& spec, const ClusterData& cluster, const VectorXd& beta,
                            const CovParams& theta, const QuadRule& rule = {});
MatrixXd cond_moment_uuT(const GlmmSpec& spec, const ClusterData& cluster, const VectorXd& beta,
                         const CovParams& theta, const QuadRule& rule = {});

/// Sum over clusters with the requested moments; per-cluster pieces kept on request.
struct MarginalSweep {
    double loglik = 0.0;
    VectorXd score_beta;
    MatrixXd hessian_beta;
    VectorXd score_theta;  // 1/2 sum_i h(theta; E(u_i u_i' | y_i)); needs kMomentUU
    std::vector<VectorXd> cluster_scores;
    std::vector<MatrixXd> cluster_Euu;
};

/// `modes` (q x m), when given, seeds the inner mode searches and receives the new modes.
MarginalSweep marginal_sweep(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta,
                             const CovMatrices& cov, const QuadRule& rule, unsigned moments,
                             bool keep_clusters = false, MatrixXd* modes = nullptr);

struct ProfileOptions {
    int max_iter = 50;
    double gtol = 1e-8;
};

/// Maximizer of the marginal likelihood over beta at fixed theta (Newton on the
/// quadrature score and Hessian). Throws ProfileError when the score cannot be
/// driven below 1e-6.
VectorXd profile_beta(const GlmmSpec& spec, const Dataset& data, const CovParams& theta, const QuadRule& rule,
                      const VectorXd& init, const ProfileOptions& opts = {}, MatrixXd* modes = nullptr);

}  // namespace glmmreml
