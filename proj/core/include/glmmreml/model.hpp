#pragma once

#include <Eigen/Dense>

#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "glmmreml/errors.hpp"

namespace glmmreml {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class FamilyKind { Bernoulli, Poisson, Gaussian };

/// Exponential family with its canonical link (logit, log, identity).
/// `phi` is fixed to 1 for Bernoulli and Poisson; for Gaussian it is the
/// known error variance.
struct Family {
    FamilyKind kind = FamilyKind::Bernoulli;
    double phi = 1.0;

    static Family bernoulli() { return {FamilyKind::Bernoulli, 1.0}; }
    static Family poisson() { return {FamilyKind::Poisson, 1.0}; }
    static Family gaussian(double error_variance = 1.0) { return {FamilyKind::Gaussian, error_variance}; }
};

std::string to_string(FamilyKind kind);

enum class LinkFn { G, GInv, GPrime };

double link_eval(const Family& family, LinkFn which, double x);
double variance_fn(const Family& family, double mu);

/// Canonical-link cumulant b(eta) and its first two derivatives.
double cumulant(const Family& family, double eta);
double mean_of_eta(const Family& family, double eta);
double variance_of_eta(const Family& family, double eta);

/// Clamp a mean into the open interior of the family's mean domain.
double pin_mean(const Family& family, double mu);

inline constexpr double kMeanPin = 1e-10;
inline constexpr double kWeightFloor = 1e-10;

/// Log density of one observation given its linear predictor. The prior
/// weight `a` scales the conditional variance (Var = phi * a * V(mu)).
double log_density(const Family& family, double y, double eta, double a = 1.0);

/// Rows of one cluster, copied out of the full design for locality.
struct ClusterData {
    MatrixXd X;
    MatrixXd Z;
    VectorXd y;
    VectorXd a;
    std::vector<Eigen::Index> rows;

    Eigen::Index size() const { return y.size(); }
};

/// Independent-cluster design. Cluster labels may be arbitrary integers;
/// they are mapped to 0..m-1 in order of first appearance.
class Dataset {
public:
    Dataset() = default;
    Dataset(VectorXd y, MatrixXd X, MatrixXd Z, std::vector<int> cluster_labels, VectorXd prior_weights = {});

    Eigen::Index n() const { return y_.size(); }
    Eigen::Index p() const { return X_.cols(); }
    Eigen::Index q() const { return Z_.cols(); }
    Eigen::Index m() const { return static_cast<Eigen::Index>(clusters_.size()); }

    const VectorXd& y() const { return y_; }
    const MatrixXd& X() const { return X_; }
    const MatrixXd& Z() const { return Z_; }
    const VectorXd& a() const { return a_; }
    const std::vector<int>& cluster_index() const { return cluster_index_; }
    const std::vector<int>& cluster_labels() const { return labels_; }
    const std::vector<ClusterData>& clusters() const { return clusters_; }

    /// Same design with a new response vector.
    Dataset with_response(const VectorXd& y) const;

    /// Throws DomainError when y is outside the family's support.
    void check_family(const Family& family) const;

private:
    VectorXd y_;
    MatrixXd X_;
    MatrixXd Z_;
    VectorXd a_;
    std::vector<int> cluster_index_;
    std::vector<int> labels_;
    std::vector<ClusterData> clusters_;
};

/// Reads `y, x1..xp, z1..zq, cluster` CSV (header required).
Dataset read_dataset_csv(std::istream& in);
void write_dataset_csv(std::ostream& out, const Dataset& data);

/// Unconstrained log-Cholesky coordinates of a q x q covariance.
/// Full: row-wise lower triangle (log L11, L21, log L22, ...).
/// diag_only: (log L11, ..., log Lqq) with off-diagonals pinned at zero.
struct CovParams {
    VectorXd theta;
    int q = 1;
    bool diag_only = false;

    static int dim(int q, bool diag_only);
    static CovParams from_matrix(const MatrixXd& D, bool diag_only = false);
};

struct CovMatrices {
    MatrixXd D;
    MatrixXd D_inv;
    MatrixXd L;
    double log_det = 0.0;
    std::vector<MatrixXd> dD;  // dD/dtheta_r
};

CovMatrices build_cov(const CovParams& params);

/// v'D^-1 v through the Cholesky factor; stays accurate when D is nearly singular.
double inv_quad(const CovMatrices& cov, const VectorXd& v);

/// Family plus random-effects layout shared by every estimator.
struct GlmmSpec {
    Family family;
    int q = 1;
    bool diag_only = false;
};

enum class Method {
    PQL_ML,
    PQL_REML,
    MQL_REML,
    LAPLACE_ML,
    LAPLACE_REML,
    MPL_ML,
    MPL_REML,
    DBC_ML,
    DBC_REML,
    IDEAL
};

std::string to_string(Method method);
Method method_from_string(const std::string& name);

/// Random effects stored column-per-cluster: q x m.
using RandomEffects = MatrixXd;

struct FitResult {
    VectorXd beta;
    MatrixXd Sigma;
    RandomEffects u;
    Method method = Method::PQL_REML;
    bool converged = false;
    bool unstable = false;
    int iterations = 0;
    double objective = std::numeric_limits<double>::quiet_NaN();
    CovParams theta;
    std::vector<std::string> notes;

    void fail(std::string why) {
        converged = false;
        notes.push_back(std::move(why));
    }
};

VectorXd linear_predictor(const Dataset& data, const VectorXd& beta, const RandomEffects& u);

double cond_loglik(const Family& family, const Dataset& data, const VectorXd& eta);

/// Sum over clusters of log N(u_i; 0, D), constants included.
double random_effects_logdensity(const CovMatrices& cov, const RandomEffects& u);

double joint_loglik(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const RandomEffects& u,
                    const CovParams& theta);

struct JointGradient {
    VectorXd beta;
    RandomEffects u;
    VectorXd theta;
};

JointGradient joint_loglik_gradient(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta,
                                    const RandomEffects& u, const CovParams& theta);

/// h(theta; S)_r = tr[D^-1 (S - D) D^-1 dD/dtheta_r].
VectorXd h_function(const CovMatrices& cov, const MatrixXd& S);

/// Nearest PSD matrix by eigenvalue flooring; returns the number of floored eigenvalues.
int project_psd(MatrixXd& S, double floor);

}  // namespace glmmreml
