#pragma once

#include <Eigen/Dense>

#include <vector>

#include "glmmreml/model.hpp"

namespace glmmreml {

/// Linearized response and weights at the current (beta, u).
struct WorkingState {
    VectorXd xi;   // adjusted dependent variable
    VectorXd W;    // diagonal of the working weight matrix
    VectorXd eta;
    VectorXd mu;
};

WorkingState adjusted_response(const Family& family, const Dataset& data, const VectorXd& beta,
                               const RandomEffects& u);
WorkingState working_state_at(const Family& family, const Dataset& data, const VectorXd& eta);

/// Cluster-blocked factorization of
///
///   A = [ X'WX   X'WZ         ]
///       [ Z'WX   Z'WZ + D^-1  ]
///
/// with Z block diagonal across clusters. Eliminating the random-effect
/// blocks leaves the p x p Schur complement X'WX - sum X_i'W_i Z_i Auu_i^-1 Z_i'W_i X_i,
/// which equals X'V^-1 X for V = W^-1 + Z D Z'.
class BorderedSystem {
public:
    BorderedSystem(const Dataset& data, const VectorXd& W, const MatrixXd& D_inv);

    Eigen::Index p() const { return p_; }
    Eigen::Index q() const { return q_; }
    Eigen::Index m() const { return static_cast<Eigen::Index>(auu_.size()); }

    /// Solves A (b, u) = (rb, ru); ru is q x m, one column per cluster.
    void solve(const VectorXd& rb, const MatrixXd& ru, VectorXd& b, MatrixXd& u) const;

    double log_det() const { return log_det_uu_ + log_det_schur_; }
    double log_det_uu() const { return log_det_uu_; }
    double log_det_schur() const { return log_det_schur_; }
    const MatrixXd& schur() const { return schur_; }
    MatrixXd schur_inverse() const;

    /// (Z_i'W_i Z_i + D^-1)^-1
    MatrixXd uu_inverse(Eigen::Index i) const;
    /// Auu_i^-1 Z_i'W_i X_i, q x p
    const MatrixXd& cross(Eigen::Index i) const { return auu_inv_abu_t_[static_cast<std::size_t>(i)]; }
    const Eigen::LLT<MatrixXd>& uu_factor(Eigen::Index i) const { return auu_[static_cast<std::size_t>(i)]; }

    /// Block (i, j) of the trailing random-effect block of A^-1.
    MatrixXd T_block(Eigen::Index i, Eigen::Index j) const;
    MatrixXd full_T() const;
    /// Per-component sums over clusters of diag(T_ii), length q.
    VectorXd T_component_traces() const;

    MatrixXd to_dense() const;

private:
    Eigen::Index p_ = 0;
    Eigen::Index q_ = 0;
    MatrixXd abb_;
    std::vector<MatrixXd> abu_;  // X_i'W_i Z_i, p x q
    std::vector<Eigen::LLT<MatrixXd>> auu_;
    std::vector<MatrixXd> auu_inv_abu_t_;  // Auu_i^-1 Abu_i', q x p
    MatrixXd schur_;
    Eigen::LLT<MatrixXd> schur_llt_;
    double log_det_uu_ = 0.0;
    double log_det_schur_ = 0.0;
};

struct MmeSolution {
    VectorXd beta;
    RandomEffects u;
};

/// Henderson mixed model equations with right-hand side (X'W xi, Z'W xi).
MmeSolution solve_mme(const BorderedSystem& system, const Dataset& data, const VectorXd& W, const VectorXd& xi);
MmeSolution solve_mme(const Dataset& data, const VectorXd& W, const MatrixXd& D_inv, const VectorXd& xi);

}  // namespace glmmreml
