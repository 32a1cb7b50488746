#include "glmmreml/working_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace glmmreml {

namespace {

double log_det_llt(const Eigen::LLT<MatrixXd>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

WorkingState working_state_at(const Family& family, const Dataset& data, const VectorXd& eta) {
    const Eigen::Index n = data.n();
    WorkingState s{VectorXd(n), VectorXd(n), eta, VectorXd(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = pin_mean(family, mean_of_eta(family, eta(i)));
        const double gp = link_eval(family, LinkFn::GPrime, mu);
        const double v = variance_fn(family, mu);
        s.mu(i) = mu;
        s.xi(i) = eta(i) + gp * (data.y()(i) - mu);
        s.W(i) = std::max(1.0 / (family.phi * data.a()(i) * v * gp * gp), kWeightFloor);
    }
    return s;
}

WorkingState adjusted_response(const Family& family, const Dataset& data, const VectorXd& beta,
                               const RandomEffects& u) {
    const VectorXd eta = linear_predictor(data, beta, u);
    if (!eta.allFinite()) throw NumericalError("non-finite linear predictor");
    return working_state_at(family, data, eta);
}

BorderedSystem::BorderedSystem(const Dataset& data, const VectorXd& W, const MatrixXd& D_inv)
    : p_(data.p()), q_(data.q()) {
    if (W.size() != data.n()) throw std::invalid_argument("weight vector length differs from n");
    if (D_inv.rows() != q_ || D_inv.cols() != q_) throw std::invalid_argument("D^-1 has the wrong shape");

    abb_ = MatrixXd::Zero(p_, p_);
    schur_ = MatrixXd::Zero(p_, p_);
    const auto& clusters = data.clusters();
    abu_.reserve(clusters.size());
    auu_.reserve(clusters.size());
    auu_inv_abu_t_.reserve(clusters.size());
    for (std::size_t k = 0; k < clusters.size(); ++k) {
        const auto& c = clusters[k];
        VectorXd w(c.size());
        for (Eigen::Index r = 0; r < c.size(); ++r) w(r) = W(c.rows[static_cast<std::size_t>(r)]);
        const MatrixXd WX = w.asDiagonal() * c.X;
        abb_.noalias() += c.X.transpose() * WX;
        abu_.push_back(WX.transpose() * c.Z);
        MatrixXd auu = c.Z.transpose() * w.asDiagonal() * c.Z + D_inv;
        auu_.emplace_back(auu);
        if (auu_.back().info() != Eigen::Success || !(auu_.back().matrixLLT().diagonal().array() > 0).all())
            throw SingularSystemError("random-effects block of cluster " + std::to_string(k) +
                                      " is not positive definite");
        log_det_uu_ += log_det_llt(auu_.back());
        auu_inv_abu_t_.push_back(auu_.back().solve(abu_.back().transpose()));
    }
    schur_ = abb_;
    for (std::size_t k = 0; k < clusters.size(); ++k) schur_.noalias() -= abu_[k] * auu_inv_abu_t_[k];
    schur_ = 0.5 * (schur_ + schur_.transpose()).eval();
    if (p_ > 0) {
        schur_llt_.compute(schur_);
        if (schur_llt_.info() != Eigen::Success || !(schur_llt_.matrixLLT().diagonal().array() > 0).all())
            throw SingularSystemError("fixed-effects Schur complement is not positive definite");
        log_det_schur_ = log_det_llt(schur_llt_);
    }
}

void BorderedSystem::solve(const VectorXd& rb, const MatrixXd& ru, VectorXd& b, MatrixXd& u) const {
    const Eigen::Index mm = m();
    VectorXd rhs = rb;
    for (Eigen::Index k = 0; k < mm; ++k) rhs.noalias() -= auu_inv_abu_t_[k].transpose() * ru.col(k);
    b = p_ > 0 ? VectorXd(schur_llt_.solve(rhs)) : VectorXd(0);
    u.resize(q_, mm);
    for (Eigen::Index k = 0; k < mm; ++k) {
        VectorXd r = ru.col(k);
        if (p_ > 0) r.noalias() -= abu_[k].transpose() * b;
        u.col(k) = auu_[k].solve(r);
    }
}

MatrixXd BorderedSystem::schur_inverse() const {
    if (p_ == 0) return MatrixXd(0, 0);
    return schur_llt_.solve(MatrixXd::Identity(p_, p_));
}

MatrixXd BorderedSystem::uu_inverse(Eigen::Index i) const {
    return auu_[i].solve(MatrixXd::Identity(q_, q_));
}

MatrixXd BorderedSystem::T_block(Eigen::Index i, Eigen::Index j) const {
    MatrixXd out = MatrixXd::Zero(q_, q_);
    if (i == j) out = uu_inverse(i);
    if (p_ > 0) out.noalias() += auu_inv_abu_t_[i] * schur_llt_.solve(auu_inv_abu_t_[j].transpose());
    return out;
}

MatrixXd BorderedSystem::full_T() const {
    const Eigen::Index mm = m();
    MatrixXd T(q_ * mm, q_ * mm);
    for (Eigen::Index i = 0; i < mm; ++i)
        for (Eigen::Index j = 0; j < mm; ++j) T.block(i * q_, j * q_, q_, q_) = T_block(i, j);
    return T;
}

VectorXd BorderedSystem::T_component_traces() const {
    VectorXd tr = VectorXd::Zero(q_);
    for (Eigen::Index i = 0; i < m(); ++i) tr += T_block(i, i).diagonal();
    return tr;
}

MatrixXd BorderedSystem::to_dense() const {
    const Eigen::Index mm = m();
    MatrixXd A = MatrixXd::Zero(p_ + q_ * mm, p_ + q_ * mm);
    A.topLeftCorner(p_, p_) = abb_;
    for (Eigen::Index k = 0; k < mm; ++k) {
        A.block(0, p_ + k * q_, p_, q_) = abu_[k];
        A.block(p_ + k * q_, 0, q_, p_) = abu_[k].transpose();
        A.block(p_ + k * q_, p_ + k * q_, q_, q_) = auu_[k].reconstructedMatrix();
    }
    return A;
}

MmeSolution solve_mme(const BorderedSystem& system, const Dataset& data, const VectorXd& W, const VectorXd& xi) {
    if (xi.size() != data.n()) throw std::invalid_argument("working response length differs from n");
    const VectorXd Wxi = W.cwiseProduct(xi);
    const VectorXd rb = data.X().transpose() * Wxi;
    MatrixXd ru = MatrixXd::Zero(data.q(), data.m());
    const auto& idx = data.cluster_index();
    for (Eigen::Index i = 0; i < data.n(); ++i) ru.col(idx[i]) += data.Z().row(i).transpose() * Wxi(i);
    MmeSolution out;
    system.solve(rb, ru, out.beta, out.u);
    return out;
}

MmeSolution solve_mme(const Dataset& data, const VectorXd& W, const MatrixXd& D_inv, const VectorXd& xi) {
    const BorderedSystem system(data, W, D_inv);
    return solve_mme(system, data, W, xi);
}

}  // namespace glmmreml
