#include <doctest.h>

#include <cmath>
#include <random>

#include "glmmreml/working_model.hpp"
#include "oracles.hpp"

using namespace glmmreml;

namespace {

// Dense (p + m q) system for cross-checks.
MatrixXd dense_A(const Dataset& data, const VectorXd& W, const MatrixXd& D_inv) {
    const oracle::Lmm lmm(data, 1.0);
    const Eigen::Index p = data.p(), mq = lmm.Zfull.cols();
    MatrixXd C(data.n(), p + mq);
    C << data.X(), lmm.Zfull;
    MatrixXd A = C.transpose() * W.asDiagonal() * C;
    for (Eigen::Index i = 0; i < data.m(); ++i) A.block(p + i * data.q(), p + i * data.q(), data.q(), data.q()) += D_inv;
    return A;
}

}  // namespace

TEST_CASE("adjusted response hand values") {
    const Dataset one(VectorXd::Ones(1), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1), {0});
    auto s = adjusted_response(Family::bernoulli(), one, VectorXd::Zero(1), RandomEffects::Zero(1, 1));
    CHECK(s.xi(0) == doctest::Approx(2.0));
    CHECK(s.W(0) == doctest::Approx(0.25));

    const Dataset two(VectorXd::Constant(1, 2.0), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1), {0});
    s = adjusted_response(Family::poisson(), two, VectorXd::Zero(1), RandomEffects::Zero(1, 1));
    CHECK(s.xi(0) == doctest::Approx(1.0));
    CHECK(s.W(0) == doctest::Approx(1.0));

    std::mt19937_64 rng(2);
    const auto lmm = oracle::random_lmm(rng, 4, 3, 2, 1, MatrixXd::Identity(1, 1), VectorXd::Ones(2), 1.0);
    s = adjusted_response(Family::gaussian(), lmm, VectorXd::Constant(2, 0.3), RandomEffects::Constant(1, 4, -0.2));
    CHECK((s.xi - lmm.y()).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((s.W.array() - 1.0).abs().maxCoeff() < 1e-14);
}

TEST_CASE("adjusted response identity and positive weights") {
    std::mt19937_64 rng(8);
    for (const auto& fam : {Family::bernoulli(), Family::poisson()}) {
        const auto data = oracle::random_glmm(rng, fam, 6, 5, 2, 1, MatrixXd::Identity(1, 1), VectorXd::Zero(2));
        const VectorXd beta = (VectorXd(2) << 0.4, -1.1).finished();
        const RandomEffects u = RandomEffects::Random(1, 6);
        const auto s = adjusted_response(fam, data, beta, u);
        CHECK(s.W.minCoeff() > 0.0);
        for (Eigen::Index i = 0; i < data.n(); ++i) {
            const double mu = s.mu(i);
            CHECK(s.xi(i) == doctest::Approx(s.eta(i) + link_eval(fam, LinkFn::GPrime, mu) * (data.y()(i) - mu)));
            CHECK(1.0 / s.W(i) == doctest::Approx(variance_fn(fam, mu) * std::pow(link_eval(fam, LinkFn::GPrime, mu), 2)));
        }
    }
}

TEST_CASE("mixed model equations toy") {
    const Dataset d(VectorXd::Zero(2), MatrixXd::Ones(2, 1), MatrixXd::Ones(2, 1), {0, 1});
    const VectorXd xi = (VectorXd(2) << 2.0, 0.0).finished();
    const auto sol = solve_mme(d, VectorXd::Ones(2), MatrixXd::Identity(1, 1), xi);
    CHECK(sol.beta(0) == doctest::Approx(1.0));
    CHECK(sol.u(0, 0) == doctest::Approx(0.5));
    CHECK(sol.u(0, 1) == doctest::Approx(-0.5));

    // T from the factorization against direct inversion of the 3 x 3 system
    const BorderedSystem sys(d, VectorXd::Ones(2), MatrixXd::Identity(1, 1));
    const MatrixXd Ainv = dense_A(d, VectorXd::Ones(2), MatrixXd::Identity(1, 1)).inverse();
    CHECK((sys.full_T() - Ainv.bottomRightCorner(2, 2)).cwiseAbs().maxCoeff() < 1e-12);

    // no fixed effects: (I + I) u = v
    const Dataset nox(VectorXd::Zero(2), MatrixXd(2, 0), MatrixXd::Ones(2, 1), {0, 1});
    const VectorXd v = (VectorXd(2) << 3.0, -1.0).finished();
    const auto s0 = solve_mme(nox, VectorXd::Ones(2), MatrixXd::Identity(1, 1), v);
    CHECK(s0.beta.size() == 0);
    CHECK(s0.u(0, 0) == doctest::Approx(1.5));
    CHECK(s0.u(0, 1) == doctest::Approx(-0.5));
    const BorderedSystem sys0(nox, VectorXd::Ones(2), MatrixXd::Identity(1, 1));
    CHECK(sys0.T_block(0, 0)(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("bordered system against dense algebra") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> unif(0.2, 2.0);
    for (int trial = 0; trial < 5; ++trial) {
        MatrixXd D(2, 2);
        D << 0.8, 0.25, 0.25, 0.6;
        const auto data = oracle::random_lmm(rng, 5, 4, 3, 2, D, VectorXd::Zero(3), 1.0);
        VectorXd W(data.n());
        for (auto& w : W) w = unif(rng);
        const MatrixXd Dinv = D.inverse();
        const BorderedSystem sys(data, W, Dinv);
        const MatrixXd A = dense_A(data, W, Dinv);
        const MatrixXd Ainv = A.inverse();
        const Eigen::Index p = data.p();

        CHECK(sys.log_det() == doctest::Approx(std::log(A.determinant())).epsilon(1e-10));
        CHECK(oracle::rel_err(sys.to_dense(), A) < 1e-13);
        CHECK(oracle::rel_err(sys.full_T(), Ainv.bottomRightCorner(A.rows() - p, A.cols() - p)) < 1e-10);
        CHECK(oracle::rel_err(sys.T_block(1, 3), Ainv.block(p + 2, p + 6, 2, 2)) < 1e-9);
        VectorXd traces = VectorXd::Zero(2);
        for (Eigen::Index i = 0; i < data.m(); ++i) traces += Ainv.block(p + 2 * i, p + 2 * i, 2, 2).diagonal();
        CHECK(oracle::rel_err(sys.T_component_traces(), traces) < 1e-10);

        // Schur complement equals X'V^-1X with V = W^-1 + Z D Z'
        oracle::Lmm lmm(data, 1.0);
        MatrixXd V = lmm.V(D);
        V.diagonal() += W.cwiseInverse() - VectorXd::Ones(data.n());
        const MatrixXd XVX = data.X().transpose() * V.ldlt().solve(data.X());
        CHECK(oracle::rel_err(sys.schur(), XVX) < 1e-10);
        CHECK(oracle::rel_err(sys.schur_inverse(), Ainv.topLeftCorner(p, p)) < 1e-10);

        // solve against the dense solution
        VectorXd xi(data.n());
        for (auto& x : xi) x = unif(rng);
        const auto sol = solve_mme(sys, data, W, xi);
        MatrixXd C(data.n(), A.cols());
        C << data.X(), lmm.Zfull;
        const VectorXd dense = A.ldlt().solve(C.transpose() * W.asDiagonal() * xi);
        CHECK((sol.beta - dense.head(p)).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((Eigen::Map<const VectorXd>(sol.u.data(), sol.u.size()) - dense.tail(A.cols() - p)).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("T tends to D when D is small") {
    std::mt19937_64 rng(4);
    const auto data = oracle::random_lmm(rng, 3, 4, 2, 1, MatrixXd::Identity(1, 1), VectorXd::Zero(2), 1.0);
    const double d = 1e-9;
    const BorderedSystem sys(data, VectorXd::Ones(data.n()), MatrixXd::Constant(1, 1, 1.0 / d));
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(sys.T_block(i, i)(0, 0) == doctest::Approx(d).epsilon(1e-6));
}

TEST_CASE("weighted least squares limit") {
    std::mt19937_64 rng(9);
    const auto data = oracle::random_lmm(rng, 4, 5, 3, 1, MatrixXd::Identity(1, 1), VectorXd::Ones(3), 1.0);
    VectorXd W = VectorXd::LinSpaced(data.n(), 0.5, 1.5);
    const auto sol = solve_mme(data, W, MatrixXd::Constant(1, 1, 1e14), data.y());
    const MatrixXd XtW = data.X().transpose() * W.asDiagonal();
    const VectorXd wls = (XtW * data.X()).ldlt().solve(XtW * data.y());
    CHECK((sol.beta - wls).cwiseAbs().maxCoeff() < 1e-8);
}
