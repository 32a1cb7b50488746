#include <doctest.h>

#include <cmath>
#include <random>

#include "glmmreml/mpl.hpp"
#include "oracles.hpp"

using namespace glmmreml;

namespace {

MatrixXd D2() {
    MatrixXd D(2, 2);
    D << 0.6, 0.15, 0.15, 0.35;
    return D;
}

}  // namespace

TEST_CASE("Gaussian responses: ML and corrected fits match the closed-form LMM") {
    std::mt19937_64 rng(5);
    const VectorXd beta = (VectorXd(2) << 0.4, -0.8).finished();
    const auto data = oracle::random_lmm(rng, 15, 6, 2, 2, D2(), beta, 0.9);
    const GlmmSpec spec{Family::gaussian(0.9), 2, false};
    const oracle::Lmm lmm(data, 0.9);
    MplSettings s;
    s.gtol = 1e-8;

    const auto ml = ml_fit(spec, data, s);
    REQUIRE(ml.converged);
    const MatrixXd ref_ml = lmm.fit(false, D2());
    CHECK(oracle::rel_err(ml.Sigma, ref_ml) < 1e-5);
    CHECK((ml.beta - lmm.gls_beta(ref_ml)).cwiseAbs().maxCoeff() < 1e-5);

    const auto mpl = mpl_fit(spec, data, s, &ml);
    REQUIRE(mpl.converged);
    const MatrixXd ref_reml = lmm.fit(true, D2());
    CHECK(oracle::rel_err(mpl.Sigma, ref_reml) < 1e-5);
    CHECK((mpl.beta - lmm.gls_beta(ref_reml)).cwiseAbs().maxCoeff() < 1e-5);

    // objective is the restricted likelihood without its p/2 log 2 pi constant
    const auto anchor = make_anchor(spec, data, ml.beta, ml.theta, s.rule);
    const auto t = mpl_objective(spec, data, CovParams::from_matrix(D2()), anchor, s);
    CHECK(t.value == doctest::Approx(lmm.profile(D2(), true) - std::log(2 * M_PI)).epsilon(1e-9));
    CHECK(t.log_det_C == doctest::Approx(t.log_det_J));
}

TEST_CASE("score correction matrix") {
    std::mt19937_64 rng(8);
    const GlmmSpec spec{Family::bernoulli(), 2, false};
    const auto data = oracle::random_glmm(rng, Family::bernoulli(), 25, 8, 2, 2, D2(), (VectorXd(2) << 0.3, 0.7).finished());
    const VectorXd b = (VectorXd(2) << 0.3, 0.6).finished();
    const auto th = CovParams::from_matrix(D2());

    // at the anchor itself C is a sum of outer products
    const MatrixXd C = correction_C(spec, data, b, th, b, th);
    CHECK((C - C.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(Eigen::SelfAdjointEigenSolver<MatrixXd>(C).eigenvalues().minCoeff() > -1e-12);
    MatrixXd direct = MatrixXd::Zero(2, 2);
    for (const auto& c : data.clusters()) {
        const VectorXd s = cluster_score_beta(spec, c, b, th);
        direct += s * s.transpose();
    }
    CHECK(oracle::rel_err(C, direct) < 1e-10);

    // one cluster gives rank one
    const Dataset one(data.clusters()[0].y, data.clusters()[0].X, data.clusters()[0].Z,
                      std::vector<int>(data.clusters()[0].size(), 0));
    const MatrixXd C1 = correction_C(spec, one, b, th, (VectorXd(2) << 0.1, 0.2).finished(),
                                     CovParams::from_matrix(0.5 * D2()));
    CHECK(std::abs(C1.determinant()) < 1e-12 * std::max(1.0, C1.squaredNorm()));
}

TEST_CASE("objective components at the restricted fit") {
    std::mt19937_64 rng(21);
    const GlmmSpec spec{Family::poisson(), 1, false};
    const auto data = oracle::random_glmm(rng, Family::poisson(), 30, 6, 2, 1, MatrixXd::Constant(1, 1, 0.3),
                                          (VectorXd(2) << 0.2, 0.5).finished());
    MplSettings s;
    const auto ml = ml_fit(spec, data, s);
    REQUIRE(ml.converged);
    const auto fit = mpl_fit(spec, data, s, &ml);
    REQUIRE(fit.converged);
    const auto anchor = make_anchor(spec, data, ml.beta, ml.theta, s.rule);
    const auto t = mpl_objective(spec, data, fit.theta, anchor, s);

    CHECK(t.value == doctest::Approx(fit.objective).epsilon(1e-9));
    CHECK(t.profile == doctest::Approx(total_marginal_loglik(spec, data, t.beta_theta, fit.theta, s.rule)).epsilon(1e-12));
    const MatrixXd J = beta_hessian(spec, data, t.beta_theta, fit.theta, s.rule);
    CHECK(t.log_det_J == doctest::Approx(std::log(J.determinant())).epsilon(1e-9));
    const MatrixXd C = correction_C(spec, data, ml.beta, ml.theta, t.beta_theta, fit.theta, s.rule);
    CHECK(t.log_det_C == doctest::Approx(std::log(std::abs(C.determinant()))).epsilon(1e-9));
    CHECK(t.value == doctest::Approx(t.profile + 0.5 * t.log_det_J - t.log_det_C));

    // J is positive definite here, so the literal form agrees
    MplSettings lit = s;
    lit.literal_abs_det = true;
    CHECK(mpl_objective(spec, data, fit.theta, anchor, lit).value == doctest::Approx(t.value).epsilon(1e-12));

    // beta_theta maximizes the marginal likelihood at fixed theta
    const VectorXd g = oracle::fd_gradient(
        [&](const VectorXd& b) { return total_marginal_loglik(spec, data, b, fit.theta, s.rule); }, t.beta_theta);
    CHECK(g.cwiseAbs().maxCoeff() < 1e-5);

    // restricted maximum lies above the ML variance here
    CHECK(fit.Sigma(0, 0) > ml.Sigma(0, 0));
}

TEST_CASE("fit does not depend on the variance parameterization") {
    std::mt19937_64 rng(40);
    const GlmmSpec spec{Family::poisson(), 1, false};
    const auto data = oracle::random_glmm(rng, Family::poisson(), 25, 5, 2, 1, MatrixXd::Constant(1, 1, 0.4),
                                          (VectorXd(2) << 0.1, 0.4).finished());
    MplSettings s;
    s.gtol = 1e-9;
    const auto ml = ml_fit(spec, data, s);
    REQUIRE(ml.converged);
    const auto fit = mpl_fit(spec, data, s, &ml);
    REQUIRE(fit.converged);
    const auto anchor = make_anchor(spec, data, ml.beta, ml.theta, s.rule);
    auto value_at_var = [&](double var) {
        if (!(var > 0)) return 1e300;
        return -mpl_objective(spec, data, CovParams::from_matrix(MatrixXd::Constant(1, 1, var)), anchor, s).value;
    };
    // maximize directly over sigma and over sigma^2
    const double by_sd = oracle::nelder_mead([&](const VectorXd& v) { return value_at_var(v(0) * v(0)); },
                                             VectorXd::Constant(1, 0.5), 0.1)(0);
    const double by_var = oracle::nelder_mead([&](const VectorXd& v) { return value_at_var(v(0)); },
                                              VectorXd::Constant(1, 0.25), 0.05)(0);
    CHECK(std::abs(by_sd * by_sd - fit.Sigma(0, 0)) < 1e-5);
    CHECK(std::abs(by_var - fit.Sigma(0, 0)) < 1e-5);
}

TEST_CASE("ideal estimator is the known-mean likelihood maximizer") {
    std::mt19937_64 rng(14);
    const VectorXd beta = (VectorXd(2) << 1.0, 0.5).finished();
    const auto data = oracle::random_lmm(rng, 12, 5, 2, 2, D2(), beta, 1.0);
    const GlmmSpec spec{Family::gaussian(1.0), 2, false};
    const oracle::Lmm lmm(data, 1.0);
    MplSettings s;
    s.gtol = 1e-9;
    const auto fit = ideal_fit(spec, data, beta, s);
    REQUIRE(fit.converged);
    CHECK(fit.beta == beta);
    const VectorXd t0 = (VectorXd(3) << 0.5 * std::log(0.6), 0.2, 0.5 * std::log(0.3)).finished();
    const VectorXd t = oracle::nelder_mead([&](const VectorXd& v) { return -lmm.loglik(beta, oracle::cov_from(v, 2)); }, t0);
    CHECK(oracle::rel_err(fit.Sigma, oracle::cov_from(t, 2)) < 1e-5);
    CHECK(fit.objective == doctest::Approx(lmm.loglik(beta, fit.Sigma)).epsilon(1e-10));

    CHECK_FALSE(ideal_fit(spec, data, VectorXd::Zero(3), s).converged);
}

TEST_CASE("binary ML fit is a stationary point of the marginal likelihood") {
    std::mt19937_64 rng(16);
    MatrixXd D(2, 2);
    D << 0.9, 0.1, 0.1, 0.5;
    const auto data = oracle::random_glmm(rng, Family::bernoulli(), 60, 10, 2, 2, D, (VectorXd(2) << 0.5, 1.0).finished());
    const GlmmSpec spec{Family::bernoulli(), 2, false};
    const auto fit = ml_fit(spec, data);
    REQUIRE(fit.converged);
    VectorXd x(5);
    x << fit.beta, fit.theta.theta;
    const VectorXd g = oracle::fd_gradient(
        [&](const VectorXd& v) { return total_marginal_loglik(spec, data, v.head(2), {v.tail(3), 2, false}); }, x);
    if (fit.theta.theta(2) > -8.0) CHECK(g.cwiseAbs().maxCoeff() < 1e-4);
    CHECK(fit.objective == doctest::Approx(total_marginal_loglik(spec, data, fit.beta, fit.theta)).epsilon(1e-12));
    CHECK(fit.u.rows() == 2);
    CHECK(fit.u.cols() == 60);
}

TEST_CASE("instability flag") {
    CHECK_FALSE(exceeds_variance(MatrixXd::Identity(2, 2), 5.0));
    MatrixXd S = MatrixXd::Identity(2, 2);
    S(1, 1) = 5.5;
    CHECK(exceeds_variance(S, 5.0));
    S(1, 1) = std::nan("");
    CHECK(exceeds_variance(S, 5.0));
    S(1, 1) = 5.0;
    CHECK_FALSE(exceeds_variance(S, 5.0));
}
