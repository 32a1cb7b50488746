#include <doctest.h>

#include <cmath>
#include <random>

#include "glmmreml/dbc.hpp"
#include "glmmreml/laplace.hpp"
#include "oracles.hpp"

using namespace glmmreml;

namespace {

MatrixXd D2() {
    MatrixXd D(2, 2);
    D << 0.6, 0.15, 0.15, 0.35;
    return D;
}

// One EM step for the Gaussian LMM with known error variance, done densely.
// reml adds back the conditional variance of the GLS estimate.
MatrixXd em_step(const Dataset& data, double phi, const MatrixXd& D, bool reml) {
    const oracle::Lmm lmm(data, phi);
    const VectorXd beta = lmm.gls_beta(D);
    const MatrixXd V = lmm.V(D);
    const MatrixXd Vinv = V.inverse();
    const MatrixXd M = data.X().transpose() * Vinv * data.X();
    const Eigen::Index q = D.rows();
    MatrixXd S = MatrixXd::Zero(q, q);
    for (Eigen::Index i = 0; i < data.m(); ++i) {
        const MatrixXd Zi = lmm.Zfull.middleCols(i * q, q);
        const MatrixXd G = D * Zi.transpose() * Vinv;
        const VectorXd mean = G * (data.y() - data.X() * beta);
        S += D - G * Zi * D + mean * mean.transpose();
        if (reml) {
            const MatrixXd B = G * data.X();
            S += B * M.ldlt().solve(B.transpose());
        }
    }
    return S / static_cast<double>(data.m());
}

FitResult start_at(const MatrixXd& D, Eigen::Index p) {
    FitResult f;
    f.converged = true;
    f.Sigma = D;
    f.beta = VectorXd::Zero(p);
    return f;
}

}  // namespace

TEST_CASE("moment equation roots") {
    const auto cov = build_cov(CovParams::from_matrix(D2()));
    CHECK(h_function(cov, D2()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(oracle::rel_err(moment_root(D2(), false, 1e-8), D2()) < 1e-14);
    const MatrixXd diag = moment_root(D2(), true, 1e-8);
    CHECK(diag(0, 1) == 0.0);
    CHECK(diag(1, 1) == doctest::Approx(0.35));
    const auto dcov = build_cov(CovParams::from_matrix(diag, true));
    CHECK(h_function(dcov, D2()).cwiseAbs().maxCoeff() < 1e-12);

    MatrixXd indefinite(2, 2);
    indefinite << 1.0, 0.0, 0.0, -0.2;
    int floored = 0;
    const MatrixXd r = moment_root(indefinite, false, 1e-8, &floored);
    CHECK(floored == 1);
    CHECK(r(1, 1) == doctest::Approx(1e-8));
    CHECK(r(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("Gaussian bias: closed form, Monte Carlo and dependence on beta") {
    std::mt19937_64 rng(3);
    const VectorXd beta = (VectorXd(2) << 0.5, -0.3).finished();
    const auto data = oracle::random_lmm(rng, 10, 4, 2, 2, D2(), beta, 0.8);
    const GlmmSpec spec{Family::gaussian(0.8), 2, false};
    const auto th = CovParams::from_matrix(D2());
    QuadRule rule;
    rule.nodes_per_dim = 5;

    // dense form: -(1/m) sum D Z_i'V^-1 X M^-1 X'V^-1 Z_i D
    const MatrixXd exact = gaussian_bias(spec.family, data, th);
    const MatrixXd with = em_step(data, 0.8, D2(), true), without = em_step(data, 0.8, D2(), false);
    CHECK(oracle::rel_err(exact, without - with) < 1e-10);
    CHECK(Eigen::SelfAdjointEigenSolver<MatrixXd>(-exact).eigenvalues().minCoeff() > -1e-14);

    // shifting beta shifts y and beta_hat alike, so the draw is unchanged
    Rng r1 = make_rng(9, 0), r2 = make_rng(9, 0);
    const MatrixXd b1 = bias_estimate(spec, data, beta, th, rule, r1, 3);
    const MatrixXd b2 = bias_estimate(spec, data, (VectorXd(2) << -2.0, 4.0).finished(), th, rule, r2, 3);
    CHECK(oracle::rel_err(b1, b2) < 1e-8);

    // the average of many draws approaches the closed form
    const int draws = 400;
    Rng r3 = make_rng(10, 0);
    MatrixXd sum = MatrixXd::Zero(2, 2), sq = MatrixXd::Zero(2, 2);
    for (int d = 0; d < draws; ++d) {
        const MatrixXd b = bias_estimate(spec, data, beta, th, rule, r3, 1);
        sum += b;
        sq += b.cwiseProduct(b);
    }
    const MatrixXd mean = sum / draws;
    const MatrixXd se = ((sq / draws - mean.cwiseProduct(mean)) / (draws - 1)).cwiseSqrt();
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) CHECK(std::abs(mean(a, b) - exact(a, b)) < 4 * se(a, b) + 1e-12);
}

TEST_CASE("bias vanishes with the variance") {
    std::mt19937_64 rng(6);
    const auto data = oracle::random_glmm(rng, Family::bernoulli(), 20, 6, 2, 1, MatrixXd::Constant(1, 1, 0.5),
                                          VectorXd::Zero(2));
    const GlmmSpec spec{Family::bernoulli(), 1, false};
    double previous = std::numeric_limits<double>::infinity();
    for (double v : {0.5, 1e-2, 1e-4}) {
        const auto th = CovParams::from_matrix(MatrixXd::Constant(1, 1, v));
        Rng r = make_rng(2, 0);
        const double b = std::abs(bias_estimate(spec, data, VectorXd::Zero(2), th, QuadRule{}, r, 5)(0, 0));
        CHECK(b < previous);
        previous = b;
    }
    CHECK(previous < 1e-6);
    CHECK(gaussian_bias(Family::gaussian(1.0), data, CovParams::from_matrix(MatrixXd::Constant(1, 1, 1e-10)))
              .cwiseAbs()
              .maxCoeff() < 1e-18);
}

TEST_CASE("zero bias reproduces the EM trajectory") {
    std::mt19937_64 rng(27);
    const VectorXd beta = (VectorXd(2) << 0.2, 0.7).finished();
    const auto data = oracle::random_lmm(rng, 12, 5, 2, 2, D2(), beta, 1.0);
    const GlmmSpec spec{Family::gaussian(1.0), 2, false};
    DbcSettings s;
    s.outer_iters = 8;
    s.rule.nodes_per_dim = 5;
    const auto init = start_at(MatrixXd::Identity(2, 2), 2);

    DbcTrace ml_trace, zero_trace, reml_trace;
    const auto ml = dbc_solve(spec, data, false, s, &init, &ml_trace);
    DbcSettings z = s;
    z.force_zero_bias = true;
    const auto zero = dbc_solve(spec, data, true, z, &init, &zero_trace);
    const auto reml = dbc_solve(spec, data, true, s, &init, &reml_trace);
    REQUIRE(ml.converged);
    REQUIRE(zero.converged);
    REQUIRE(reml.converged);
    REQUIRE(ml_trace.Sigma.size() == 9);
    REQUIRE(zero_trace.Sigma.size() == 9);

    MatrixXd em = init.Sigma, rem = init.Sigma;
    for (std::size_t k = 0; k < ml_trace.Sigma.size(); ++k) {
        CHECK(oracle::rel_err(ml_trace.Sigma[k], em) < 1e-9);
        CHECK(oracle::rel_err(zero_trace.Sigma[k], ml_trace.Sigma[k]) == 0.0);
        CHECK(oracle::rel_err(reml_trace.Sigma[k], rem) < 1e-9);
        em = em_step(data, 1.0, em, false);
        rem = em_step(data, 1.0, rem, true);
    }
    CHECK(oracle::rel_err(ml_trace.beta[3], oracle::Lmm(data, 1.0).gls_beta(ml_trace.Sigma[3])) < 1e-9);
}

TEST_CASE("Gaussian fixed points are the ML and REML estimates") {
    std::mt19937_64 rng(35);
    const VectorXd beta = (VectorXd(2) << -0.4, 0.9).finished();
    const auto data = oracle::random_lmm(rng, 20, 6, 2, 2, D2(), beta, 1.0);
    const GlmmSpec spec{Family::gaussian(1.0), 2, false};
    const oracle::Lmm lmm(data, 1.0);
    DbcSettings s;
    s.outer_iters = 5000;
    s.tol = 1e-11;
    s.rule.nodes_per_dim = 5;
    for (bool reml : {false, true}) {
        DbcTrace tr;
        const auto fit = dbc_solve(spec, data, reml, s, nullptr, &tr);
        REQUIRE(fit.converged);
        const MatrixXd ref = lmm.fit(reml, D2());
        CHECK(oracle::rel_err(fit.Sigma, ref) < 1e-6);
        CHECK((fit.beta - lmm.gls_beta(ref)).cwiseAbs().maxCoeff() < 1e-6);
        const auto cov = build_cov(fit.theta);
        CHECK(h_function(cov, tr.S - tr.bias).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("count data: estimating equation at the returned fit") {
    std::mt19937_64 rng(50);
    const auto data = oracle::random_glmm(rng, Family::poisson(), 40, 6, 2, 1, MatrixXd::Constant(1, 1, 0.3),
                                          (VectorXd(2) << 0.3, 0.4).finished());
    const GlmmSpec spec{Family::poisson(), 1, false};
    DbcSettings s;
    s.outer_iters = 60;
    s.seed = 4;
    DbcTrace tr;
    const auto fit = dbc_solve(spec, data, true, s, nullptr, &tr);
    REQUIRE(fit.converged);
    CHECK(fit.iterations == 60);
    CHECK(tr.Sigma.size() == 61);
    CHECK(h_function(build_cov(fit.theta), tr.S - tr.bias).cwiseAbs().maxCoeff() < 1e-2);
    CHECK(tr.bias(0, 0) < 0.0);

    const auto ml = dbc_solve(spec, data, false, s);
    REQUIRE(ml.converged);
    CHECK(fit.Sigma(0, 0) > ml.Sigma(0, 0));
    // the zero-bias fixed point is the quadrature ML estimate
    const auto lap = laplace_fit(spec, data, false);
    CHECK(std::abs(ml.Sigma(0, 0) - lap.Sigma(0, 0)) < 0.02);

    // same seed, same answer
    const auto again = dbc_solve(spec, data, true, s);
    CHECK((again.Sigma - fit.Sigma).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("settings contracts") {
    std::mt19937_64 rng(1);
    const auto data = oracle::random_glmm(rng, Family::bernoulli(), 10, 5, 2, 1, MatrixXd::Constant(1, 1, 0.5),
                                          VectorXd::Zero(2));
    const GlmmSpec spec{Family::bernoulli(), 1, false};
    DbcSettings s;
    s.outer_iters = 0;
    CHECK_FALSE(dbc_solve(spec, data, true, s).converged);
    s.outer_iters = 3;
    s.bias_mode = DbcSettings::BiasMode::ExactGaussian;
    const auto f = dbc_solve(spec, data, true, s);
    CHECK_FALSE(f.converged);
    CHECK_FALSE(f.notes.empty());
    s.bias_mode = DbcSettings::BiasMode::Auto;
    s.tol = 1e-14;
    const auto g = dbc_solve(spec, data, true, s);
    CHECK_FALSE(g.converged);
    Rng r = make_rng(1, 0);
    CHECK_THROWS(bias_estimate(spec, data, VectorXd::Zero(2), CovParams::from_matrix(MatrixXd::Identity(1, 1)),
                               QuadRule{}, r, 0));
}
