#include "glmmreml/mpl.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "glmmreml/linearization.hpp"
#include "glmmreml/optim.hpp"

namespace glmmreml {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

optim::BfgsOptions box_for(const GlmmSpec& spec, Eigen::Index offset, const MplSettings& s) {
    optim::BfgsOptions opts;
    opts.max_iter = s.max_iter;
    opts.gtol = s.gtol;
    opts.accept_stall = s.accept_stall;
    const int dim = CovParams::dim(spec.q, spec.diag_only);
    opts.lower = VectorXd::Constant(offset + dim, -kInf);
    opts.upper = VectorXd::Constant(offset + dim, kInf);
    int r = 0;
    for (int i = 0; i < spec.q; ++i)
        for (int j = 0; j <= i; ++j) {
            if (spec.diag_only && i != j) continue;
            if (i == j) {
                opts.lower(offset + r) = s.log_sd_lower;
                opts.upper(offset + r) = s.log_sd_upper;
            }
            ++r;
        }
    return opts;
}

bool use_expected(const GlmmSpec& spec, const MplSettings& s) {
    if (s.correction == MplSettings::Correction::ExpectedGaussian) {
        if (spec.family.kind != FamilyKind::Gaussian)
            throw UnsupportedError("the exact correction is only available for Gaussian responses");
        return true;
    }
    return s.correction == MplSettings::Correction::Auto && spec.family.kind == FamilyKind::Gaussian;
}

CovParams default_start(const GlmmSpec& spec) {
    return CovParams::from_matrix(0.1 * MatrixXd::Identity(spec.q, spec.q), spec.diag_only);
}

RandomEffects modes_at(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                       const QuadRule& rule) {
    MatrixXd modes;
    marginal_sweep(spec, data, beta, build_cov(theta), rule, kLogLikOnly, false, &modes);
    return modes;
}

}  // namespace

bool exceeds_variance(const MatrixXd& Sigma, double threshold) {
    for (Eigen::Index k = 0; k < Sigma.rows(); ++k)
        if (!(Sigma(k, k) <= threshold)) return true;
    return false;
}

FitResult ml_fit(const GlmmSpec& spec, const Dataset& data, const MplSettings& settings, const FitResult* init) {
    FitResult fit;
    fit.method = Method::MPL_ML;
    try {
        data.check_family(spec.family);
        const Eigen::Index p = data.p();
        const VectorXd beta0 = init && init->beta.size() == p ? init->beta : glm_fit(spec.family, data);
        const CovParams theta0 = init && init->theta.theta.size() ? init->theta : default_start(spec);
        MatrixXd modes;
        optim::Objective f = [&](const VectorXd& x, VectorXd* g) {
            try {
                const CovParams th{x.tail(x.size() - p), spec.q, spec.diag_only};
                const auto sw = marginal_sweep(spec, data, x.head(p), build_cov(th), settings.rule,
                                               g ? unsigned(kScoreBeta | kMomentUU) : unsigned(kLogLikOnly), false,
                                               &modes);
                if (g) {
                    g->resize(x.size());
                    g->head(p) = -sw.score_beta;
                    g->tail(x.size() - p) = -sw.score_theta;
                }
                return std::isfinite(sw.loglik) ? -sw.loglik : kInf;
            } catch (const NumericalError&) {
                return kInf;
            }
        };
        const auto opts = box_for(spec, p, settings);
        VectorXd x0(p + theta0.theta.size());
        x0 << beta0, theta0.theta;
        const auto res = optim::bfgs_minimize(f, x0, opts);
        fit.beta = res.x.head(p);
        fit.theta = {res.x.tail(res.x.size() - p), spec.q, spec.diag_only};
        fit.Sigma = build_cov(fit.theta).D;
        fit.objective = -res.f;
        fit.iterations = res.iterations;
        fit.u = modes_at(spec, data, fit.beta, fit.theta, settings.rule);
        fit.converged = res.converged;
        if (res.stalled) fit.notes.push_back("optimizer: " + res.message);
        if (!res.converged) fit.fail("optimizer: " + res.message);
    } catch (const std::exception& e) {
        fit.fail(e.what());
    }
    return fit;
}

MatrixXd beta_hessian(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                      const QuadRule& rule) {
    return -marginal_sweep(spec, data, beta, build_cov(theta), rule, kHessianBeta).hessian_beta;
}

MlAnchor make_anchor(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta_hat, const CovParams& theta_hat,
                     const QuadRule& rule) {
    auto sw = marginal_sweep(spec, data, beta_hat, build_cov(theta_hat), rule, kScoreBeta, true);
    return {beta_hat, theta_hat, std::move(sw.cluster_scores)};
}

MatrixXd correction_C(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta_hat, const CovParams& theta_hat,
                      const VectorXd& beta_theta, const CovParams& theta, const QuadRule& rule) {
    const auto anchor = make_anchor(spec, data, beta_hat, theta_hat, rule);
    const auto sw = marginal_sweep(spec, data, beta_theta, build_cov(theta), rule, kScoreBeta, true);
    MatrixXd C = MatrixXd::Zero(data.p(), data.p());
    for (std::size_t i = 0; i < sw.cluster_scores.size(); ++i)
        C.noalias() += anchor.scores[i] * sw.cluster_scores[i].transpose();
    return C;
}

MplTerms mpl_objective(const GlmmSpec& spec, const Dataset& data, const CovParams& theta, const MlAnchor& anchor,
                       const MplSettings& settings, const VectorXd* beta_start) {
    MplTerms t;
    const VectorXd start = beta_start && beta_start->size() == data.p() ? *beta_start : anchor.beta;
    MatrixXd modes;
    t.beta_theta = profile_beta(spec, data, theta, settings.rule, start, {}, &modes);
    const auto sw = marginal_sweep(spec, data, t.beta_theta, build_cov(theta), settings.rule, kHessianBeta, true, &modes);
    t.profile = sw.loglik;
    const MatrixXd J = -sw.hessian_beta;
    if (settings.literal_abs_det) {
        t.log_det_J = J.rows() ? std::log(std::abs(sw.hessian_beta.determinant())) : 0.0;
    } else {
        Eigen::LLT<MatrixXd> llt(J);
        if (llt.info() != Eigen::Success) {
            t.value = -kInf;
            return t;
        }
        t.log_det_J = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    }
    if (use_expected(spec, settings)) {
        // Gaussian: the score covariance under the anchor equals X'V(theta)^-1 X = J
        t.log_det_C = t.log_det_J;
    } else {
        MatrixXd C = MatrixXd::Zero(data.p(), data.p());
        for (std::size_t i = 0; i < sw.cluster_scores.size(); ++i)
            C.noalias() += anchor.scores[i] * sw.cluster_scores[i].transpose();
        const double det = C.rows() ? C.fullPivLu().determinant() : 1.0;
        if (!(std::abs(det) > 0.0) || !std::isfinite(det)) {
            t.value = -kInf;
            return t;
        }
        t.log_det_C = std::log(std::abs(det));
    }
    t.value = t.profile + 0.5 * t.log_det_J - t.log_det_C;
    return t;
}

FitResult mpl_fit(const GlmmSpec& spec, const Dataset& data, const MplSettings& settings, const FitResult* ml) {
    FitResult fit;
    fit.method = Method::MPL_REML;
    try {
        FitResult own;
        if (!ml) {
            own = ml_fit(spec, data, settings);
            ml = &own;
        }
        if (!ml->converged) {
            fit.fail("unrestricted anchor fit did not converge");
            return fit;
        }
        const auto anchor = make_anchor(spec, data, ml->beta, ml->theta, settings.rule);
        VectorXd beta_cache = ml->beta;
        auto value = [&](const VectorXd& x) {
            try {
                const auto t = mpl_objective(spec, data, {x, spec.q, spec.diag_only}, anchor, settings, &beta_cache);
                if (!std::isfinite(t.value)) return kInf;
                beta_cache = t.beta_theta;
                return -t.value;
            } catch (const NumericalError&) {
                return kInf;
            }
        };
        auto opts = box_for(spec, 0, settings);
        opts.lazy_gradient = true;
        const auto res = optim::bfgs_minimize(optim::with_numeric_gradient(value, settings.fd_step), ml->theta.theta, opts);
        fit.theta = {res.x, spec.q, spec.diag_only};
        const auto t = mpl_objective(spec, data, fit.theta, anchor, settings, &beta_cache);
        fit.beta = t.beta_theta;
        fit.objective = t.value;
        fit.Sigma = build_cov(fit.theta).D;
        fit.u = modes_at(spec, data, fit.beta, fit.theta, settings.rule);
        fit.iterations = res.iterations;
        fit.converged = res.converged;
        if (res.stalled) fit.notes.push_back("optimizer: " + res.message);
        if (!res.converged) fit.fail("optimizer: " + res.message);
        if (exceeds_variance(fit.Sigma, settings.unstable_threshold)) {
            fit.unstable = true;
            fit.notes.push_back("variance estimate above the instability threshold");
        }
    } catch (const std::exception& e) {
        fit.fail(e.what());
    }
    return fit;
}

FitResult ideal_fit(const GlmmSpec& spec, const Dataset& data, const VectorXd& true_beta, const MplSettings& settings,
                    const CovParams* start) {
    FitResult fit;
    fit.method = Method::IDEAL;
    try {
        data.check_family(spec.family);
        if (true_beta.size() != data.p()) throw std::invalid_argument("true beta has the wrong length");
        MatrixXd modes;
        optim::Objective f = [&](const VectorXd& x, VectorXd* g) {
            try {
                const CovParams th{x, spec.q, spec.diag_only};
                const auto sw = marginal_sweep(spec, data, true_beta, build_cov(th), settings.rule,
                                               g ? unsigned(kMomentUU) : unsigned(kLogLikOnly), false, &modes);
                if (g) *g = -sw.score_theta;
                return std::isfinite(sw.loglik) ? -sw.loglik : kInf;
            } catch (const NumericalError&) {
                return kInf;
            }
        };
        const CovParams theta0 = start ? *start : default_start(spec);
        const auto res = optim::bfgs_minimize(f, theta0.theta, box_for(spec, 0, settings));
        fit.beta = true_beta;
        fit.theta = {res.x, spec.q, spec.diag_only};
        fit.Sigma = build_cov(fit.theta).D;
        fit.objective = -res.f;
        fit.u = modes;
        fit.iterations = res.iterations;
        fit.converged = res.converged;
        if (res.stalled) fit.notes.push_back("optimizer: " + res.message);
        if (!res.converged) fit.fail("optimizer: " + res.message);
    } catch (const std::exception& e) {
        fit.fail(e.what());
    }
    return fit;
}

}  // namespace glmmreml
