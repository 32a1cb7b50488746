#include "glmmreml/laplace.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "glmmreml/linearization.hpp"
#include "glmmreml/optim.hpp"
#include "glmmreml/quadrature.hpp"

namespace glmmreml {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double cumulant_d3(const Family& family, double eta) {
    switch (family.kind) {
        case FamilyKind::Bernoulli: {
            const double mu = mean_of_eta(family, eta);
            return mu * (1.0 - mu) * (1.0 - 2.0 * mu);
        }
        case FamilyKind::Poisson: return std::exp(eta);
        case FamilyKind::Gaussian: return 0.0;
    }
    return 0.0;
}

VectorXd curvature_weights(const Family& family, const Dataset& data, const VectorXd& eta) {
    VectorXd w(eta.size());
    for (Eigen::Index j = 0; j < eta.size(); ++j)
        w(j) = std::max(variance_of_eta(family, eta(j)) / (family.phi * data.a()(j)), kWeightFloor);
    return w;
}

VectorXd scaled_residuals(const Family& family, const Dataset& data, const VectorXd& eta) {
    VectorXd r(eta.size());
    for (Eigen::Index j = 0; j < eta.size(); ++j)
        r(j) = (data.y()(j) - mean_of_eta(family, eta(j))) / (family.phi * data.a()(j));
    return r;
}

MatrixXd u_gradient(const Dataset& data, const VectorXd& r, const CovMatrices& cov, const RandomEffects& u) {
    MatrixXd g = -cov.D_inv * u;
    const auto& idx = data.cluster_index();
    for (Eigen::Index j = 0; j < data.n(); ++j) g.col(idx[j]) += data.Z().row(j).transpose() * r(j);
    return g;
}

optim::BfgsOptions box_for(const GlmmSpec& spec, Eigen::Index offset, const LaplaceSettings& s) {
    optim::BfgsOptions opts;
    opts.max_iter = s.max_iter;
    opts.gtol = s.gtol;
    opts.accept_stall = s.accept_stall;
    const int dim = CovParams::dim(spec.q, spec.diag_only);
    const auto inf = std::numeric_limits<double>::infinity();
    opts.lower = VectorXd::Constant(offset + dim, -inf);
    opts.upper = VectorXd::Constant(offset + dim, inf);
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

bool on_bound(const VectorXd& x, const optim::BfgsOptions& opts) {
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (x(i) <= opts.lower(i) + 1e-8 || x(i) >= opts.upper(i) - 1e-8) return true;
    return false;
}

}  // namespace

InnerMode inner_mode(const GlmmSpec& spec, const Dataset& data, const CovParams& theta, InnerOver over,
                     const VectorXd& beta, const RandomEffects* warm_u, double tol) {
    const auto cov = build_cov(theta);
    const Eigen::Index q = data.q();
    const Eigen::Index m = data.m();
    InnerMode out;
    out.beta = beta;
    out.u = warm_u && warm_u->rows() == q && warm_u->cols() == m && warm_u->allFinite() ? *warm_u
                                                                                          : RandomEffects::Zero(q, m);

    if (over == InnerOver::U_only) {
        Eigen::LLT<MatrixXd> H;
        for (Eigen::Index i = 0; i < m; ++i) {
            const auto& c = data.clusters()[static_cast<std::size_t>(i)];
            const VectorXd offset = c.X.cols() ? VectorXd(c.X * beta) : VectorXd::Zero(c.size());
            out.u.col(i) = conditional_mode(spec.family, c, offset, cov, out.u.col(i), H);
            out.log_det_omega += 2.0 * H.matrixLLT().diagonal().array().log().sum();
        }
        out.joint = joint_loglik(spec, data, out.beta, out.u, theta);
        return out;
    }

    double f = joint_loglik(spec, data, out.beta, out.u, theta);
    if (!std::isfinite(f)) {
        out.u.setZero();
        f = joint_loglik(spec, data, out.beta, out.u, theta);
    }
    for (int it = 0; it < 100; ++it) {
        out.iterations = it + 1;
        const VectorXd eta = linear_predictor(data, out.beta, out.u);
        const VectorXd r = scaled_residuals(spec.family, data, eta);
        const BorderedSystem sys(data, curvature_weights(spec.family, data, eta), cov.D_inv);
        VectorXd db;
        MatrixXd du;
        const VectorXd gb = data.X().transpose() * r;
        const MatrixXd gu = u_gradient(data, r, cov, out.u);
        sys.solve(gb, gu, db, du);
        const double decrement = gb.dot(db) + gu.cwiseProduct(du).sum();
        const double step = std::max(db.size() ? db.lpNorm<Eigen::Infinity>() : 0.0, du.cwiseAbs().maxCoeff());
        const double scale =
            1.0 + std::max(out.beta.size() ? out.beta.lpNorm<Eigen::Infinity>() : 0.0, out.u.cwiseAbs().maxCoeff());
        if (step < tol * scale || decrement < 1e-13 * (1.0 + std::abs(f))) {
            out.beta += db;
            out.u += du;
            out.joint = joint_loglik(spec, data, out.beta, out.u, theta);
            const VectorXd eta_new = linear_predictor(data, out.beta, out.u);
            out.log_det_omega =
                BorderedSystem(data, curvature_weights(spec.family, data, eta_new), cov.D_inv).log_det();
            return out;
        }
        double t = 1.0;
        for (; t > 1e-10; t *= 0.5) {
            const VectorXd b = out.beta + t * db;
            const MatrixXd u = out.u + t * du;
            const double ft = joint_loglik(spec, data, b, u, theta);
            if (ft >= f - 1e-12 * std::abs(f)) {
                out.beta = b;
                out.u = u;
                f = ft;
                break;
            }
        }
        if (t <= 1e-10) {
            out.joint = f;
            out.log_det_omega = sys.log_det();
            return out;
        }
    }
    throw InnerModeError("joint mode search did not converge in 100 Newton steps");
}

MatrixXd joint_neg_hessian(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const RandomEffects& u,
                           const CovParams& theta) {
    const auto cov = build_cov(theta);
    const VectorXd eta = linear_predictor(data, beta, u);
    return BorderedSystem(data, curvature_weights(spec.family, data, eta), cov.D_inv).to_dense();
}

double laplace_ml_objective(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                            VectorXd* grad, RandomEffects* warm_u) {
    const auto cov = build_cov(theta);
    const Eigen::Index p = data.p();
    const Eigen::Index q = data.q();
    const Eigen::Index m = data.m();
    const auto dim = static_cast<Eigen::Index>(cov.dD.size());
    RandomEffects local = RandomEffects::Zero(q, m);
    RandomEffects& u = warm_u ? *warm_u : local;
    if (u.rows() != q || u.cols() != m || !u.allFinite()) u = RandomEffects::Zero(q, m);
    if (grad) *grad = VectorXd::Zero(p + dim);

    double value = 0.0;
    Eigen::LLT<MatrixXd> H;
    for (Eigen::Index i = 0; i < m; ++i) {
        const auto& c = data.clusters()[static_cast<std::size_t>(i)];
        const VectorXd offset = p ? VectorXd(c.X * beta) : VectorXd::Zero(c.size());
        const VectorXd ui = conditional_mode(spec.family, c, offset, cov, u.col(i), H);
        u.col(i) = ui;
        const VectorXd eta = offset + c.Z * ui;
        for (Eigen::Index j = 0; j < c.size(); ++j) value += log_density(spec.family, c.y(j), eta(j), c.a(j));
        value += -0.5 * cov.log_det - 0.5 * inv_quad(cov, ui) - H.matrixLLT().diagonal().array().log().sum();
        if (!grad) continue;

        const MatrixXd Hinv = H.solve(MatrixXd::Identity(q, q));
        VectorXd r(c.size()), cw(c.size()), lev(c.size()), w(c.size());
        for (Eigen::Index j = 0; j < c.size(); ++j) {
            const double disp = spec.family.phi * c.a(j);
            r(j) = (c.y(j) - mean_of_eta(spec.family, eta(j))) / disp;
            w(j) = variance_of_eta(spec.family, eta(j)) / disp;
            cw(j) = cumulant_d3(spec.family, eta(j)) / disp;
            lev(j) = c.Z.row(j) * Hinv * c.Z.row(j).transpose();
        }
        const VectorXd clev = cw.cwiseProduct(lev);
        const VectorXd Dinv_u = cov.D_inv * ui;
        for (Eigen::Index k = 0; k < dim; ++k) {
            const MatrixXd& dD = cov.dD[static_cast<std::size_t>(k)];
            const MatrixXd dDinv = -cov.D_inv * dD * cov.D_inv;
            const VectorXd du = Hinv * (-dDinv * ui);
            const double dlogdetH = (Hinv.cwiseProduct(dDinv)).sum() + clev.dot(c.Z * du);
            (*grad)(p + k) += 0.5 * Dinv_u.dot(dD * Dinv_u) - 0.5 * (cov.D_inv.cwiseProduct(dD)).sum() - 0.5 * dlogdetH;
        }
        if (p) {
            const MatrixXd dudb = -Hinv * (c.Z.transpose() * w.asDiagonal() * c.X);
            const VectorXd g = c.X.transpose() * r - 0.5 * (c.X + c.Z * dudb).transpose() * clev;
            grad->head(p) += g;
        }
    }
    return value;
}

double laplace_reml_objective(const GlmmSpec& spec, const Dataset& data, const CovParams& theta, VectorXd* grad,
                              InnerMode* mode, const LaplaceSettings& settings) {
    const auto cov = build_cov(theta);
    const Eigen::Index p = data.p();
    const Eigen::Index q = data.q();
    const Eigen::Index m = data.m();
    const auto dim = static_cast<Eigen::Index>(cov.dD.size());

    VectorXd start = mode && mode->beta.size() == p && mode->beta.allFinite() ? mode->beta : VectorXd();
    if (start.size() != p) start = glm_fit(spec.family, data);
    const InnerMode im = inner_mode(spec, data, theta, InnerOver::Beta_and_U, start, mode ? &mode->u : nullptr,
                                    settings.inner_tol);
    if (mode) *mode = im;

    const VectorXd eta = linear_predictor(data, im.beta, im.u);
    const VectorXd w = curvature_weights(spec.family, data, eta);
    const BorderedSystem sys(data, w, cov.D_inv);

    double value;
    if (settings.expanded_form) {
        double quad = 0.0;
        for (Eigen::Index i = 0; i < m; ++i) quad += inv_quad(cov, im.u.col(i));
        double log_det_xwx = 0.0;
        if (p) {
            const MatrixXd xwx = data.X().transpose() * w.asDiagonal() * data.X();
            log_det_xwx = 2.0 * Eigen::LLT<MatrixXd>(xwx).matrixLLT().diagonal().array().log().sum();
        }
        value = -0.5 * m * cov.log_det - 0.5 * quad - 0.5 * (sys.log_det() - log_det_xwx);
        if (grad) *grad = VectorXd::Constant(dim, std::numeric_limits<double>::quiet_NaN());
        return value;
    }
    value = im.joint + 0.5 * static_cast<double>(p + q * m) * kLog2Pi - 0.5 * sys.log_det();
    if (!grad) return value;

    *grad = VectorXd::Zero(dim);
    const MatrixXd Sinv = sys.schur_inverse();
    VectorXd cw(data.n()), lev(data.n());
    std::vector<MatrixXd> T(static_cast<std::size_t>(m)), Auu_inv(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) {
        T[static_cast<std::size_t>(i)] = sys.T_block(i, i);
        Auu_inv[static_cast<std::size_t>(i)] = sys.uu_inverse(i);
    }
    const auto& idx = data.cluster_index();
    for (Eigen::Index j = 0; j < data.n(); ++j) {
        cw(j) = cumulant_d3(spec.family, eta(j)) / (spec.family.phi * data.a()(j));
        const auto i = static_cast<std::size_t>(idx[j]);
        const VectorXd z = data.Z().row(j).transpose();
        double l = z.dot(Auu_inv[i] * z);
        if (p) {
            const VectorXd xt = data.X().row(j).transpose() - sys.cross(idx[j]).transpose() * z;
            l += xt.dot(Sinv * xt);
        }
        lev(j) = l;
    }
    const VectorXd clev = cw.cwiseProduct(lev);
    const MatrixXd S = im.u * im.u.transpose();
    const VectorXd h = h_function(cov, S / static_cast<double>(m)) * static_cast<double>(m);
    for (Eigen::Index k = 0; k < dim; ++k) {
        const MatrixXd& dD = cov.dD[static_cast<std::size_t>(k)];
        const MatrixXd dDinv = -cov.D_inv * dD * cov.D_inv;
        const MatrixXd ru = -dDinv * im.u;
        VectorXd db;
        MatrixXd du;
        sys.solve(VectorXd::Zero(p), ru, db, du);
        const VectorXd deta = linear_predictor(data, db, du);
        double tr = 0.0;
        for (Eigen::Index i = 0; i < m; ++i) tr += (T[static_cast<std::size_t>(i)].cwiseProduct(dDinv)).sum();
        (*grad)(k) = 0.5 * h(k) - 0.5 * (tr + clev.dot(deta));
    }
    return value;
}

FitResult laplace_fit(const GlmmSpec& spec, const Dataset& data, bool reml, const LaplaceSettings& settings,
                      const FitResult* init) {
    FitResult fit;
    fit.method = reml ? Method::LAPLACE_REML : Method::LAPLACE_ML;
    try {
        data.check_family(spec.family);
        const Eigen::Index p = data.p();
        const VectorXd beta0 = init && init->beta.size() == p ? init->beta : glm_fit(spec.family, data);
        const CovParams theta0 = init && init->theta.theta.size() ? init->theta
                                     : CovParams::from_matrix(0.1 * MatrixXd::Identity(spec.q, spec.q), spec.diag_only);
        auto on_theta = [&](const VectorXd& x) { return CovParams{x, spec.q, spec.diag_only}; };

        if (!reml) {
            RandomEffects warm = RandomEffects::Zero(data.q(), data.m());
            optim::Objective f = [&](const VectorXd& x, VectorXd* g) {
                try {
                    const double v = laplace_ml_objective(spec, data, x.head(p), on_theta(x.tail(x.size() - p)), g,
                                                          &warm);
                    if (g) *g = -*g;
                    return std::isfinite(v) ? -v : std::numeric_limits<double>::infinity();
                } catch (const NumericalError&) {
                    return std::numeric_limits<double>::infinity();
                }
            };
            auto opts = box_for(spec, p, settings);
            VectorXd x0(p + theta0.theta.size());
            x0 << beta0, theta0.theta;
            const auto res = optim::bfgs_minimize(f, x0, opts);
            fit.beta = res.x.head(p);
            fit.theta = on_theta(res.x.tail(res.x.size() - p));
            fit.objective = laplace_ml_objective(spec, data, fit.beta, fit.theta, nullptr, &warm);
            fit.u = warm;
            fit.iterations = res.iterations;
            fit.converged = res.converged;
            if (on_bound(res.x, opts)) fit.notes.push_back("variance parameter on its bound");
            if (res.stalled) fit.notes.push_back("optimizer: " + res.message);
            if (!res.converged) fit.fail("optimizer: " + res.message);
        } else {
            InnerMode mode;
            mode.beta = beta0;
            mode.u = RandomEffects::Zero(data.q(), data.m());
            optim::Objective f = [&](const VectorXd& x, VectorXd* g) {
                try {
                    VectorXd* gp = settings.expanded_form ? nullptr : g;
                    const double v = laplace_reml_objective(spec, data, on_theta(x), gp, &mode, settings);
                    if (gp) *gp = -*gp;
                    return std::isfinite(v) ? -v : std::numeric_limits<double>::infinity();
                } catch (const NumericalError&) {
                    return std::numeric_limits<double>::infinity();
                }
            };
            optim::Objective objective = f;
            if (settings.expanded_form) {
                objective = optim::with_numeric_gradient([&](const VectorXd& x) { return f(x, nullptr); });
            }
            auto opts = box_for(spec, 0, settings);
            opts.lazy_gradient = settings.expanded_form;
            const auto res = optim::bfgs_minimize(objective, theta0.theta, opts);
            fit.theta = on_theta(res.x);
            fit.objective = laplace_reml_objective(spec, data, fit.theta, nullptr, &mode, settings);
            fit.beta = mode.beta;
            fit.u = mode.u;
            fit.iterations = res.iterations;
            fit.converged = res.converged;
            if (on_bound(res.x, opts)) fit.notes.push_back("variance parameter on its bound");
            if (res.stalled) fit.notes.push_back("optimizer: " + res.message);
            if (!res.converged) fit.fail("optimizer: " + res.message);
        }
        fit.Sigma = build_cov(fit.theta).D;
    } catch (const std::exception& e) {
        fit.fail(e.what());
    }
    return fit;
}

}  // namespace glmmreml
