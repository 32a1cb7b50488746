#include "glmmreml/linearization.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "glmmreml/optim.hpp"

namespace glmmreml {

namespace {

struct ClusterSolve {
    MatrixXd VinvX;
    MatrixXd VinvZ;
    VectorXd Vinvxi;
};

// Per-cluster pieces of V = W^-1 + Z D Z'.
struct WorkingLmm {
    double log_det_V = 0.0;
    double xi_Vinv_xi = 0.0;
    MatrixXd M;        // X'V^-1 X
    VectorXd XtVxi;    // X'V^-1 xi
    MatrixXd G1;       // sum Z'V^-1 Z
    std::vector<ClusterSolve> parts;
};

WorkingLmm working_lmm(const MatrixXd& D, const VectorXd& xi, const VectorXd& W, const Dataset& data) {
    const Eigen::Index p = data.p();
    const Eigen::Index q = data.q();
    WorkingLmm out;
    out.M = MatrixXd::Zero(p, p);
    out.XtVxi = VectorXd::Zero(p);
    out.G1 = MatrixXd::Zero(q, q);
    for (const auto& c : data.clusters()) {
        const Eigen::Index n = c.size();
        MatrixXd V = c.Z * D * c.Z.transpose();
        VectorXd xic(n);
        for (Eigen::Index j = 0; j < n; ++j) {
            V(j, j) += 1.0 / W(c.rows[static_cast<std::size_t>(j)]);
            xic(j) = xi(c.rows[static_cast<std::size_t>(j)]);
        }
        Eigen::LLT<MatrixXd> llt(V);
        if (llt.info() != Eigen::Success) throw NumericalError("working covariance V is not positive definite");
        out.log_det_V += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        ClusterSolve s{llt.solve(c.X), llt.solve(c.Z), llt.solve(xic)};
        out.xi_Vinv_xi += xic.dot(s.Vinvxi);
        out.M.noalias() += c.X.transpose() * s.VinvX;
        out.XtVxi.noalias() += c.X.transpose() * s.Vinvxi;
        out.G1.noalias() += c.Z.transpose() * s.VinvZ;
        out.parts.push_back(std::move(s));
    }
    return out;
}

double log_det_pd(const MatrixXd& M, const char* what) {
    if (M.rows() == 0) return 0.0;
    Eigen::LLT<MatrixXd> llt(M);
    if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + " is not positive definite");
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

double max_abs(const VectorXd& v) { return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0; }

double rel_change(const MatrixXd& now, const MatrixXd& before) {
    if (now.size() == 0) return 0.0;
    const double scale = std::max(before.cwiseAbs().maxCoeff(), 1e-8);
    return (now - before).cwiseAbs().maxCoeff() / scale;
}

CovParams initial_theta(const GlmmSpec& spec) {
    return CovParams::from_matrix(0.1 * MatrixXd::Identity(spec.q, spec.q), spec.diag_only);
}

optim::BfgsOptions theta_box(const GlmmSpec& spec, double floor) {
    optim::BfgsOptions opts;
    opts.gtol = 1e-8;
    opts.max_iter = 500;
    const int dim = CovParams::dim(spec.q, spec.diag_only);
    opts.lower = VectorXd::Constant(dim, -std::numeric_limits<double>::infinity());
    opts.upper = VectorXd::Constant(dim, std::numeric_limits<double>::infinity());
    int r = 0;
    for (int i = 0; i < spec.q; ++i) {
        for (int j = 0; j <= i; ++j) {
            if (spec.diag_only && i != j) continue;
            if (i == j) {
                opts.lower(r) = 0.5 * std::log(floor);
                opts.upper(r) = 0.5 * std::log(1e6);
            }
            ++r;
        }
    }
    return opts;
}

bool at_floor(const MatrixXd& D, double floor) {
    for (Eigen::Index k = 0; k < D.rows(); ++k)
        if (D(k, k) <= floor * 1.0001) return true;
    return false;
}

// Maximizes the profiled working objective over theta with xi and W held fixed.
CovParams optimize_theta(const GlmmSpec& spec, const Dataset& data, const WorkingState& state, const CovParams& start,
                         bool reml, double floor) {
    const auto objective = [&](const VectorXd& x, VectorXd* grad) {
        const CovParams th{x, spec.q, spec.diag_only};
        try {
            const double v = pql_profile_objective(th, state.xi, state.W, data, reml, grad);
            if (grad) *grad = -*grad;
            return -v;
        } catch (const NumericalError&) {
            return std::numeric_limits<double>::infinity();
        }
    };
    auto opts = theta_box(spec, floor);
    const auto res = optim::bfgs_minimize(objective, start.theta.cwiseMax(opts.lower).cwiseMin(opts.upper), opts);
    return {res.x, spec.q, spec.diag_only};
}

}  // namespace

double pql_objective_theta(const CovParams& theta, const VectorXd& xi, const VectorXd& beta, const VectorXd& W,
                           const Dataset& data, bool reml) {
    const auto cov = build_cov(theta);
    const auto w = working_lmm(cov.D, xi, W, data);
    const double quad = w.xi_Vinv_xi - 2.0 * beta.dot(w.XtVxi) + beta.dot(w.M * beta);
    double v = -0.5 * w.log_det_V - 0.5 * quad;
    if (reml) v -= 0.5 * log_det_pd(w.M, "X'V^-1X");
    return v;
}

double pql_profile_objective(const CovParams& theta, const VectorXd& xi, const VectorXd& W, const Dataset& data,
                             bool reml, VectorXd* grad, VectorXd* beta_gls) {
    const auto cov = build_cov(theta);
    const auto w = working_lmm(cov.D, xi, W, data);
    const Eigen::Index p = data.p();
    Eigen::LLT<MatrixXd> Mllt;
    VectorXd beta = VectorXd::Zero(p);
    double log_det_M = 0.0;
    if (p > 0) {
        Mllt.compute(w.M);
        if (Mllt.info() != Eigen::Success) throw NumericalError("X'V^-1X is not positive definite");
        beta = Mllt.solve(w.XtVxi);
        log_det_M = 2.0 * Mllt.matrixLLT().diagonal().array().log().sum();
    }
    const double quad = w.xi_Vinv_xi - beta.dot(w.XtVxi);
    double v = -0.5 * w.log_det_V - 0.5 * quad;
    if (reml) v -= 0.5 * log_det_M;
    if (beta_gls) *beta_gls = beta;
    if (grad) {
        MatrixXd G = -w.G1;
        const auto& clusters = data.clusters();
        for (std::size_t k = 0; k < clusters.size(); ++k) {
            const auto& s = w.parts[k];
            // Z'V^-1 r with r = xi - X beta
            VectorXd zr = clusters[k].Z.transpose() * s.Vinvxi;
            if (p > 0) zr.noalias() -= clusters[k].Z.transpose() * (s.VinvX * beta);
            G.noalias() += zr * zr.transpose();
            if (reml && p > 0) {
                const MatrixXd B = clusters[k].Z.transpose() * s.VinvX;  // q x p
                G.noalias() += B * Mllt.solve(B.transpose());
            }
        }
        grad->resize(static_cast<Eigen::Index>(cov.dD.size()));
        for (std::size_t r = 0; r < cov.dD.size(); ++r)
            (*grad)(static_cast<Eigen::Index>(r)) = 0.5 * G.cwiseProduct(cov.dD[r]).sum();
    }
    return v;
}

double schall_update(const VectorXd& u_k, double trace_T_kk, double sigma2_k) {
    const double num = u_k.squaredNorm();
    const double den = static_cast<double>(u_k.size()) - trace_T_kk / sigma2_k;
    if (!(num > 0.0)) throw BoundaryError("random effects vanished; variance component at zero");
    if (!(den > 1e-12)) throw BoundaryError("non-positive denominator in the fixed-point variance update");
    return num / den;
}

VectorXd glm_fit(const Family& family, const Dataset& data, int max_iter, double tol) {
    const Eigen::Index p = data.p();
    if (p == 0) return VectorXd(0);
    VectorXd eta(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        // start from the data, shrunk into the mean domain
        const double y = data.y()(i);
        double mu = y;
        if (family.kind == FamilyKind::Bernoulli) mu = (y + 0.5) / 2.0;
        if (family.kind == FamilyKind::Poisson) mu = y + 0.1;
        eta(i) = link_eval(family, LinkFn::G, mu);
    }
    VectorXd beta = VectorXd::Zero(p);
    for (int it = 0; it < max_iter; ++it) {
        const auto s = working_state_at(family, data, eta);
        const MatrixXd XtW = data.X().transpose() * s.W.asDiagonal();
        Eigen::LLT<MatrixXd> llt(XtW * data.X());
        if (llt.info() != Eigen::Success) throw SingularSystemError("X'WX is singular in the GLM fit");
        const VectorXd next = llt.solve(XtW * s.xi);
        const double change = (next - beta).lpNorm<Eigen::Infinity>();
        beta = next;
        eta = data.X() * beta;
        if (it > 0 && change < tol * (1.0 + beta.lpNorm<Eigen::Infinity>())) break;
    }
    return beta;
}

FitResult pql_fit(const GlmmSpec& spec, const Dataset& data, const PqlSettings& settings, const FitResult* init) {
    if (settings.max_outer_iter < 1 || !(settings.tol > 0)) throw std::invalid_argument("invalid PQL settings");
    FitResult fit;
    fit.method = settings.reml ? Method::PQL_REML : Method::PQL_ML;
    const bool fixed_point = settings.variance_update == PqlSettings::VarianceUpdate::FixedPoint;
    if (fixed_point && !spec.diag_only && spec.q > 1) {
        fit.fail("fixed-point variance updates need a diagonal random-effects covariance");
        return fit;
    }
    try {
        data.check_family(spec.family);
        VectorXd beta = init ? init->beta : glm_fit(spec.family, data);
        RandomEffects u = init && init->u.size() ? init->u : RandomEffects::Zero(data.q(), data.m());
        CovParams theta = init && init->theta.theta.size() ? init->theta : initial_theta(spec);
        MatrixXd Sigma = build_cov(theta).D;
        bool boundary = false;

        for (int outer = 1; outer <= settings.max_outer_iter; ++outer) {
            fit.iterations = outer;
            const auto cov = build_cov(theta);
            const VectorXd beta_prev = beta;
            const MatrixXd Sigma_prev = Sigma;
            WorkingState state;
            for (int inner = 0; inner < settings.max_inner_iter; ++inner) {
                state = adjusted_response(spec.family, data, beta, u);
                const auto sol = solve_mme(data, state.W, cov.D_inv, state.xi);
                const double change = std::max(max_abs(sol.beta - beta), (sol.u - u).cwiseAbs().maxCoeff());
                const double scale = 1.0 + std::max(max_abs(sol.beta), sol.u.cwiseAbs().maxCoeff());
                beta = sol.beta;
                u = sol.u;
                if (change < settings.inner_tol * scale) break;
            }
            state = adjusted_response(spec.family, data, beta, u);

            if (fixed_point) {
                const BorderedSystem sys(data, state.W, cov.D_inv);
                VectorXd traces = VectorXd::Zero(data.q());
                if (settings.reml) {
                    traces = sys.T_component_traces();
                } else {
                    for (Eigen::Index i = 0; i < data.m(); ++i) traces += sys.uu_inverse(i).diagonal();
                }
                MatrixXd D = MatrixXd::Zero(data.q(), data.q());
                for (Eigen::Index k = 0; k < data.q(); ++k) {
                    try {
                        D(k, k) = std::max(schall_update(u.row(k).transpose(), traces(k), cov.D(k, k)),
                                           settings.variance_floor);
                    } catch (const BoundaryError&) {
                        D(k, k) = settings.variance_floor;
                    }
                }
                theta = CovParams::from_matrix(D, spec.diag_only);
            } else {
                theta = optimize_theta(spec, data, state, theta, settings.reml, settings.variance_floor);
            }
            Sigma = build_cov(theta).D;
            boundary = at_floor(Sigma, settings.variance_floor);

            const double change = std::max(rel_change(beta, beta_prev), rel_change(Sigma, Sigma_prev));
            if (outer > 1 && change < settings.tol) {
                fit.converged = true;
                break;
            }
        }

        // final (beta, u) at the accepted theta
        const auto cov = build_cov(theta);
        for (int inner = 0; inner < settings.max_inner_iter; ++inner) {
            const auto state = adjusted_response(spec.family, data, beta, u);
            const auto sol = solve_mme(data, state.W, cov.D_inv, state.xi);
            const double change = std::max(max_abs(sol.beta - beta), (sol.u - u).cwiseAbs().maxCoeff());
            beta = sol.beta;
            u = sol.u;
            if (change < settings.inner_tol) break;
        }
        const auto state = adjusted_response(spec.family, data, beta, u);
        fit.beta = beta;
        fit.u = u;
        fit.theta = theta;
        fit.Sigma = cov.D;
        fit.objective = pql_profile_objective(theta, state.xi, state.W, data, settings.reml);
        if (boundary) fit.notes.push_back("variance component at the lower bound");
        if (!fit.converged) fit.fail("no convergence within " + std::to_string(settings.max_outer_iter) + " outer iterations");
    } catch (const std::exception& e) {
        fit.fail(e.what());
    }
    return fit;
}

FitResult mql_fit(const GlmmSpec& spec, const Dataset& data, const PqlSettings& settings) {
    FitResult fit;
    fit.method = Method::MQL_REML;
    try {
        data.check_family(spec.family);
        VectorXd beta = glm_fit(spec.family, data);
        CovParams theta = initial_theta(spec);
        MatrixXd Sigma = build_cov(theta).D;
        RandomEffects u = RandomEffects::Zero(data.q(), data.m());
        for (int outer = 1; outer <= settings.max_outer_iter; ++outer) {
            fit.iterations = outer;
            const VectorXd beta_prev = beta;
            const MatrixXd Sigma_prev = Sigma;
            const auto state = working_state_at(spec.family, data, data.X() * beta);
            theta = optimize_theta(spec, data, state, theta, settings.reml, settings.variance_floor);
            const auto cov = build_cov(theta);
            const auto sol = solve_mme(data, state.W, cov.D_inv, state.xi);
            beta = sol.beta;
            u = sol.u;
            Sigma = cov.D;
            if (outer > 1 && std::max(rel_change(beta, beta_prev), rel_change(Sigma, Sigma_prev)) < settings.tol) {
                fit.converged = true;
                break;
            }
        }
        fit.beta = beta;
        fit.u = u;
        fit.theta = theta;
        fit.Sigma = Sigma;
        const auto state = working_state_at(spec.family, data, data.X() * beta);
        fit.objective = pql_profile_objective(theta, state.xi, state.W, data, settings.reml);
        if (at_floor(Sigma, settings.variance_floor)) fit.notes.push_back("variance component at the lower bound");
        if (!fit.converged) fit.fail("no convergence within " + std::to_string(settings.max_outer_iter) + " outer iterations");
    } catch (const std::exception& e) {
        fit.fail(e.what());
    }
    return fit;
}

}  // namespace glmmreml
