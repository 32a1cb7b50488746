#include "glmmreml/dbc.hpp"

#include <cmath>
#include <string>

#include "glmmreml/laplace.hpp"
#include "glmmreml/linearization.hpp"
#include "glmmreml/mpl.hpp"

namespace glmmreml {

namespace {

bool exact_bias(const GlmmSpec& spec, const DbcSettings& s) {
    switch (s.bias_mode) {
        case DbcSettings::BiasMode::ExactGaussian:
            if (spec.family.kind != FamilyKind::Gaussian)
                throw UnsupportedError("closed-form bias requires a Gaussian response");
            return true;
        case DbcSettings::BiasMode::Auto:
            return spec.family.kind == FamilyKind::Gaussian;
        default:
            return false;
    }
}

double max_abs(const MatrixXd& A) { return A.size() ? A.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

MatrixXd mean_cond_moment(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                          const QuadRule& rule, MatrixXd* modes) {
    const auto sw = marginal_sweep(spec, data, beta, build_cov(theta), rule, kMomentUU, true, modes);
    MatrixXd S = MatrixXd::Zero(data.q(), data.q());
    for (const auto& E : sw.cluster_Euu) S += E;
    return S / static_cast<double>(data.m());
}

MatrixXd bias_estimate(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const CovParams& theta,
                       const QuadRule& rule, Rng& rng, int draws) {
    if (draws < 1) throw std::invalid_argument("bias_estimate needs at least one draw");
    const MatrixXd D = build_cov(theta).D;
    MatrixXd acc = MatrixXd::Zero(data.q(), data.q());
    for (int d = 0; d < draws; ++d) {
        const Dataset sim = simulate_response(spec.family, data, beta, D, rng);
        MatrixXd modes;
        const VectorXd beta_sim = profile_beta(spec, sim, theta, rule, beta, {}, &modes);
        acc += mean_cond_moment(spec, sim, beta_sim, theta, rule, &modes);
        acc -= mean_cond_moment(spec, sim, beta, theta, rule, &modes);
    }
    return acc / static_cast<double>(draws);
}

MatrixXd gaussian_bias(const Family& family, const Dataset& data, const CovParams& theta) {
    const MatrixXd D = build_cov(theta).D;
    const Eigen::Index p = data.p();
    const Eigen::Index q = data.q();
    std::vector<MatrixXd> B;  // D Z_i'V_i^-1 X_i, q x p
    B.reserve(data.clusters().size());
    MatrixXd M = MatrixXd::Zero(p, p);
    for (const auto& c : data.clusters()) {
        MatrixXd V = c.Z * D * c.Z.transpose();
        V.diagonal() += family.phi * c.a;
        Eigen::LLT<MatrixXd> llt(V);
        if (llt.info() != Eigen::Success) throw SingularSystemError("marginal covariance of a cluster is singular");
        const MatrixXd VinvX = llt.solve(c.X);
        M.noalias() += c.X.transpose() * VinvX;
        B.push_back(D * c.Z.transpose() * VinvX);
    }
    Eigen::LLT<MatrixXd> Mllt(M);
    if (Mllt.info() != Eigen::Success) throw SingularSystemError("X'V^-1 X is singular");
    MatrixXd bias = MatrixXd::Zero(q, q);
    for (const auto& b : B) bias.noalias() -= b * Mllt.solve(b.transpose());
    return bias / static_cast<double>(data.m());
}

MatrixXd moment_root(const MatrixXd& S, bool diag_only, double floor, int* floored) {
    MatrixXd D = 0.5 * (S + S.transpose());
    if (diag_only) D = MatrixXd(D.diagonal().asDiagonal());
    const int n = project_psd(D, floor);
    if (floored) *floored += n;
    return D;
}

FitResult dbc_solve(const GlmmSpec& spec, const Dataset& data, bool reml, const DbcSettings& settings,
                    const FitResult* init, DbcTrace* trace) {
    FitResult fit;
    fit.method = reml ? Method::DBC_REML : Method::DBC_ML;
    DbcTrace local;
    DbcTrace& tr = trace ? *trace : local;
    tr = DbcTrace{};
    try {
        if (settings.outer_iters < 1) throw std::invalid_argument("outer_iters must be at least 1");
        data.check_family(spec.family);
        const bool use_bias = reml && !settings.force_zero_bias;
        const bool exact = use_bias && exact_bias(spec, settings);

        FitResult start;
        if (init && init->converged && init->Sigma.rows() == spec.q) {
            start = *init;
        } else {
            start = laplace_fit(spec, data, false);
            if (!start.converged) {
                start.beta = glm_fit(spec.family, data);
                start.Sigma = 0.1 * MatrixXd::Identity(spec.q, spec.q);
            }
        }
        MatrixXd D = moment_root(start.Sigma, spec.diag_only, settings.psd_floor);
        CovParams theta = CovParams::from_matrix(D, spec.diag_only);
        VectorXd beta = start.beta;
        MatrixXd modes;
        MatrixXd bias = MatrixXd::Zero(spec.q, spec.q);
        int bias_draws = 0;
        bool reached = false;
        tr.Sigma.push_back(D);

        int k = 0;
        for (; k < settings.outer_iters; ++k) {
            beta = profile_beta(spec, data, theta, settings.rule, beta, {}, &modes);
            const MatrixXd S = mean_cond_moment(spec, data, beta, theta, settings.rule, &modes);
            tr.beta.push_back(beta);
            if (exact) {
                bias = gaussian_bias(spec.family, data, theta);
            } else if (use_bias) {
                Rng rng = make_rng(settings.seed, static_cast<std::uint64_t>(k));
                try {
                    const MatrixXd b = bias_estimate(spec, data, beta, theta, settings.rule, rng,
                                                     settings.mc_reps_per_cluster);
                    if (settings.running_average) {
                        bias = (bias * bias_draws + b) / static_cast<double>(bias_draws + 1);
                        ++bias_draws;
                    } else {
                        bias = b;
                    }
                } catch (const NumericalError&) {
                    if (++tr.mc_errors > settings.max_mc_errors)
                        throw NumericalError("bias simulation failed " + std::to_string(tr.mc_errors) + " times");
                }
            }
            const MatrixXd next = moment_root(S - bias, spec.diag_only, settings.psd_floor, &tr.psd_floored);
            if (!next.allFinite() || max_abs(next) > settings.divergence_bound)
                throw NumericalError("variance iteration diverged");
            const double change = max_abs(next - D) / std::max(max_abs(D), 1e-12);
            D = next;
            theta = CovParams::from_matrix(D, spec.diag_only);
            tr.Sigma.push_back(D);
            if (settings.tol > 0.0 && change < settings.tol) {
                reached = true;
                ++k;
                break;
            }
        }
        fit.beta = profile_beta(spec, data, theta, settings.rule, beta, {}, &modes);
        tr.beta.push_back(fit.beta);
        tr.S = mean_cond_moment(spec, data, fit.beta, theta, settings.rule, &modes);
        tr.bias = bias;
        fit.theta = theta;
        fit.Sigma = D;
        fit.u = modes;
        fit.iterations = k;
        fit.converged = settings.tol > 0.0 ? reached : true;
        if (!fit.converged) fit.notes.push_back("tolerance not reached within the iteration limit");
        if (tr.psd_floored > 0)
            fit.notes.push_back("corrected moment projected to the PSD cone " + std::to_string(tr.psd_floored) +
                                " times");
        if (exceeds_variance(fit.Sigma, settings.unstable_threshold)) fit.unstable = true;
    } catch (const std::exception& e) {
        fit.fail(e.what());
    }
    return fit;
}

}  // namespace glmmreml
