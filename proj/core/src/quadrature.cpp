#include "glmmreml/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <tuple>

namespace glmmreml {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
// Tensor nodes whose product weight falls below this fraction of the largest are dropped.
constexpr double kLogPrune = -46.0;

Rule1d golub_welsch(const VectorXd& offdiag, double mu0) {
    const Eigen::Index n = offdiag.size() + 1;
    MatrixXd J = MatrixXd::Zero(n, n);
    for (Eigen::Index k = 0; k + 1 < n; ++k) J(k, k + 1) = J(k + 1, k) = offdiag(k);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(J);
    Rule1d r{es.eigenvalues(), VectorXd(n)};
    for (Eigen::Index k = 0; k < n; ++k) r.weights(k) = mu0 * es.eigenvectors()(0, k) * es.eigenvectors()(0, k);
    // symmetrize: both rules are symmetric about zero
    for (Eigen::Index k = 0; k < n / 2; ++k) {
        const double x = 0.5 * (r.nodes(n - 1 - k) - r.nodes(k));
        const double w = 0.5 * (r.weights(k) + r.weights(n - 1 - k));
        r.nodes(k) = -x;
        r.nodes(n - 1 - k) = x;
        r.weights(k) = r.weights(n - 1 - k) = w;
    }
    if (n % 2 == 1) r.nodes(n / 2) = 0.0;
    return r;
}

QuadGrid build_grid(const QuadRule& rule, int q) {
    const bool gh = rule.kind == QuadRule::Kind::AdaptiveGH;
    const Rule1d r = gh ? gauss_hermite(rule.nodes_per_dim) : gauss_legendre(rule.nodes_per_dim);
    const Eigen::Index n = r.nodes.size();
    VectorXd s1(n), lw1(n), lraw(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        lraw(k) = std::log(r.weights(k));
        if (gh) {
            // u = mode + L^-T sqrt(2) t; the exp(t^2) undoes the Hermite weight
            s1(k) = std::numbers::sqrt2 * r.nodes(k);
            lw1(k) = lraw(k) + r.nodes(k) * r.nodes(k) + 0.5 * std::log(2.0);
        } else {
            s1(k) = rule.box_halfwidth * r.nodes(k);
            lw1(k) = lraw(k) + std::log(rule.box_halfwidth);
        }
    }
    std::vector<std::pair<VectorXd, double>> kept;
    double best = -std::numeric_limits<double>::infinity();
    Eigen::Index total = 1;
    for (int d = 0; d < q; ++d) total *= n;
    std::vector<double> raw(static_cast<std::size_t>(total));
    for (Eigen::Index t = 0; t < total; ++t) {
        Eigen::Index rem = t;
        double lr = 0.0;
        for (int d = 0; d < q; ++d) {
            lr += lraw(rem % n);
            rem /= n;
        }
        raw[static_cast<std::size_t>(t)] = lr;
        best = std::max(best, lr);
    }
    for (Eigen::Index t = 0; t < total; ++t) {
        if (gh && raw[static_cast<std::size_t>(t)] < best + kLogPrune) continue;
        VectorXd s(q);
        double lw = 0.0;
        Eigen::Index rem = t;
        for (int d = 0; d < q; ++d) {
            s(d) = s1(rem % n);
            lw += lw1(rem % n);
            rem /= n;
        }
        kept.emplace_back(std::move(s), lw);
    }
    QuadGrid g{MatrixXd(q, static_cast<Eigen::Index>(kept.size())), VectorXd(static_cast<Eigen::Index>(kept.size()))};
    for (std::size_t k = 0; k < kept.size(); ++k) {
        g.s.col(static_cast<Eigen::Index>(k)) = kept[k].first;
        g.log_weight(static_cast<Eigen::Index>(k)) = kept[k].second;
    }
    return g;
}

double log_sum_exp(const VectorXd& v) {
    const double mx = v.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((v.array() - mx).exp().sum());
}

struct Integrand {
    const Family& family;
    const ClusterData& c;
    VectorXd offset;
    VectorXd disp;
    VectorXd constant;  // per-observation additive constant of the log density

    Integrand(const Family& f, const ClusterData& cl, const VectorXd& beta) : family(f), c(cl) {
        const Eigen::Index n = c.size();
        offset = c.X.cols() > 0 ? VectorXd(c.X * beta) : VectorXd::Zero(n);
        disp = family.phi * c.a;
        constant.resize(n);
        for (Eigen::Index j = 0; j < n; ++j)
            constant(j) = log_density(family, c.y(j), 0.0, c.a(j)) + cumulant(family, 0.0) / disp(j);
    }

    // sum_j (y eta - b(eta)) / disp, without constants
    double kernel(const VectorXd& eta) const {
        double s = 0.0;
        for (Eigen::Index j = 0; j < eta.size(); ++j) s += (c.y(j) * eta(j) - cumulant(family, eta(j))) / disp(j);
        return s;
    }
};

}  // namespace

Rule1d gauss_hermite(int n) {
    if (n < 1) throw std::invalid_argument("quadrature needs at least one node");
    VectorXd off(n - 1);
    for (int k = 1; k < n; ++k) off(k - 1) = std::sqrt(0.5 * k);
    return golub_welsch(off, std::sqrt(std::numbers::pi));
}

Rule1d gauss_legendre(int n) {
    if (n < 1) throw std::invalid_argument("quadrature needs at least one node");
    VectorXd off(n - 1);
    for (int k = 1; k < n; ++k) off(k - 1) = k / std::sqrt(4.0 * k * k - 1.0);
    return golub_welsch(off, 2.0);
}

VectorXd conditional_mode(const Family& family, const ClusterData& c, const VectorXd& offset, const CovMatrices& cov,
                          VectorXd u, Eigen::LLT<MatrixXd>& H_llt) {
    VectorXd disp = family.phi * c.a;
    auto kernel = [&](const VectorXd& eta) {
        double s = 0.0;
        for (Eigen::Index j = 0; j < eta.size(); ++j) s += (c.y(j) * eta(j) - cumulant(family, eta(j))) / disp(j);
        return s;
    };
    auto objective = [&](const VectorXd& v) {
        const VectorXd eta = offset + c.Z * v;
        return kernel(eta) - 0.5 * inv_quad(cov, v);
    };
    double fu = objective(u);
    if (!std::isfinite(fu)) {
        u.setZero();
        fu = objective(u);
    }
    VectorXd r(c.size()), w(c.size());
    bool converged = false;
    for (int it = 0; it < 100; ++it) {
        const VectorXd eta = offset + c.Z * u;
        for (Eigen::Index j = 0; j < c.size(); ++j) {
            r(j) = (c.y(j) - mean_of_eta(family, eta(j))) / disp(j);
            w(j) = variance_of_eta(family, eta(j)) / disp(j);
        }
        const VectorXd g = c.Z.transpose() * r - cov.D_inv * u;
        const MatrixXd H = c.Z.transpose() * w.asDiagonal() * c.Z + cov.D_inv;
        H_llt.compute(H);
        if (H_llt.info() != Eigen::Success) throw NumericalError("conditional curvature is not positive definite");
        const VectorXd delta = H_llt.solve(g);
        const double scale = 1.0 + u.lpNorm<Eigen::Infinity>();
        if (delta.lpNorm<Eigen::Infinity>() < 1e-10 * scale || g.dot(delta) < 1e-13 * (1.0 + std::abs(fu))) {
            u += delta;
            converged = true;
            break;
        }
        double t = 1.0;
        VectorXd trial = u + delta;
        double ft = objective(trial);
        while (!(ft >= fu - 1e-12 * std::abs(fu)) && t > 1e-10) {
            t *= 0.5;
            trial = u + t * delta;
            ft = objective(trial);
        }
        if (t <= 1e-10) return u;  // no further ascent possible at machine precision
        u = trial;
        fu = ft;
        if (t * delta.lpNorm<Eigen::Infinity>() < 1e-12 * scale) {
            converged = true;
            break;
        }
    }
    if (!converged) throw InnerModeError("conditional mode search did not converge in 100 Newton steps");
    // refresh the curvature at the final point
    const VectorXd eta = offset + c.Z * u;
    for (Eigen::Index j = 0; j < c.size(); ++j) w(j) = variance_of_eta(family, eta(j)) / disp(j);
    H_llt.compute(c.Z.transpose() * w.asDiagonal() * c.Z + cov.D_inv);
    if (H_llt.info() != Eigen::Success) throw NumericalError("conditional curvature is not positive definite");
    return u;
}

const QuadGrid& quad_grid(const QuadRule& rule, int q) {
    if (q < 1 || q > 2) throw UnsupportedError("quadrature supports one or two random effects per cluster");
    if (rule.nodes_per_dim < 5) throw std::invalid_argument("quadrature needs at least 5 nodes per dimension");
    using Key = std::tuple<int, int, double, int>;
    static std::mutex mu;
    static std::map<Key, std::unique_ptr<QuadGrid>> cache;
    const Key key{rule.nodes_per_dim, static_cast<int>(rule.kind),
                  rule.kind == QuadRule::Kind::GaussLegendreBox ? rule.box_halfwidth : 0.0, q};
    std::lock_guard lock(mu);
    auto& slot = cache[key];
    if (!slot) slot = std::make_unique<QuadGrid>(build_grid(rule, q));
    return *slot;
}

ClusterIntegral integrate_cluster(const Family& family, const ClusterData& cluster, const VectorXd& beta,
                                  const CovMatrices& cov, const QuadRule& rule, unsigned moments,
                                  const VectorXd* warm_mode) {
    const int q = static_cast<int>(cov.D.rows());
    const QuadGrid& grid = quad_grid(rule, q);
    const Integrand f(family, cluster, beta);
    const Eigen::Index n = cluster.size();
    const Eigen::Index p = cluster.X.cols();

    Eigen::LLT<MatrixXd> H_llt;
    VectorXd start = warm_mode && warm_mode->size() == q && warm_mode->allFinite() ? *warm_mode : VectorXd::Zero(q);
    ClusterIntegral out;
    out.mode = conditional_mode(family, cluster, f.offset, cov, start, H_llt);
    const MatrixXd Lt = H_llt.matrixU();
    const double log_det_L = Lt.diagonal().array().log().sum();

    const Eigen::Index K = grid.s.cols();
    const MatrixXd U = Lt.triangularView<Eigen::Upper>().solve(grid.s).colwise() + out.mode;
    const MatrixXd ETA = (cluster.Z * U).colwise() + f.offset;
    const double prior_const = -0.5 * (q * kLog2Pi + cov.log_det);
    const double data_const = f.constant.sum();

    VectorXd lv(K);
    for (Eigen::Index k = 0; k < K; ++k) {
        const auto uk = U.col(k);
        lv(k) = grid.log_weight(k) + f.kernel(ETA.col(k)) + data_const + prior_const - 0.5 * inv_quad(cov, uk);
    }
    const double lse = log_sum_exp(lv);
    out.loglik = lse - log_det_L;
    if (!std::isfinite(out.loglik)) throw NumericalError("cluster marginal likelihood is not finite");
    if (moments == kLogLikOnly) return out;

    const bool want_score = moments & (kScoreBeta | kHessianBeta);
    const bool want_hess = moments & kHessianBeta;
    const bool want_uu = moments & kMomentUU;
    if (want_score) out.score_beta = VectorXd::Zero(p);
    if (want_hess) out.hessian_beta = MatrixXd::Zero(p, p);
    if (want_uu) out.Euu = MatrixXd::Zero(q, q);
    VectorXd EW = VectorXd::Zero(n);
    MatrixXd SS = MatrixXd::Zero(p, p);
    VectorXd r(n);
    for (Eigen::Index k = 0; k < K; ++k) {
        const double lp = lv(k) - lse;
        if (lp < -700.0) continue;
        const double pk = std::exp(lp);
        if (want_uu) out.Euu.noalias() += pk * U.col(k) * U.col(k).transpose();
        if (!want_score) continue;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double eta = ETA(j, k);
            r(j) = (cluster.y(j) - mean_of_eta(family, eta)) / f.disp(j);
            if (want_hess) EW(j) += pk * variance_of_eta(family, eta) / f.disp(j);
        }
        const VectorXd s = cluster.X.transpose() * r;
        out.score_beta.noalias() += pk * s;
        if (want_hess) SS.noalias() += pk * s * s.transpose();
    }
    if (want_hess) {
        out.hessian_beta = -cluster.X.transpose() * EW.asDiagonal() * cluster.X + SS -
                           out.score_beta * out.score_beta.transpose();
        out.hessian_beta = 0.5 * (out.hessian_beta + out.hessian_beta.transpose()).eval();
    }
    if (want_uu) out.Euu = 0.5 * (out.Euu + out.Euu.transpose()).eval();
    return out;
}

double cluster_marginal_loglik(const GlmmSpec& spec, const ClusterData& cluster, const VectorXd& beta,
                               const CovParams& theta, const QuadRule& rule) {
    return integrate_cluster(spec.family, cluster, beta, build_cov(theta), rule, kLogLikOnly).loglik;
}

double total_marginal_loglik(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta,
                             const CovParams& theta, const QuadRule& rule) {
    return marginal_sweep(spec, data, beta, build_cov(theta), rule, kLogLikOnly).loglik;
}

VectorXd cluster_score_beta(const GlmmSpec& spec, const ClusterData& cluster, const VectorXd& beta,
                            const CovParams& theta, const QuadRule& rule) {
    return integrate_cluster(spec.family, cluster, beta, build_cov(theta), rule, kScoreBeta).score_beta;
}

MatrixXd cond_moment_uuT(const GlmmSpec& spec, const ClusterData& cluster, const VectorXd& beta,
                         const CovParams& theta, const QuadRule& rule) {
    return integrate_cluster(spec.family, cluster, beta, build_cov(theta), rule, kMomentUU).Euu;
}

MarginalSweep marginal_sweep(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta,
                             const CovMatrices& cov, const QuadRule& rule, unsigned moments, bool keep_clusters,
                             MatrixXd* modes) {
    const Eigen::Index p = data.p();
    const Eigen::Index q = data.q();
    const Eigen::Index m = data.m();
    if (cov.D.rows() != q) throw std::invalid_argument("covariance dimension differs from the design");
    if (modes && (modes->rows() != q || modes->cols() != m)) *modes = MatrixXd::Zero(q, m);

    MarginalSweep out;
    if (moments & (kScoreBeta | kHessianBeta)) out.score_beta = VectorXd::Zero(p);
    if (moments & kHessianBeta) out.hessian_beta = MatrixXd::Zero(p, p);
    MatrixXd Euu_sum = MatrixXd::Zero(q, q);
    for (Eigen::Index i = 0; i < m; ++i) {
        const VectorXd warm = modes ? VectorXd(modes->col(i)) : VectorXd();
        const auto ci = integrate_cluster(spec.family, data.clusters()[static_cast<std::size_t>(i)], beta, cov, rule,
                                          moments, modes ? &warm : nullptr);
        if (modes) modes->col(i) = ci.mode;
        out.loglik += ci.loglik;
        if (moments & (kScoreBeta | kHessianBeta)) out.score_beta += ci.score_beta;
        if (moments & kHessianBeta) out.hessian_beta += ci.hessian_beta;
        if (moments & kMomentUU) Euu_sum += ci.Euu;
        if (keep_clusters) {
            out.cluster_scores.push_back(ci.score_beta);
            out.cluster_Euu.push_back(ci.Euu);
        }
    }
    if (moments & kMomentUU) out.score_theta = 0.5 * h_function(cov, Euu_sum / static_cast<double>(m)) * m;
    return out;
}

VectorXd profile_beta(const GlmmSpec& spec, const Dataset& data, const CovParams& theta, const QuadRule& rule,
                      const VectorXd& init, const ProfileOptions& opts, MatrixXd* modes) {
    const auto cov = build_cov(theta);
    const Eigen::Index p = data.p();
    if (init.size() != p) throw std::invalid_argument("profile_beta: init has the wrong length");
    if (p == 0) return init;
    MatrixXd local_modes;
    MatrixXd* mp = modes ? modes : &local_modes;

    VectorXd beta = init;
    MarginalSweep cur = marginal_sweep(spec, data, beta, cov, rule, kScoreBeta | kHessianBeta, false, mp);
    for (int it = 0; it < opts.max_iter; ++it) {
        if (cur.score_beta.lpNorm<Eigen::Infinity>() < opts.gtol) return beta;
        MatrixXd info = -cur.hessian_beta;
        Eigen::LLT<MatrixXd> llt(info);
        VectorXd step;
        if (llt.info() == Eigen::Success) {
            step = llt.solve(cur.score_beta);
        } else {
            // observed information indefinite far from the optimum: fall back to steepest ascent
            step = cur.score_beta / std::max(1.0, info.diagonal().cwiseAbs().maxCoeff());
        }
        double t = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
            const VectorXd trial = beta + t * step;
            MatrixXd trial_modes = *mp;
            MarginalSweep next;
            try {
                next = marginal_sweep(spec, data, trial, cov, rule, kScoreBeta | kHessianBeta, false, &trial_modes);
            } catch (const NumericalError&) {
                continue;
            }
            if (next.loglik >= cur.loglik - 1e-10 * std::abs(cur.loglik)) {
                beta = trial;
                cur = std::move(next);
                *mp = std::move(trial_modes);
                moved = true;
                break;
            }
        }
        if (!moved) break;
    }
    if (cur.score_beta.lpNorm<Eigen::Infinity>() < 1e-6) return beta;
    throw ProfileError("profile score did not vanish (|score| = " +
                       std::to_string(cur.score_beta.lpNorm<Eigen::Infinity>()) + ")");
}

}  // namespace glmmreml
