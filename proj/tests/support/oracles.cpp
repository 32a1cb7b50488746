#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace oracle {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double logdens(const glmmreml::Family& family, double y, double eta) {
    switch (family.kind) {
        case glmmreml::FamilyKind::Bernoulli: return y * eta - (eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)));
        case glmmreml::FamilyKind::Poisson: return y * eta - std::exp(eta) - std::lgamma(y + 1.0);
        case glmmreml::FamilyKind::Gaussian: {
            const double r = y - eta;
            return -0.5 * (kLog2Pi + std::log(family.phi) + r * r / family.phi);
        }
    }
    return 0.0;
}

}  // namespace

VectorXd nelder_mead(const std::function<double(const VectorXd&)>& f, VectorXd x0, double step, double ftol,
                     int max_evals, int restarts) {
    const Eigen::Index n = x0.size();
    auto safe = [&](const VectorXd& x) {
        const double v = f(x);
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    };
    for (int round = 0; round <= restarts; ++round) {
        std::vector<VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
        std::vector<double> val(static_cast<std::size_t>(n + 1));
        for (Eigen::Index i = 0; i < n; ++i) pts[static_cast<std::size_t>(i + 1)](i) += step;
        for (std::size_t i = 0; i <= static_cast<std::size_t>(n); ++i) val[i] = safe(pts[i]);
        int evals = static_cast<int>(n + 1);
        while (evals < max_evals) {
            std::vector<std::size_t> idx(pts.size());
            std::iota(idx.begin(), idx.end(), 0);
            std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return val[a] < val[b]; });
            std::vector<VectorXd> sp;
            std::vector<double> sv;
            for (auto i : idx) {
                sp.push_back(pts[i]);
                sv.push_back(val[i]);
            }
            pts = sp;
            val = sv;
            if (std::abs(val.back() - val.front()) <= ftol * (1.0 + std::abs(val.front()))) break;
            VectorXd centroid = VectorXd::Zero(n);
            for (Eigen::Index i = 0; i < n; ++i) centroid += pts[static_cast<std::size_t>(i)];
            centroid /= static_cast<double>(n);
            const VectorXd& worst = pts.back();
            const VectorXd xr = centroid + (centroid - worst);
            const double fr = safe(xr);
            ++evals;
            if (fr < val.front()) {
                const VectorXd xe = centroid + 2.0 * (centroid - worst);
                const double fe = safe(xe);
                ++evals;
                if (fe < fr) {
                    pts.back() = xe;
                    val.back() = fe;
                } else {
                    pts.back() = xr;
                    val.back() = fr;
                }
            } else if (fr < val[val.size() - 2]) {
                pts.back() = xr;
                val.back() = fr;
            } else {
                const bool outside = fr < val.back();
                const VectorXd xc = outside ? VectorXd(centroid + 0.5 * (xr - centroid))
                                            : VectorXd(centroid + 0.5 * (worst - centroid));
                const double fc = safe(xc);
                ++evals;
                if (fc < std::min(fr, val.back())) {
                    pts.back() = xc;
                    val.back() = fc;
                } else {
                    for (std::size_t i = 1; i < pts.size(); ++i) {
                        pts[i] = pts[0] + 0.5 * (pts[i] - pts[0]);
                        val[i] = safe(pts[i]);
                        ++evals;
                    }
                }
            }
        }
        const auto best = std::min_element(val.begin(), val.end()) - val.begin();
        x0 = pts[static_cast<std::size_t>(best)];
        step *= 0.1;
    }
    return x0;
}

double bisect(const std::function<double(double)>& f, double lo, double hi, double tol) {
    double flo = f(lo);
    for (int it = 0; it < 400 && hi - lo > tol; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if ((fm < 0) == (flo < 0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

MatrixXd cov_from(const VectorXd& t, int q) {
    MatrixXd L = MatrixXd::Zero(q, q);
    int r = 0;
    for (int i = 0; i < q; ++i)
        for (int j = 0; j <= i; ++j, ++r) L(i, j) = i == j ? std::exp(t(r)) : t(r);
    return L * L.transpose();
}

Lmm::Lmm(const glmmreml::Dataset& data, double phi_) : y(data.y()), X(data.X()), phi(phi_), q(static_cast<int>(data.q())) {
    Zfull = MatrixXd::Zero(data.n(), data.m() * q);
    for (Eigen::Index i = 0; i < data.n(); ++i)
        Zfull.block(i, data.cluster_index()[static_cast<std::size_t>(i)] * q, 1, q) = data.Z().row(i);
}

MatrixXd Lmm::V(const MatrixXd& D) const {
    const Eigen::Index m = Zfull.cols() / q;
    MatrixXd G = MatrixXd::Zero(Zfull.cols(), Zfull.cols());
    for (Eigen::Index i = 0; i < m; ++i) G.block(i * q, i * q, q, q) = D;
    MatrixXd out = Zfull * G * Zfull.transpose();
    out.diagonal().array() += phi;
    return out;
}

VectorXd Lmm::gls_beta(const MatrixXd& D) const {
    const Eigen::LDLT<MatrixXd> Vf(V(D));
    const MatrixXd VX = Vf.solve(X);
    return (X.transpose() * VX).ldlt().solve(VX.transpose() * y);
}

double Lmm::loglik(const VectorXd& beta, const MatrixXd& D) const {
    const Eigen::LLT<MatrixXd> Vf(V(D));
    const VectorXd r = y - X * beta;
    const double logdet = 2.0 * Eigen::MatrixXd(Vf.matrixL()).diagonal().array().log().sum();
    return -0.5 * (static_cast<double>(y.size()) * kLog2Pi + logdet + r.dot(Vf.solve(r)));
}

double Lmm::profile(const MatrixXd& D, bool reml) const {
    const Eigen::LLT<MatrixXd> Vf(V(D));
    if (Vf.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const MatrixXd VX = Vf.solve(X);
    const MatrixXd XVX = X.transpose() * VX;
    const VectorXd beta = XVX.ldlt().solve(VX.transpose() * y);
    double v = loglik(beta, D);
    if (reml) {
        const Eigen::LLT<MatrixXd> Mf(XVX);
        v += 0.5 * static_cast<double>(X.cols()) * kLog2Pi -
             Eigen::MatrixXd(Mf.matrixL()).diagonal().array().log().sum();
    }
    return v;
}

MatrixXd Lmm::fit(bool reml, const MatrixXd& D0) const {
    const Eigen::LLT<MatrixXd> L0(D0);
    const MatrixXd L = L0.matrixL();
    VectorXd t(q * (q + 1) / 2);
    int r = 0;
    for (int i = 0; i < q; ++i)
        for (int j = 0; j <= i; ++j, ++r) t(r) = i == j ? std::log(L(i, i)) : L(i, j);
    const VectorXd best = nelder_mead([&](const VectorXd& x) { return -profile(cov_from(x, q), reml); }, t);
    return cov_from(best, q);
}

McEstimate mc_cluster_loglik(const glmmreml::Family& family, const glmmreml::ClusterData& c, const VectorXd& beta,
                             const MatrixXd& D, long draws, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    const Eigen::Index q = D.rows();
    const MatrixXd L = Eigen::LLT<MatrixXd>(D).matrixL();
    const VectorXd offset = c.X * beta;
    auto ll_at = [&](const VectorXd& u) {
        const VectorXd eta = offset + c.Z * u;
        double s = 0.0;
        for (Eigen::Index j = 0; j < eta.size(); ++j) s += logdens(family, c.y(j), eta(j));
        return s;
    };
    const double shift = ll_at(VectorXd::Zero(q));
    double mean = 0.0, m2 = 0.0;
    VectorXd e(q);
    for (long k = 1; k <= draws; ++k) {
        for (Eigen::Index d = 0; d < q; ++d) e(d) = normal(rng);
        const double v = std::exp(ll_at(L * e) - shift);
        const double delta = v - mean;
        mean += delta / static_cast<double>(k);
        m2 += delta * (v - mean);
    }
    const double sd = std::sqrt(m2 / static_cast<double>(draws - 1));
    return {shift + std::log(mean), sd / (mean * std::sqrt(static_cast<double>(draws)))};
}

namespace {

glmmreml::Dataset build(std::mt19937_64& rng, int m, int size, int p, int q, const MatrixXd& D, const VectorXd& beta,
                        const std::function<double(double)>& draw_y) {
    std::normal_distribution<double> normal;
    const int n = m * size;
    MatrixXd X(n, p), Z(n, q);
    VectorXd y(n);
    std::vector<int> labels(static_cast<std::size_t>(n));
    const MatrixXd L = Eigen::LLT<MatrixXd>(D).matrixL();
    int r = 0;
    for (int i = 0; i < m; ++i) {
        VectorXd e(q);
        for (int d = 0; d < q; ++d) e(d) = normal(rng);
        const VectorXd u = L * e;
        for (int j = 0; j < size; ++j, ++r) {
            X(r, 0) = 1.0;
            for (int k = 1; k < p; ++k) X(r, k) = normal(rng);
            Z(r, 0) = 1.0;
            for (int k = 1; k < q; ++k) Z(r, k) = q > 1 && p > 1 ? X(r, 1) : normal(rng);
            y(r) = draw_y(X.row(r).dot(beta) + Z.row(r).dot(u));
            labels[static_cast<std::size_t>(r)] = i;
        }
    }
    return glmmreml::Dataset(y, X, Z, labels);
}

}  // namespace

glmmreml::Dataset random_lmm(std::mt19937_64& rng, int m, int size, int p, int q, const MatrixXd& D,
                             const VectorXd& beta, double phi) {
    std::normal_distribution<double> normal;
    return build(rng, m, size, p, q, D, beta, [&](double eta) { return eta + std::sqrt(phi) * normal(rng); });
}

glmmreml::Dataset random_glmm(std::mt19937_64& rng, const glmmreml::Family& family, int m, int size, int p, int q,
                              const MatrixXd& D, const VectorXd& beta) {
    return build(rng, m, size, p, q, D, beta, [&](double eta) {
        if (family.kind == glmmreml::FamilyKind::Bernoulli)
            return std::bernoulli_distribution(1.0 / (1.0 + std::exp(-eta)))(rng) ? 1.0 : 0.0;
        return static_cast<double>(std::poisson_distribution<int>(std::exp(eta))(rng));
    });
}

VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x, double h) {
    VectorXd g(x.size());
    VectorXd xp = x;
    auto central = [&](Eigen::Index i, double s) {
        xp(i) = x(i) + s;
        const double a = f(xp);
        xp(i) = x(i) - s;
        const double b = f(xp);
        xp(i) = x(i);
        return (a - b) / (2.0 * s);
    };
    for (Eigen::Index i = 0; i < x.size(); ++i) g(i) = (4.0 * central(i, h / 2) - central(i, h)) / 3.0;
    return g;
}

double rel_err(const MatrixXd& a, const MatrixXd& b) {
    const double scale = b.cwiseAbs().maxCoeff();
    return (a - b).cwiseAbs().maxCoeff() / std::max(scale, 1e-300);
}

}  // namespace oracle
