#include "glmmreml/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace glmmreml::optim {

namespace {

bool bad(double v) { return !std::isfinite(v); }

VectorXd clip(const VectorXd& x, const BfgsOptions& opts) {
    VectorXd out = x;
    if (opts.lower.size() == x.size()) out = out.cwiseMax(opts.lower);
    if (opts.upper.size() == x.size()) out = out.cwiseMin(opts.upper);
    return out;
}

// Zero the gradient components that push against an active bound.
VectorXd projected(const VectorXd& x, const VectorXd& g, const BfgsOptions& opts) {
    VectorXd out = g;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (opts.lower.size() == x.size() && x(i) <= opts.lower(i) && g(i) > 0) out(i) = 0;
        if (opts.upper.size() == x.size() && x(i) >= opts.upper(i) && g(i) < 0) out(i) = 0;
    }
    return out;
}

}  // namespace

BfgsResult bfgs_minimize(const Objective& f, VectorXd x0, const BfgsOptions& opts) {
    const Eigen::Index n = x0.size();
    BfgsResult res;
    res.x = clip(x0, opts);
    res.grad = VectorXd::Zero(n);
    res.f = f(res.x, &res.grad);
    res.evaluations = 1;
    if (bad(res.f) || !res.grad.allFinite()) {
        res.message = "objective not finite at the starting point";
        return res;
    }
    if (n == 0) {
        res.converged = true;
        return res;
    }

    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
    int small_changes = 0;
    for (int it = 0; it < opts.max_iter; ++it) {
        res.iterations = it + 1;
        const VectorXd pg = projected(res.x, res.grad, opts);
        if (pg.lpNorm<Eigen::Infinity>() < opts.gtol) {
            res.converged = true;
            res.message = "gradient tolerance reached";
            return res;
        }

        VectorXd dir = -H * res.grad;
        if (dir.dot(res.grad) >= 0) {
            H.setIdentity();
            dir = -res.grad;
        }
        double step = 1.0;
        const double dnorm = dir.lpNorm<Eigen::Infinity>();
        if (dnorm > opts.max_step) step = opts.max_step / dnorm;

        const double slope = dir.dot(res.grad);
        VectorXd x_new, g_new(n);
        double f_new = std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls) {
            x_new = clip(res.x + step * dir, opts);
            f_new = f(x_new, opts.lazy_gradient ? nullptr : &g_new);
            ++res.evaluations;
            if (opts.lazy_gradient) g_new.setZero();
            const double actual_slope = (x_new - res.x).dot(res.grad);
            if (!bad(f_new) && g_new.allFinite() && f_new <= res.f + 1e-4 * std::min(actual_slope, 0.0)) {
                accepted = true;
                break;
            }
            if (bad(f_new)) {
                step *= 0.2;
            } else {
                // quadratic interpolation on the step, safeguarded
                const double denom = 2.0 * (f_new - res.f - slope * step);
                double trial = denom > 0 ? -slope * step * step / denom : 0.5 * step;
                step = std::clamp(trial, 0.1 * step, 0.5 * step);
            }
        }
        if (accepted && opts.lazy_gradient) {
            f_new = f(x_new, &g_new);
            ++res.evaluations;
            if (bad(f_new) || !g_new.allFinite()) accepted = false;
        }
        if (!accepted) {
            if (!H.isIdentity()) {
                H.setIdentity();
                continue;
            }
            res.message = "line search failed";
            res.converged = pg.lpNorm<Eigen::Infinity>() < 100 * opts.gtol;
            if (!res.converged && opts.accept_stall) {
                res.converged = res.stalled = true;
                res.message = "no descent at the objective's resolution";
            }
            return res;
        }

        const VectorXd s = x_new - res.x;
        const VectorXd y = g_new - res.grad;
        const double rel_change = std::abs(f_new - res.f) / std::max(1.0, std::abs(res.f));
        res.x = x_new;
        res.grad = g_new;
        res.f = f_new;

        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (it == 0) H *= sy / y.squaredNorm();
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
            H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) + rho * s * s.transpose();
        }

        small_changes = rel_change < opts.ftol ? small_changes + 1 : 0;
        if (small_changes >= 2) {
            res.converged = true;
            res.message = "objective change below tolerance";
            return res;
        }
    }
    res.message = "iteration limit reached";
    return res;
}

VectorXd numeric_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x, double rel_step) {
    VectorXd g(x.size());
    VectorXd xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = rel_step * std::max(1.0, std::abs(x(i)));
        xp(i) = x(i) + h;
        const double fp = f(xp);
        xp(i) = x(i) - h;
        const double fm = f(xp);
        xp(i) = x(i);
        g(i) = (fp - fm) / (2.0 * h);
    }
    return g;
}

Eigen::MatrixXd numeric_hessian(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                                double rel_step) {
    const Eigen::Index n = x.size();
    Eigen::MatrixXd H(n, n);
    VectorXd xp = x;
    const double f0 = f(x);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double hi = rel_step * std::max(1.0, std::abs(x(i)));
        xp(i) = x(i) + hi;
        const double fp = f(xp);
        xp(i) = x(i) - hi;
        const double fm = f(xp);
        xp(i) = x(i);
        H(i, i) = (fp - 2 * f0 + fm) / (hi * hi);
        for (Eigen::Index j = 0; j < i; ++j) {
            const double hj = rel_step * std::max(1.0, std::abs(x(j)));
            auto eval = [&](double si, double sj) {
                xp(i) = x(i) + si * hi;
                xp(j) = x(j) + sj * hj;
                const double v = f(xp);
                xp(i) = x(i);
                xp(j) = x(j);
                return v;
            };
            H(i, j) = H(j, i) = (eval(1, 1) - eval(1, -1) - eval(-1, 1) + eval(-1, -1)) / (4 * hi * hj);
        }
    }
    return H;
}

Objective with_numeric_gradient(std::function<double(const VectorXd&)> f, double rel_step) {
    return [f = std::move(f), rel_step](const VectorXd& x, VectorXd* grad) {
        const double v = f(x);
        if (grad && std::isfinite(v)) *grad = numeric_gradient(f, x, rel_step);
        return v;
    };
}

}  // namespace glmmreml::optim
