#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>

namespace glmmreml::optim {

using Eigen::VectorXd;

/// Objective to be minimized. Writes the gradient when `grad` is non-null.
/// Returning +inf (or NaN) marks the point as infeasible; the line search backs off.
using Objective = std::function<double(const VectorXd& x, VectorXd* grad)>;

struct BfgsOptions {
    int max_iter = 200;
    double gtol = 1e-6;    // on the infinity norm of the gradient
    double ftol = 1e-12;   // relative objective change, two consecutive iterations
    double max_step = 2.0;  // cap on the first trial step length (infinity norm)
    VectorXd lower;        // optional box, empty = unbounded
    VectorXd upper;
    bool lazy_gradient = false;  // evaluate gradients only at accepted points (numeric gradients)
    bool accept_stall = false;   // a failed steepest-descent line search counts as convergence
};

struct BfgsResult {
    VectorXd x;
    double f = 0.0;
    VectorXd grad;
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
    bool stalled = false;  // stopped at the objective's resolution rather than a tolerance
    std::string message;
};

BfgsResult bfgs_minimize(const Objective& f, VectorXd x0, const BfgsOptions& opts = {});

/// Central differences; step_i = rel_step * max(1, |x_i|).
VectorXd numeric_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                          double rel_step = 1e-5);

Eigen::MatrixXd numeric_hessian(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                                double rel_step = 1e-4);

/// Wrap a value-only function with a central-difference gradient.
Objective with_numeric_gradient(std::function<double(const VectorXd&)> f, double rel_step = 1e-5);

}  // namespace glmmreml::optim
