#include "glmmreml/model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace glmmreml {

namespace {

double softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double expit(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kLog2Pi = 1.8378770664093453;

}  // namespace

std::string to_string(FamilyKind kind) {
    switch (kind) {
        case FamilyKind::Bernoulli: return "bernoulli";
        case FamilyKind::Poisson: return "poisson";
        case FamilyKind::Gaussian: return "gaussian";
    }
    return "unknown";
}

double link_eval(const Family& family, LinkFn which, double x) {
    switch (family.kind) {
        case FamilyKind::Bernoulli:
            if (which == LinkFn::GInv) return expit(x);
            if (!(x > 0.0 && x < 1.0)) throw DomainError("logit link needs mu in (0,1)");
            return which == LinkFn::G ? std::log(x / (1.0 - x)) : 1.0 / (x * (1.0 - x));
        case FamilyKind::Poisson:
            if (which == LinkFn::GInv) return std::exp(x);
            if (!(x > 0.0)) throw DomainError("log link needs mu > 0");
            return which == LinkFn::G ? std::log(x) : 1.0 / x;
        case FamilyKind::Gaussian:
            return which == LinkFn::GPrime ? 1.0 : x;
    }
    throw DomainError("unknown family");
}

double variance_fn(const Family& family, double mu) {
    switch (family.kind) {
        case FamilyKind::Bernoulli:
            if (!(mu >= 0.0 && mu <= 1.0)) throw DomainError("Bernoulli mean outside [0,1]");
            return mu * (1.0 - mu);
        case FamilyKind::Poisson:
            if (!(mu >= 0.0)) throw DomainError("Poisson mean must be nonnegative");
            return mu;
        case FamilyKind::Gaussian:
            return 1.0;
    }
    throw DomainError("unknown family");
}

double cumulant(const Family& family, double eta) {
    switch (family.kind) {
        case FamilyKind::Bernoulli: return softplus(eta);
        case FamilyKind::Poisson: return std::exp(eta);
        case FamilyKind::Gaussian: return 0.5 * eta * eta;
    }
    return 0.0;
}

double mean_of_eta(const Family& family, double eta) {
    switch (family.kind) {
        case FamilyKind::Bernoulli: return expit(eta);
        case FamilyKind::Poisson: return std::exp(eta);
        case FamilyKind::Gaussian: return eta;
    }
    return 0.0;
}

double variance_of_eta(const Family& family, double eta) {
    switch (family.kind) {
        case FamilyKind::Bernoulli: {
            const double mu = expit(eta);
            return mu * (1.0 - mu);
        }
        case FamilyKind::Poisson: return std::exp(eta);
        case FamilyKind::Gaussian: return 1.0;
    }
    return 0.0;
}

double pin_mean(const Family& family, double mu) {
    switch (family.kind) {
        case FamilyKind::Bernoulli: return std::clamp(mu, kMeanPin, 1.0 - kMeanPin);
        case FamilyKind::Poisson: return std::max(mu, kMeanPin);
        case FamilyKind::Gaussian: return mu;
    }
    return mu;
}

double log_density(const Family& family, double y, double eta, double a) {
    const double disp = family.phi * a;
    switch (family.kind) {
        case FamilyKind::Bernoulli:
            return (y * eta - softplus(eta)) / disp;
        case FamilyKind::Poisson: {
            if (std::isinf(eta) && eta < 0) return y > 0 ? -std::numeric_limits<double>::infinity() : 0.0;
            return (y * eta - std::exp(eta)) / disp - std::lgamma(y + 1.0);
        }
        case FamilyKind::Gaussian: {
            const double r = y - eta;
            return -0.5 * (kLog2Pi + std::log(disp)) - 0.5 * r * r / disp;
        }
    }
    return 0.0;
}

Dataset::Dataset(VectorXd y, MatrixXd X, MatrixXd Z, std::vector<int> cluster_labels, VectorXd prior_weights)
    : y_(std::move(y)), X_(std::move(X)), Z_(std::move(Z)), a_(std::move(prior_weights)) {
    const Eigen::Index n = y_.size();
    if (n == 0) throw std::invalid_argument("dataset has no observations");
    if (X_.rows() != n || Z_.rows() != n || static_cast<Eigen::Index>(cluster_labels.size()) != n)
        throw std::invalid_argument("y, X, Z and cluster index must have the same number of rows");
    if (a_.size() == 0) a_ = VectorXd::Ones(n);
    if (a_.size() != n) throw std::invalid_argument("prior weights length differs from n");
    if ((a_.array() <= 0.0).any()) throw std::invalid_argument("prior weights must be positive");
    if (X_.cols() > n) throw std::invalid_argument("more fixed effects than observations");
    if (X_.cols() > 0) {
        Eigen::ColPivHouseholderQR<MatrixXd> qr(X_);
        if (qr.rank() < X_.cols()) throw std::invalid_argument("X is not of full column rank");
    }

    std::unordered_map<int, int> index_of;
    cluster_index_.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        auto [it, inserted] = index_of.try_emplace(cluster_labels[i], static_cast<int>(labels_.size()));
        if (inserted) labels_.push_back(cluster_labels[i]);
        cluster_index_[i] = it->second;
    }

    std::vector<std::vector<Eigen::Index>> rows(labels_.size());
    for (Eigen::Index i = 0; i < n; ++i) rows[cluster_index_[i]].push_back(i);
    clusters_.resize(labels_.size());
    for (std::size_t c = 0; c < rows.size(); ++c) {
        auto& cl = clusters_[c];
        const auto ni = static_cast<Eigen::Index>(rows[c].size());
        cl.rows = rows[c];
        cl.X.resize(ni, X_.cols());
        cl.Z.resize(ni, Z_.cols());
        cl.y.resize(ni);
        cl.a.resize(ni);
        for (Eigen::Index k = 0; k < ni; ++k) {
            const auto r = rows[c][k];
            cl.X.row(k) = X_.row(r);
            cl.Z.row(k) = Z_.row(r);
            cl.y(k) = y_(r);
            cl.a(k) = a_(r);
        }
    }
}

Dataset Dataset::with_response(const VectorXd& y) const {
    if (y.size() != n()) throw std::invalid_argument("response length differs from n");
    Dataset copy = *this;
    copy.y_ = y;
    for (auto& cl : copy.clusters_)
        for (Eigen::Index k = 0; k < cl.size(); ++k) cl.y(k) = y(cl.rows[k]);
    return copy;
}

void Dataset::check_family(const Family& family) const {
    for (Eigen::Index i = 0; i < n(); ++i) {
        const double v = y_(i);
        if (!std::isfinite(v)) throw DomainError("non-finite response");
        if (family.kind == FamilyKind::Bernoulli && v != 0.0 && v != 1.0)
            throw DomainError("Bernoulli response must be 0 or 1");
        if (family.kind == FamilyKind::Poisson && (v < 0.0 || v != std::floor(v)))
            throw DomainError("Poisson response must be a nonnegative integer");
    }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r\"");
        const auto e = cell.find_last_not_of(" \t\r\"");
        out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    return out;
}

int column_number(const std::string& name, char prefix) {
    if (name.size() < 2 || name[0] != prefix) return -1;
    for (std::size_t i = 1; i < name.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(name[i]))) return -1;
    return std::stoi(name.substr(1));
}

}  // namespace

Dataset read_dataset_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("empty CSV input");
    const auto header = split_csv(line);
    int y_col = -1, cluster_col = -1;
    std::map<int, int> x_cols, z_cols;
    for (int c = 0; c < static_cast<int>(header.size()); ++c) {
        const auto& h = header[c];
        if (h == "y") y_col = c;
        else if (h == "cluster") cluster_col = c;
        else if (int k = column_number(h, 'x'); k >= 0) x_cols[k] = c;
        else if (int k = column_number(h, 'z'); k >= 0) z_cols[k] = c;
        else throw std::invalid_argument("unexpected CSV column '" + h + "'");
    }
    if (y_col < 0 || cluster_col < 0) throw std::invalid_argument("CSV needs 'y' and 'cluster' columns");
    if (z_cols.empty()) throw std::invalid_argument("CSV needs at least one z column");

    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split_csv(line);
        if (cells.size() != header.size()) throw std::invalid_argument("ragged CSV row: " + line);
        std::vector<double> v(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c) {
            if (static_cast<int>(c) == cluster_col) continue;
            v[c] = std::stod(cells[c]);
        }
        rows.push_back(std::move(v));
        labels.push_back(static_cast<int>(std::stol(cells[cluster_col])));
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    VectorXd y(n);
    MatrixXd X(n, static_cast<Eigen::Index>(x_cols.size()));
    MatrixXd Z(n, static_cast<Eigen::Index>(z_cols.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
        y(i) = rows[i][y_col];
        Eigen::Index j = 0;
        for (const auto& [k, c] : x_cols) X(i, j++) = rows[i][c];
        j = 0;
        for (const auto& [k, c] : z_cols) Z(i, j++) = rows[i][c];
    }
    return Dataset(std::move(y), std::move(X), std::move(Z), std::move(labels));
}

void write_dataset_csv(std::ostream& out, const Dataset& data) {
    out << "y";
    for (Eigen::Index j = 0; j < data.p(); ++j) out << ",x" << j + 1;
    for (Eigen::Index j = 0; j < data.q(); ++j) out << ",z" << j + 1;
    out << ",cluster\n";
    out.precision(17);
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        out << data.y()(i);
        for (Eigen::Index j = 0; j < data.p(); ++j) out << ',' << data.X()(i, j);
        for (Eigen::Index j = 0; j < data.q(); ++j) out << ',' << data.Z()(i, j);
        out << ',' << data.cluster_labels()[data.cluster_index()[i]] << '\n';
    }
}

int CovParams::dim(int q, bool diag_only) { return diag_only ? q : q * (q + 1) / 2; }

CovParams CovParams::from_matrix(const MatrixXd& D, bool diag_only) {
    const int q = static_cast<int>(D.rows());
    CovParams out{VectorXd(dim(q, diag_only)), q, diag_only};
    if (diag_only) {
        for (int k = 0; k < q; ++k) {
            if (!(D(k, k) > 0.0)) throw DomainError("covariance diagonal must be positive");
            out.theta(k) = 0.5 * std::log(D(k, k));
        }
        return out;
    }
    Eigen::LLT<MatrixXd> llt(D);
    if (llt.info() != Eigen::Success) throw DomainError("covariance matrix is not positive definite");
    const MatrixXd L = llt.matrixL();
    int r = 0;
    for (int i = 0; i < q; ++i)
        for (int j = 0; j <= i; ++j) out.theta(r++) = i == j ? std::log(L(i, i)) : L(i, j);
    return out;
}

CovMatrices build_cov(const CovParams& params) {
    const int q = params.q;
    if (params.theta.size() != CovParams::dim(q, params.diag_only))
        throw std::invalid_argument("theta has the wrong length for this covariance layout");
    if (!params.theta.allFinite()) throw NumericalError("non-finite covariance parameters");

    CovMatrices out;
    out.L = MatrixXd::Zero(q, q);
    std::vector<std::pair<int, int>> slot;
    if (params.diag_only) {
        for (int k = 0; k < q; ++k) {
            out.L(k, k) = std::exp(params.theta(k));
            slot.emplace_back(k, k);
        }
    } else {
        int r = 0;
        for (int i = 0; i < q; ++i)
            for (int j = 0; j <= i; ++j, ++r) {
                out.L(i, j) = i == j ? std::exp(params.theta(r)) : params.theta(r);
                slot.emplace_back(i, j);
            }
    }
    out.D = out.L * out.L.transpose();
    const MatrixXd Linv = out.L.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(q, q));
    out.D_inv = Linv.transpose() * Linv;
    out.log_det = 2.0 * out.L.diagonal().array().log().sum();
    for (const auto& [i, j] : slot) {
        MatrixXd dL = MatrixXd::Zero(q, q);
        dL(i, j) = i == j ? out.L(i, i) : 1.0;
        MatrixXd dD = dL * out.L.transpose();
        dD += dD.transpose().eval();
        out.dD.push_back(std::move(dD));
    }
    return out;
}

double inv_quad(const CovMatrices& cov, const VectorXd& v) {
    return cov.L.triangularView<Eigen::Lower>().solve(v).squaredNorm();
}

std::string to_string(Method method) {
    switch (method) {
        case Method::PQL_ML: return "pql";
        case Method::PQL_REML: return "pql-reml";
        case Method::MQL_REML: return "mql-reml";
        case Method::LAPLACE_ML: return "laplace";
        case Method::LAPLACE_REML: return "laplace-reml";
        case Method::MPL_ML: return "mpl";
        case Method::MPL_REML: return "mpl-reml";
        case Method::DBC_ML: return "dbc";
        case Method::DBC_REML: return "dbc-reml";
        case Method::IDEAL: return "ideal";
    }
    return "unknown";
}

Method method_from_string(const std::string& name) {
    static const std::map<std::string, Method> table = {
        {"pql", Method::PQL_ML},           {"pql-reml", Method::PQL_REML},
        {"mql-reml", Method::MQL_REML},    {"laplace", Method::LAPLACE_ML},
        {"laplace-reml", Method::LAPLACE_REML}, {"mpl", Method::MPL_ML},
        {"mpl-reml", Method::MPL_REML},    {"dbc", Method::DBC_ML},
        {"dbc-reml", Method::DBC_REML},    {"ideal", Method::IDEAL},
        {"tmb", Method::LAPLACE_ML},       {"tmb-reml", Method::LAPLACE_REML},
    };
    const auto it = table.find(name);
    if (it == table.end()) throw std::invalid_argument("unknown method '" + name + "'");
    return it->second;
}

VectorXd linear_predictor(const Dataset& data, const VectorXd& beta, const RandomEffects& u) {
    VectorXd eta = data.p() > 0 ? VectorXd(data.X() * beta) : VectorXd::Zero(data.n());
    const auto& idx = data.cluster_index();
    for (Eigen::Index i = 0; i < data.n(); ++i) eta(i) += data.Z().row(i).dot(u.col(idx[i]));
    return eta;
}

double cond_loglik(const Family& family, const Dataset& data, const VectorXd& eta) {
    if (eta.size() != data.n()) throw std::invalid_argument("eta length differs from n");
    double total = 0.0;
    for (Eigen::Index i = 0; i < data.n(); ++i) total += log_density(family, data.y()(i), eta(i), data.a()(i));
    return total;
}

double random_effects_logdensity(const CovMatrices& cov, const RandomEffects& u) {
    const double q = static_cast<double>(u.rows());
    double total = 0.0;
    for (Eigen::Index c = 0; c < u.cols(); ++c) {
        const auto uc = u.col(c);
        total += -0.5 * (q * kLog2Pi + cov.log_det) - 0.5 * inv_quad(cov, uc);
    }
    return total;
}

double joint_loglik(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta, const RandomEffects& u,
                    const CovParams& theta) {
    if (beta.size() != data.p() || u.rows() != data.q() || u.cols() != data.m() || theta.q != data.q())
        throw std::invalid_argument("joint_loglik: inconsistent dimensions");
    const auto cov = build_cov(theta);
    return cond_loglik(spec.family, data, linear_predictor(data, beta, u)) + random_effects_logdensity(cov, u);
}

JointGradient joint_loglik_gradient(const GlmmSpec& spec, const Dataset& data, const VectorXd& beta,
                                    const RandomEffects& u, const CovParams& theta) {
    const auto cov = build_cov(theta);
    const VectorXd eta = linear_predictor(data, beta, u);
    VectorXd resid(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i)
        resid(i) = (data.y()(i) - mean_of_eta(spec.family, eta(i))) / (spec.family.phi * data.a()(i));

    JointGradient g;
    g.beta = data.X().transpose() * resid;
    g.u = -cov.D_inv * u;
    const auto& idx = data.cluster_index();
    for (Eigen::Index i = 0; i < data.n(); ++i) g.u.col(idx[i]) += data.Z().row(i).transpose() * resid(i);
    const MatrixXd S = u * u.transpose();
    g.theta = 0.5 * h_function(cov, S / static_cast<double>(u.cols())) * static_cast<double>(u.cols());
    return g;
}

VectorXd h_function(const CovMatrices& cov, const MatrixXd& S) {
    if (S.rows() != cov.D.rows() || S.cols() != cov.D.cols()) throw std::invalid_argument("h: S has wrong shape");
    const MatrixXd inner = cov.D_inv * (S - cov.D) * cov.D_inv;
    VectorXd h(static_cast<Eigen::Index>(cov.dD.size()));
    for (std::size_t r = 0; r < cov.dD.size(); ++r) h(static_cast<Eigen::Index>(r)) = (inner.cwiseProduct(cov.dD[r])).sum();
    return h;
}

int project_psd(MatrixXd& S, double floor) {
    S = 0.5 * (S + S.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    VectorXd ev = es.eigenvalues();
    int floored = 0;
    for (Eigen::Index k = 0; k < ev.size(); ++k)
        if (ev(k) < floor) {
            ev(k) = floor;
            ++floored;
        }
    if (floored > 0) S = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return floored;
}

}  // namespace glmmreml
