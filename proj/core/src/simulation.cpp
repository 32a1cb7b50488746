#include "glmmreml/simulation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <functional>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "glmmreml/dbc.hpp"
#include "glmmreml/laplace.hpp"
#include "glmmreml/linearization.hpp"
#include "glmmreml/mpl.hpp"

namespace glmmreml {

namespace {

constexpr std::uint64_t kDesignStream = 0x64657369676eULL;
constexpr std::uint64_t kResponseStream = 1;
constexpr std::uint64_t kDbcStream = 2;

MatrixXd cov_factor(const MatrixXd& D) {
    Eigen::LLT<MatrixXd> llt(D);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(D);
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

bool is_mpl_or_dbc(Method m) {
    return m == Method::MPL_ML || m == Method::MPL_REML || m == Method::DBC_ML || m == Method::DBC_REML;
}

std::string num(double v) {
    if (std::isnan(v)) return "NA";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

VectorXd flatten(const EstimateRow& r, Eigen::Index p, Eigen::Index q) {
    VectorXd v = VectorXd::Constant(p + q * (q + 1) / 2, std::numeric_limits<double>::quiet_NaN());
    if (r.beta.size() == p) v.head(p) = r.beta;
    if (r.Sigma.rows() == q && r.Sigma.cols() == q) {
        Eigen::Index k = p;
        for (Eigen::Index i = 0; i < q; ++i)
            for (Eigen::Index j = 0; j <= i; ++j) v(k++) = r.Sigma(i, j);
    }
    return v;
}

}  // namespace

Dataset simulate_response(const Family& family, const Dataset& data, const VectorXd& beta, const MatrixXd& D, Rng& rng,
                          RandomEffects* u_out) {
    const Eigen::Index q = data.q();
    if (D.rows() != q || D.cols() != q) throw std::invalid_argument("covariance dimension differs from the design");
    const MatrixXd L = cov_factor(D);
    std::normal_distribution<double> normal(0.0, 1.0);
    VectorXd y(data.n());
    RandomEffects u(q, data.m());
    Eigen::Index i = 0;
    for (const auto& c : data.clusters()) {
        VectorXd e(q);
        for (Eigen::Index k = 0; k < q; ++k) e(k) = normal(rng);
        u.col(i) = L * e;
        const VectorXd eta = c.X * beta + c.Z * u.col(i);
        for (Eigen::Index j = 0; j < c.size(); ++j) {
            const double mu = mean_of_eta(family, eta(j));
            double draw = 0.0;
            switch (family.kind) {
                case FamilyKind::Bernoulli: draw = std::bernoulli_distribution(mu)(rng) ? 1.0 : 0.0; break;
                case FamilyKind::Poisson: draw = static_cast<double>(std::poisson_distribution<long long>(mu)(rng)); break;
                case FamilyKind::Gaussian: draw = mu + std::sqrt(family.phi * c.a(j)) * normal(rng); break;
            }
            y(c.rows[static_cast<std::size_t>(j)]) = draw;
        }
        ++i;
    }
    if (u_out) *u_out = u;
    return data.with_response(y);
}

ScenarioConfig ScenarioConfig::make(FamilyKind family, int scenario, int m, int cluster_size) {
    if (family == FamilyKind::Gaussian) throw UnsupportedError("scenarios are defined for binary and count responses");
    const int last = family == FamilyKind::Bernoulli ? 4 : 3;
    if (scenario < 1 || scenario > last)
        throw std::invalid_argument("scenario must be between 1 and " + std::to_string(last));
    if (m < 2 || cluster_size < 1) throw std::invalid_argument("need at least two clusters of size one");
    ScenarioConfig c;
    c.family = family;
    c.scenario = scenario;
    c.m = m;
    c.cluster_size = cluster_size;
    c.true_beta = VectorXd::Zero(4 + c.extra_covariates());
    c.true_beta.head(4) << 0.5, 1.0, -1.0, -0.5;
    if (family == FamilyKind::Bernoulli) {
        c.true_Sigma = 0.5 * MatrixXd::Identity(2, 2);
        if (scenario == 4) c.true_Sigma(0, 1) = c.true_Sigma(1, 0) = 0.25;
    } else {
        c.true_Sigma = MatrixXd::Constant(1, 1, 0.25);
    }
    return c;
}

int ScenarioConfig::extra_covariates() const {
    switch (scenario) {
        case 2: return 4;
        case 3: return 10;
        default: return 0;
    }
}

GlmmSpec ScenarioConfig::spec() const {
    GlmmSpec s;
    s.family = family == FamilyKind::Bernoulli ? Family::bernoulli() : Family::poisson();
    s.q = family == FamilyKind::Bernoulli ? 2 : 1;
    s.diag_only = false;
    return s;
}

Covariates make_covariates(const ScenarioConfig& config, int i, int j, const VectorXd& noise) {
    if (i < 1 || i > config.m || j < 1 || j > config.cluster_size)
        throw std::out_of_range("observation index outside the design");
    const int extra = config.extra_covariates();
    if (noise.size() != extra) throw std::invalid_argument("wrong number of null covariates");
    const double x1 = (j - 5) / 4.0;
    const double x2 = 2 * i > config.m ? 1.0 : 0.0;
    Covariates c;
    c.x.resize(4 + extra);
    c.x.head(4) << 1.0, x1, x2, x1 * x2;
    c.x.tail(extra) = noise;
    if (config.family == FamilyKind::Bernoulli) {
        c.z.resize(2);
        c.z << 1.0, x1;
    } else {
        c.z = VectorXd::Ones(1);
    }
    return c;
}

MatrixXd design_noise(const ScenarioConfig& config, std::uint64_t seed) {
    const int extra = config.extra_covariates();
    MatrixXd noise(config.m, extra);
    Rng rng = make_rng(seed, kDesignStream, static_cast<std::uint64_t>(config.scenario));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < config.m; ++i)
        for (int l = 0; l < extra; ++l) noise(i, l) = normal(rng);
    return noise;
}

Dataset scenario_design(const ScenarioConfig& config, std::uint64_t seed) {
    const MatrixXd noise = design_noise(config, seed);
    const Eigen::Index n = static_cast<Eigen::Index>(config.m) * config.cluster_size;
    const Eigen::Index p = 4 + config.extra_covariates();
    const Eigen::Index q = config.family == FamilyKind::Bernoulli ? 2 : 1;
    MatrixXd X(n, p), Z(n, q);
    std::vector<int> labels(static_cast<std::size_t>(n));
    Eigen::Index r = 0;
    for (int i = 1; i <= config.m; ++i)
        for (int j = 1; j <= config.cluster_size; ++j, ++r) {
            const auto c = make_covariates(config, i, j, noise.row(i - 1).transpose());
            X.row(r) = c.x.transpose();
            Z.row(r) = c.z.transpose();
            labels[static_cast<std::size_t>(r)] = i;
        }
    return Dataset(VectorXd::Zero(n), std::move(X), std::move(Z), std::move(labels));
}

Dataset simulate_dataset(const ScenarioConfig& config, std::uint64_t seed, int rep, RandomEffects* u_out) {
    const Dataset design = scenario_design(config, seed);
    Rng rng = make_rng(seed, kResponseStream, static_cast<std::uint64_t>(rep));
    return simulate_response(config.spec().family, design, config.true_beta, config.true_Sigma, rng, u_out);
}

std::vector<EstimateRow> fit_replication(const ScenarioConfig& config, const Dataset& data, int rep,
                                         const StudyOptions& options) {
    const GlmmSpec spec = config.spec();
    std::map<Method, FitResult> done;
    std::map<Method, double> seconds;

    MplSettings mpl;
    mpl.rule = options.rule;
    mpl.unstable_threshold = options.unstable_threshold;
    DbcSettings dbc;
    dbc.rule = options.rule;
    dbc.outer_iters = options.dbc_iters;
    dbc.unstable_threshold = options.unstable_threshold;
    dbc.seed = stream_seed(options.seed, kDbcStream, static_cast<std::uint64_t>(rep));

    std::function<const FitResult&(Method)> get = [&](Method m) -> const FitResult& {
        if (auto it = done.find(m); it != done.end()) return it->second;
        // dependencies first so their time is not charged to this method
        const FitResult* init = nullptr;
        switch (m) {
            case Method::MPL_ML:
            case Method::DBC_ML: init = &get(Method::LAPLACE_ML); break;
            case Method::MPL_REML: init = &get(Method::MPL_ML); break;
            case Method::DBC_REML: init = &get(Method::DBC_ML); break;
            default: break;
        }
        const auto t0 = std::chrono::steady_clock::now();
        FitResult fit;
        switch (m) {
            case Method::PQL_ML:
            case Method::PQL_REML: {
                PqlSettings s;
                s.reml = m == Method::PQL_REML;
                fit = pql_fit(spec, data, s);
                break;
            }
            case Method::MQL_REML: fit = mql_fit(spec, data); break;
            case Method::LAPLACE_ML: fit = laplace_fit(spec, data, false); break;
            case Method::LAPLACE_REML: fit = laplace_fit(spec, data, true); break;
            case Method::MPL_ML: fit = ml_fit(spec, data, mpl, init->converged ? init : nullptr); break;
            case Method::MPL_REML: fit = mpl_fit(spec, data, mpl, init); break;
            case Method::DBC_ML: fit = dbc_solve(spec, data, false, dbc, init); break;
            case Method::DBC_REML: fit = dbc_solve(spec, data, true, dbc, init); break;
            case Method::IDEAL: {
                const auto start = CovParams::from_matrix(config.true_Sigma, spec.diag_only);
                fit = ideal_fit(spec, data, config.true_beta, mpl, &start);
                break;
            }
        }
        if (is_mpl_or_dbc(m) && fit.Sigma.size() && exceeds_variance(fit.Sigma, options.unstable_threshold))
            fit.unstable = true;
        seconds[m] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return done.emplace(m, std::move(fit)).first->second;
    };

    std::vector<EstimateRow> rows;
    for (Method m : options.methods) {
        const FitResult& fit = get(m);
        EstimateRow r;
        r.rep = rep;
        r.method = m;
        r.converged = fit.converged;
        r.unstable = fit.unstable;
        r.beta = fit.beta;
        r.Sigma = fit.Sigma;
        for (const auto& n : fit.notes) r.note += (r.note.empty() ? "" : "; ") + n;
        r.seconds = seconds[m];
        rows.push_back(std::move(r));
    }
    return rows;
}

StudyResult run_study(const ScenarioConfig& config, const StudyOptions& options) {
    if (options.methods.empty()) throw std::invalid_argument("no methods requested");
    if (options.reps < 1) throw std::invalid_argument("reps must be positive");
    std::vector<std::vector<EstimateRow>> per_rep(static_cast<std::size_t>(options.reps));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int rep = next++; rep < options.reps; rep = next++) {
            const Dataset data = simulate_dataset(config, options.seed, rep);
            per_rep[static_cast<std::size_t>(rep)] = fit_replication(config, data, rep, options);
        }
    };
    const int threads = std::max(1, std::min(options.threads, options.reps));
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    StudyResult out;
    for (auto& rows : per_rep)
        for (auto& r : rows) out.estimates.push_back(std::move(r));

    std::vector<EstimateRow> ideal;
    for (const auto& r : out.estimates)
        if (r.method == Method::IDEAL) ideal.push_back(r);
    out.summary = summarize(out.estimates, config.true_beta, config.true_Sigma, ideal.empty() ? nullptr : &ideal);
    out.summary.seed = options.seed;
    out.summary.reps = options.reps;
    return out;
}

std::vector<std::string> parameter_names(Eigen::Index p, Eigen::Index q) {
    std::vector<std::string> names;
    for (Eigen::Index k = 0; k < p; ++k) names.push_back("beta" + std::to_string(k));
    for (Eigen::Index i = 0; i < q; ++i)
        for (Eigen::Index j = 0; j <= i; ++j) names.push_back("Sigma" + std::to_string(i + 1) + std::to_string(j + 1));
    return names;
}

const SummaryRow& StudySummary::at(Method method, const std::string& parameter, const std::string& vs) const {
    for (const auto& r : rows)
        if (r.method == method && r.parameter == parameter && r.vs == vs) return r;
    throw std::out_of_range("no summary row for " + to_string(method) + "/" + parameter + "/" + vs);
}

StudySummary summarize(const std::vector<EstimateRow>& estimates, const VectorXd& true_beta,
                       const MatrixXd& true_Sigma, const std::vector<EstimateRow>* ideal) {
    const Eigen::Index p = true_beta.size();
    const Eigen::Index q = true_Sigma.rows();
    const auto names = parameter_names(p, q);
    EstimateRow truth_row;
    truth_row.beta = true_beta;
    truth_row.Sigma = true_Sigma;
    const VectorXd truth = flatten(truth_row, p, q);

    std::map<int, VectorXd> ideal_by_rep;
    if (ideal) {
        for (const auto& r : *ideal) {
            if (ideal_by_rep.count(r.rep)) throw AlignmentError("repeated ideal row for rep " + std::to_string(r.rep));
            ideal_by_rep[r.rep] = r.usable() ? flatten(r, p, q) : VectorXd();
        }
    }

    StudySummary s;
    std::vector<Method> order;
    std::map<Method, std::vector<VectorXd>> vs_truth, vs_ideal;
    std::set<std::pair<Method, int>> seen;
    for (const auto& r : estimates) {
        if (!seen.insert({r.method, r.rep}).second)
            throw AlignmentError("repeated estimate for " + to_string(r.method) + " rep " + std::to_string(r.rep));
        if (!s.failures.count(r.method)) {
            order.push_back(r.method);
            s.failures[r.method] = 0;
            s.unstable[r.method] = 0;
        }
        if (!r.converged) {
            ++s.failures[r.method];
            continue;
        }
        if (r.unstable) {
            ++s.unstable[r.method];
            continue;
        }
        const VectorXd v = flatten(r, p, q);
        vs_truth[r.method].push_back(v - truth);
        if (ideal && r.method != Method::IDEAL) {
            const auto it = ideal_by_rep.find(r.rep);
            if (it == ideal_by_rep.end())
                throw AlignmentError("no ideal estimate for rep " + std::to_string(r.rep));
            if (it->second.size()) vs_ideal[r.method].push_back(v - it->second);
        }
    }

    auto emit = [&](Method m, const std::vector<VectorXd>& diffs, const std::string& vs, Eigen::Index from) {
        for (Eigen::Index k = from; k < static_cast<Eigen::Index>(names.size()); ++k) {
            SummaryRow row;
            row.method = m;
            row.parameter = names[static_cast<std::size_t>(k)];
            row.vs = vs;
            row.n = static_cast<int>(diffs.size());
            double sum = 0.0, sq = 0.0;
            for (const auto& d : diffs) {
                sum += d(k);
                sq += d(k) * d(k);
            }
            const double nan = std::numeric_limits<double>::quiet_NaN();
            row.mean_bias = row.n ? sum / row.n : nan;
            double ss = 0.0;
            for (const auto& d : diffs) ss += (d(k) - row.mean_bias) * (d(k) - row.mean_bias);
            row.sd = row.n > 1 ? std::sqrt(ss / (row.n - 1)) : nan;
            row.rmse = row.n ? std::sqrt(sq / row.n) : nan;
            s.rows.push_back(row);
        }
    };
    for (Method m : order) {
        emit(m, vs_truth[m], "truth", 0);
        if (ideal && m != Method::IDEAL) emit(m, vs_ideal[m], "ideal", p);
    }
    return s;
}

void write_estimates_csv(std::ostream& out, const std::vector<EstimateRow>& rows, Eigen::Index p, Eigen::Index q) {
    out << "rep,method,converged,unstable";
    for (const auto& n : parameter_names(p, q)) out << ',' << n;
    out << '\n';
    for (const auto& r : rows) {
        out << r.rep << ',' << to_string(r.method) << ',' << int(r.converged) << ',' << int(r.unstable);
        const VectorXd v = flatten(r, p, q);
        for (Eigen::Index k = 0; k < v.size(); ++k) out << ',' << num(v(k));
        out << '\n';
    }
}

void write_timings_csv(std::ostream& out, const std::vector<EstimateRow>& rows) {
    out << "rep,method,seconds\n";
    for (const auto& r : rows) out << r.rep << ',' << to_string(r.method) << ',' << num(r.seconds) << '\n';
}

void write_summary_csv(std::ostream& out, const StudySummary& summary) {
    out << "method,parameter,vs,n,mean_bias,sd,rmse\n";
    for (const auto& r : summary.rows)
        out << to_string(r.method) << ',' << r.parameter << ',' << r.vs << ',' << r.n << ',' << num(r.mean_bias) << ','
            << num(r.sd) << ',' << num(r.rmse) << '\n';
}

void write_failures_csv(std::ostream& out, const std::vector<EstimateRow>& rows) {
    out << "rep,method,kind,message\n";
    for (const auto& r : rows) {
        if (r.usable()) continue;
        out << r.rep << ',' << to_string(r.method) << ',' << (r.converged ? "unstable" : "failed") << ','
            << csv_quote(r.note) << '\n';
    }
}

}  // namespace glmmreml
