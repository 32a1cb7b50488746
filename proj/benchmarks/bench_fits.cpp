#include <benchmark/benchmark.h>

#include "glmmreml/dbc.hpp"
#include "glmmreml/laplace.hpp"
#include "glmmreml/linearization.hpp"
#include "glmmreml/mpl.hpp"
#include "glmmreml/quadrature.hpp"
#include "glmmreml/simulation.hpp"

using namespace glmmreml;

namespace {

const Dataset& binary_data() {
    static const Dataset d = simulate_dataset(ScenarioConfig::make(FamilyKind::Bernoulli, 1), 1, 0);
    return d;
}

const GlmmSpec kBinary = ScenarioConfig::make(FamilyKind::Bernoulli, 1).spec();

CovParams half() { return CovParams::from_matrix(0.5 * MatrixXd::Identity(2, 2)); }

VectorXd beta0() { return ScenarioConfig::make(FamilyKind::Bernoulli, 1).true_beta; }

}  // namespace

static void BM_MarginalLoglik(benchmark::State& state) {
    QuadRule rule;
    rule.nodes_per_dim = static_cast<int>(state.range(0));
    const auto th = half();
    const VectorXd b = beta0();
    for (auto _ : state) benchmark::DoNotOptimize(total_marginal_loglik(kBinary, binary_data(), b, th, rule));
}
BENCHMARK(BM_MarginalLoglik)->Arg(5)->Arg(11)->Arg(25);

static void BM_LaplaceMl(benchmark::State& state) {
    const auto th = half();
    const VectorXd b = beta0();
    VectorXd g;
    for (auto _ : state) benchmark::DoNotOptimize(laplace_ml_objective(kBinary, binary_data(), b, th, &g));
}
BENCHMARK(BM_LaplaceMl);

static void BM_LaplaceReml(benchmark::State& state) {
    const auto th = half();
    VectorXd g;
    for (auto _ : state) benchmark::DoNotOptimize(laplace_reml_objective(kBinary, binary_data(), th, &g));
}
BENCHMARK(BM_LaplaceReml);

static void BM_PqlFit(benchmark::State& state) {
    PqlSettings s;
    s.reml = state.range(0) != 0;
    for (auto _ : state) benchmark::DoNotOptimize(pql_fit(kBinary, binary_data(), s));
}
BENCHMARK(BM_PqlFit)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_LaplaceFit(benchmark::State& state) {
    for (auto _ : state) benchmark::DoNotOptimize(laplace_fit(kBinary, binary_data(), state.range(0) != 0));
}
BENCHMARK(BM_LaplaceFit)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_MplFit(benchmark::State& state) {
    MplSettings s;
    s.rule.nodes_per_dim = 11;
    const auto ml = ml_fit(kBinary, binary_data(), s);
    for (auto _ : state) benchmark::DoNotOptimize(mpl_fit(kBinary, binary_data(), s, &ml));
}
BENCHMARK(BM_MplFit)->Unit(benchmark::kMillisecond);

static void BM_DbcIteration(benchmark::State& state) {
    DbcSettings s;
    s.outer_iters = 1;
    s.rule.nodes_per_dim = 11;
    const auto start = laplace_fit(kBinary, binary_data(), false);
    for (auto _ : state) benchmark::DoNotOptimize(dbc_solve(kBinary, binary_data(), true, s, &start));
}
BENCHMARK(BM_DbcIteration)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
