// Serial reference vs OpenMP kernels.

#include <benchmark/benchmark.h>

#include <random>

#include "privsim/kernels.hpp"

namespace {

std::vector<double> units(std::size_t n) {
    std::mt19937_64 rng(1);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> v(n);
    for (auto& x : v) x = coin(rng);
    return v;
}

std::vector<privsim::QuestionSample> samples(int n) {
    std::mt19937_64 rng(2);
    std::vector<privsim::QuestionSample> out;
    for (int i = 0; i < n; ++i) {
        privsim::QuestionSample s{"q" + std::to_string(i), 5, {}, {}};
        std::uniform_int_distribution<int> v(1, 5);
        for (int k = 0; k < 500; ++k) s.truth.push_back(v(rng));
        for (int k = 0; k < 500; ++k) s.pred.push_back(v(rng));
        out.push_back(std::move(s));
    }
    return out;
}

void BM_BootstrapSerial(benchmark::State& st) {
    const auto v = units(static_cast<std::size_t>(st.range(0)));
    for (auto _ : st) benchmark::DoNotOptimize(privsim::kernels::bootstrap_means_serial(v, 1000, 7));
}

void BM_BootstrapOmp(benchmark::State& st) {
    const auto v = units(static_cast<std::size_t>(st.range(0)));
    for (auto _ : st) benchmark::DoNotOptimize(privsim::kernels::bootstrap_means_omp(v, 1000, 7));
}

void BM_QuestionMetricsSerial(benchmark::State& st) {
    const auto s = samples(static_cast<int>(st.range(0)));
    for (auto _ : st) benchmark::DoNotOptimize(privsim::kernels::question_metrics_serial(s));
}

void BM_QuestionMetricsOmp(benchmark::State& st) {
    const auto s = samples(static_cast<int>(st.range(0)));
    for (auto _ : st) benchmark::DoNotOptimize(privsim::kernels::question_metrics_omp(s));
}

}  // namespace

BENCHMARK(BM_BootstrapSerial)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BootstrapOmp)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_QuestionMetricsSerial)->Arg(50)->Arg(500)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_QuestionMetricsOmp)->Arg(50)->Arg(500)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
