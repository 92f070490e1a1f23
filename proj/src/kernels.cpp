#include "privsim/kernels.hpp"

#include <random>

#include "privsim/random.hpp"

namespace privsim::kernels {

namespace {

double resample_mean(std::span<const double> values, std::uint64_t seed, int b) {
    std::mt19937_64 rng(derive_seed(seed, "resample", static_cast<std::uint64_t>(b)));
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    double sum = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) sum += values[pick(rng)];
    return sum / static_cast<double>(values.size());
}

}  // namespace

std::vector<double> bootstrap_means_serial(std::span<const double> values, int n_resamples, std::uint64_t seed) {
    std::vector<double> out(static_cast<std::size_t>(n_resamples));
    if (values.empty()) return out;
    for (int b = 0; b < n_resamples; ++b) out[b] = resample_mean(values, seed, b);
    return out;
}

std::vector<double> bootstrap_means_omp(std::span<const double> values, int n_resamples, std::uint64_t seed) {
    std::vector<double> out(static_cast<std::size_t>(n_resamples));
    if (values.empty()) return out;
#pragma omp parallel for schedule(static)
    for (int b = 0; b < n_resamples; ++b) out[b] = resample_mean(values, seed, b);
    return out;
}

std::vector<QuestionMetrics> question_metrics_serial(std::span<const QuestionSample> samples) {
    std::vector<QuestionMetrics> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) out[i] = question_metrics(samples[i]);
    return out;
}

std::vector<QuestionMetrics> question_metrics_omp(std::span<const QuestionSample> samples) {
    std::vector<QuestionMetrics> out(samples.size());
    const auto n = static_cast<std::ptrdiff_t>(samples.size());
#pragma omp parallel for schedule(dynamic, 8)
    for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = question_metrics(samples[i]);
    return out;
}

}  // namespace privsim::kernels
