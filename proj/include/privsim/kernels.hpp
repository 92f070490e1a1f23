#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "privsim/metrics.hpp"

// Hot loops of the metrics engine. Each has a serial reference and an
// OpenMP version that returns bit-identical results.
namespace privsim::kernels {

/// Means of `n_resamples` bootstrap resamples. Resample b draws from its own
/// stream derive_seed(seed, "resample", b).
std::vector<double> bootstrap_means_serial(std::span<const double> values, int n_resamples, std::uint64_t seed);
std::vector<double> bootstrap_means_omp(std::span<const double> values, int n_resamples, std::uint64_t seed);

std::vector<QuestionMetrics> question_metrics_serial(std::span<const QuestionSample> samples);
std::vector<QuestionMetrics> question_metrics_omp(std::span<const QuestionSample> samples);

}  // namespace privsim::kernels
