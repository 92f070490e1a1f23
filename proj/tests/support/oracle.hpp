#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

// Brute-force reference implementations that work on raw samples and share
// no code with the library.
namespace privsim::oracle {

inline double count_share(const std::vector<int>& xs, int value) {
    return static_cast<double>(std::count(xs.begin(), xs.end(), value)) / static_cast<double>(xs.size());
}

inline double tvd(const std::vector<int>& truth, const std::vector<int>& pred, int m) {
    double s = 0.0;
    for (int v = 1; v <= m; ++v) s += std::abs(count_share(truth, v) - count_share(pred, v));
    return s / 2.0;
}

/// Integrates |F^-1(u) - G^-1(u)| over u in [0, 1] piecewise between the
/// jump points of both empirical quantile functions.
inline double wasserstein(std::vector<int> a, std::vector<int> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const auto na = static_cast<std::int64_t>(a.size());
    const auto nb = static_cast<std::int64_t>(b.size());
    // Work in units of 1 / (na * nb) so breakpoints are exact integers.
    std::set<std::int64_t> cuts{0, na * nb};
    for (std::int64_t i = 1; i < na; ++i) cuts.insert(i * nb);
    for (std::int64_t j = 1; j < nb; ++j) cuts.insert(j * na);
    std::int64_t total = 0;
    std::int64_t prev = 0;
    for (auto it = std::next(cuts.begin()); it != cuts.end(); ++it) {
        const auto lo = prev;
        const std::int64_t ia = lo / nb;
        const std::int64_t ib = lo / na;
        total += (*it - lo) * std::abs(a[ia] - b[ib]);
        prev = *it;
    }
    return static_cast<double>(total) / static_cast<double>(na * nb);
}

inline double mee(const std::vector<int>& truth, const std::vector<int>& pred) {
    std::int64_t st = 0, sp = 0;
    for (int x : truth) st += x;
    for (int x : pred) sp += x;
    const double mu = static_cast<double>(st) / static_cast<double>(truth.size());
    const double mu_hat = static_cast<double>(sp) / static_cast<double>(pred.size());
    return 100.0 * std::abs(mu_hat - mu) / mu;
}

}  // namespace privsim::oracle
