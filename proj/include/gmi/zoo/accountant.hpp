#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "gmi/core/error.hpp"

namespace gmi::zoo {

// Renyi/moments accountant for the subsampled Gaussian mechanism.
// Integer-order closed form:
//   A(alpha) = sum_k C(alpha,k) q^k (1-q)^(alpha-k) exp(k(k-1)/(2 sigma^2))
//   RDP(alpha) = log A / (alpha - 1), composed over steps, converted with
//   eps = T*RDP(alpha) + log(1/delta)/(alpha - 1), minimized over orders.
// Orders run 2..64 densely plus a sparse tail to 2048: small-noise settings
// optimize at small orders, sigma ~ 28 needs orders near 250.

inline const std::vector<int>& accountant_orders() {
    static const std::vector<int> orders = [] {
        std::vector<int> o;
        for (int a = 2; a <= 64; ++a) o.push_back(a);
        for (int a : {72, 80, 96, 112, 128, 160, 192, 224, 256, 320, 384, 448, 512, 640, 768, 896,
                      1024, 1280, 1536, 1792, 2048})
            o.push_back(a);
        return o;
    }();
    return orders;
}

namespace detail {

inline double log_binom(int n, int k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// log A(alpha) for one subsampled Gaussian step.
inline double log_a_int(double q, double sigma, int alpha) {
    if (q >= 1.0) return double(alpha) * (alpha - 1.0) / (2.0 * sigma * sigma);
    double lq = std::log(q), l1q = std::log1p(-q);
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(std::size_t(alpha) + 1);
    for (int k = 0; k <= alpha; ++k) {
        double t = log_binom(alpha, k) + k * lq + (alpha - k) * l1q +
                   double(k) * (k - 1.0) / (2.0 * sigma * sigma);
        terms[std::size_t(k)] = t;
        best = std::max(best, t);
    }
    double acc = 0;
    for (double t : terms) acc += std::exp(t - best);
    return best + std::log(acc);
}

}  // namespace detail

struct EpsilonResult {
    double epsilon = std::numeric_limits<double>::infinity();
    int order = 0;
};

inline EpsilonResult compute_epsilon_detail(double noise_ratio, double sampling_rate,
                                            std::size_t steps, double delta) {
    GMI_CHECK_PARAM(delta > 0 && delta < 1, "delta must lie in (0,1)");
    GMI_CHECK_PARAM(sampling_rate > 0 && sampling_rate <= 1, "sampling rate must lie in (0,1]");
    GMI_CHECK_PARAM(steps >= 1, "steps must be >= 1");
    GMI_CHECK_PARAM(noise_ratio >= 0, "noise ratio must be nonnegative");
    EpsilonResult out;
    if (noise_ratio == 0) return out;  // infinity sentinel
    double log_inv_delta = std::log(1.0 / delta);
    for (int alpha : accountant_orders()) {
        double rdp = detail::log_a_int(sampling_rate, noise_ratio, alpha) / (alpha - 1.0);
        double eps = double(steps) * rdp + log_inv_delta / (alpha - 1.0);
        if (eps < out.epsilon) {
            out.epsilon = eps;
            out.order = alpha;
        }
    }
    return out;
}

inline double compute_epsilon(double noise_ratio, double sampling_rate, std::size_t steps,
                              double delta) {
    return compute_epsilon_detail(noise_ratio, sampling_rate, steps, delta).epsilon;
}

}  // namespace gmi::zoo
