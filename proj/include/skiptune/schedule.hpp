#pragma once

// VE noise process (sigma(t) = t, alpha = 1) and the Karras discretization.

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "skiptune/tensor.hpp"

namespace skiptune {

struct NoiseSchedule {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double karras_exponent = 7.0;

    void validate() const;
    bool contains(double sigma) const { return sigma >= sigma_min && sigma <= sigma_max; }
};

// sigma_i = (smax^(1/k) + i/(n-1) * (smin^(1/k) - smax^(1/k)))^k, i = 0..n-1.
// Endpoints are exact.
std::vector<double> karras_grid(const NoiseSchedule& schedule, std::size_t n);

// Sigma sequence for an n-step sampler: karras_grid(n + 1) with the final
// entry replaced by 0. Length n + 1.
std::vector<double> sampling_sigmas(const NoiseSchedule& schedule, std::size_t steps);

// x0 + sigma * eps, one sigma for the whole batch or one per item.
Tensor perturb(const Tensor& x0, double sigma, const Tensor& eps);
Tensor perturb(const Tensor& x0, const std::vector<double>& sigmas, const Tensor& eps);

// Log-uniform draw over [sigma_min, sigma_max].
double sample_log_uniform_sigma(const NoiseSchedule& schedule, std::mt19937_64& rng);

}  // namespace skiptune
