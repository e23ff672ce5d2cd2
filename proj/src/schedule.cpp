#include "skiptune/schedule.hpp"

#include <cmath>

#include "skiptune/errors.hpp"

namespace skiptune {

void NoiseSchedule::validate() const {
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min) || !std::isfinite(sigma_max))
        throw ConfigError("noise schedule needs 0 < sigma_min < sigma_max");
    if (!(karras_exponent > 0.0)) throw ConfigError("karras exponent must be positive");
}

std::vector<double> karras_grid(const NoiseSchedule& schedule, std::size_t n) {
    schedule.validate();
    if (n < 2) throw ConfigError("karras_grid needs at least 2 points");
    const double inv = 1.0 / schedule.karras_exponent;
    const double hi = std::pow(schedule.sigma_max, inv);
    const double lo = std::pow(schedule.sigma_min, inv);
    std::vector<double> grid(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double frac = static_cast<double>(i) / static_cast<double>(n - 1);
        grid[i] = std::pow(hi + frac * (lo - hi), schedule.karras_exponent);
    }
    grid.front() = schedule.sigma_max;
    grid.back() = schedule.sigma_min;
    return grid;
}

std::vector<double> sampling_sigmas(const NoiseSchedule& schedule, std::size_t steps) {
    if (steps < 1) throw ConfigError("sampler needs at least one step");
    auto grid = karras_grid(schedule, steps + 1);
    grid.back() = 0.0;
    return grid;
}

Tensor perturb(const Tensor& x0, double sigma, const Tensor& eps) {
    if (!(sigma >= 0.0)) throw DomainError("perturb: sigma must be non-negative");
    if (x0.shape() != eps.shape()) throw DimensionError("perturb: eps shape differs from x0");
    return ops::add(x0, ops::mul_scalar(eps, sigma));
}

Tensor perturb(const Tensor& x0, const std::vector<double>& sigmas, const Tensor& eps) {
    if (x0.shape() != eps.shape()) throw DimensionError("perturb: eps shape differs from x0");
    if (x0.rank() < 1 || sigmas.size() != x0.dim(0)) throw DimensionError("perturb: one sigma per item required");
    for (double s : sigmas)
        if (!(s >= 0.0)) throw DomainError("perturb: sigma must be non-negative");
    return ops::add(x0, ops::scale_rows(eps, Tensor::from({sigmas.size()}, sigmas)));
}

double sample_log_uniform_sigma(const NoiseSchedule& schedule, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(std::log(schedule.sigma_min), std::log(schedule.sigma_max));
    return std::exp(u(rng));
}

}  // namespace skiptune
