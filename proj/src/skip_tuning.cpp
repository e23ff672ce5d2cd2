#include "skiptune/skip_tuning.hpp"

#include <cmath>

#include "skiptune/errors.hpp"

namespace skiptune {

namespace {

void check_unit_interval(double v, const char* what) {
    if (!(v > 0.0 && v <= 1.0)) throw DomainError(std::string(what) + " must lie in (0, 1], got " + std::to_string(v));
}

}  // namespace

std::string to_string(ScalingMode mode) {
    switch (mode) {
        case ScalingMode::at_concat: return "at_concat";
        case ScalingMode::orig_only: return "orig_only";
        case ScalingMode::norm_input_only: return "norm_input_only";
    }
    return "?";
}

std::string to_string(TimeSchedule schedule) {
    switch (schedule) {
        case TimeSchedule::constant: return "constant";
        case TimeSchedule::increasing: return "increasing";
        case TimeSchedule::decreasing: return "decreasing";
    }
    return "?";
}

ScalingMode parse_scaling_mode(const std::string& text) {
    if (text == "at_concat") return ScalingMode::at_concat;
    if (text == "orig_only") return ScalingMode::orig_only;
    if (text == "norm_input_only") return ScalingMode::norm_input_only;
    throw ConfigError("unknown scaling mode '" + text + "'");
}

TimeSchedule parse_time_schedule(const std::string& text) {
    if (text == "constant") return TimeSchedule::constant;
    if (text == "increasing") return TimeSchedule::increasing;
    if (text == "decreasing") return TimeSchedule::decreasing;
    throw ConfigError("unknown time schedule '" + text + "'");
}

std::vector<double> rho_layers(double rho_bottom, double rho_top, std::size_t k, bool reach_top) {
    check_unit_interval(rho_bottom, "rho_bottom");
    check_unit_interval(rho_top, "rho_top");
    if (k < 1) throw ConfigError("rho_layers needs k >= 1");
    std::vector<double> rho(k, rho_bottom);
    if (reach_top && k == 1) return rho;
    const double delta = (rho_top - rho_bottom) / static_cast<double>(reach_top ? k - 1 : k);
    for (std::size_t i = 1; i < k; ++i) rho[i] = rho_bottom + delta * static_cast<double>(i);
    if (reach_top) rho.back() = rho_top;
    return rho;
}

double rho_time(TimeSchedule schedule, double rho0, double sigma, const NoiseSchedule& domain) {
    if (schedule == TimeSchedule::constant) return 1.0;
    check_unit_interval(rho0, "rho0");
    if (!domain.contains(sigma))
        throw DomainError("rho_time: sigma " + std::to_string(sigma) + " outside the schedule domain");
    const double frac = (sigma - domain.sigma_min) / (domain.sigma_max - domain.sigma_min);
    if (schedule == TimeSchedule::increasing) return rho0 + (1.0 - rho0) * frac;
    return 1.0 + (rho0 - 1.0) * frac;
}

std::vector<SigmaWindow> window_partition(const NoiseSchedule& schedule, std::size_t n_windows,
                                          std::size_t steps_per_window) {
    if (n_windows < 1 || steps_per_window < 1) throw ConfigError("window partition needs windows and steps >= 1");
    const auto grid = karras_grid(schedule, n_windows * steps_per_window + 1);
    std::vector<SigmaWindow> windows(n_windows);
    for (std::size_t w = 0; w < n_windows; ++w) {
        windows[w].high = grid[w * steps_per_window];
        windows[w].low = grid[(w + 1) * steps_per_window];
    }
    windows.back().closed_low = true;
    return windows;
}

SkipProfile SkipProfile::identity(std::size_t k) {
    SkipProfile p;
    p.k = k;
    return p;
}

SkipProfile SkipProfile::constant(double rho, std::size_t k, ScalingMode mode) {
    SkipProfile p;
    p.rho_bottom = rho;
    p.rho_top = rho;
    p.k = k;
    p.mode = mode;
    return p;
}

void SkipProfile::validate() const {
    check_unit_interval(rho_bottom, "rho_bottom");
    check_unit_interval(rho_top, "rho_top");
    if (schedule != TimeSchedule::constant) check_unit_interval(rho0, "rho0");
    if (k < 1) throw ConfigError("skip profile needs k >= 1");
    domain.validate();
}

bool SkipProfile::active_at(double sigma) const {
    if (!windows) return true;
    for (const auto& w : *windows)
        if (w.contains(sigma)) return true;
    return false;
}

double SkipProfile::evaluate(std::size_t layer, double sigma) const {
    if (layer >= k) throw DimensionError("skip profile: layer index out of range");
    return coefficients(sigma)[layer];
}

std::vector<double> SkipProfile::coefficients(double sigma) const {
    if (!active_at(sigma)) return std::vector<double>(k, 1.0);
    auto rho = rho_layers(rho_bottom, rho_top, k, reach_top);
    const double t = rho_time(schedule, rho0, sigma, domain);
    if (schedule != TimeSchedule::constant)
        for (double& r : rho) r *= t;
    return rho;
}

}  // namespace skiptune
