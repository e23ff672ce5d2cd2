#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "skiptune/schedule.hpp"

namespace skiptune {

// Where the skip coefficient enters a decoder block that consumes
// concat(skip, up). Concatenation order is always [skip channels, up channels].
enum class ScalingMode {
    at_concat,        // scale the skip half of the concatenated tensor
    orig_only,        // scale only the residual branch input; norm sees it unscaled
    norm_input_only,  // scale only what the first GroupNorm sees
};

enum class TimeSchedule { constant, increasing, decreasing };

std::string to_string(ScalingMode mode);
std::string to_string(TimeSchedule schedule);
ScalingMode parse_scaling_mode(const std::string& text);
TimeSchedule parse_time_schedule(const std::string& text);

struct SigmaWindow {
    double low = 0.0;
    double high = 0.0;
    bool closed_low = false;  // (low, high] unless this is the bottom window

    bool contains(double sigma) const {
        return sigma <= high && (closed_low ? sigma >= low : sigma > low);
    }
};

// rho_i = bottom + i * delta, i = 0..k-1, bottom to top. delta is
// (top - bottom) / k by default, or / (k - 1) with reach_top so the last tap
// gets exactly `top`.
std::vector<double> rho_layers(double rho_bottom, double rho_top, std::size_t k, bool reach_top = false);

// Multiplier linear in sigma over [sigma_min, sigma_max]. increasing goes from
// rho0 at sigma_min to 1 at sigma_max; decreasing from 1 to rho0.
double rho_time(TimeSchedule schedule, double rho0, double sigma, const NoiseSchedule& domain);

// Consecutive windows whose boundaries come from the (n_windows *
// steps_per_window)-step sampling grid; window 0 is the top (high sigma) one.
std::vector<SigmaWindow> window_partition(const NoiseSchedule& schedule, std::size_t n_windows = 13,
                                          std::size_t steps_per_window = 4);

struct SkipProfile {
    double rho_bottom = 1.0;
    double rho_top = 1.0;
    std::size_t k = 6;
    bool reach_top = false;
    TimeSchedule schedule = TimeSchedule::constant;
    double rho0 = 1.0;
    // nullopt: active at every sigma. Otherwise active only inside one of the
    // listed windows (an empty list disables tuning everywhere).
    std::optional<std::vector<SigmaWindow>> windows;
    ScalingMode mode = ScalingMode::at_concat;
    NoiseSchedule domain;

    static SkipProfile identity(std::size_t k);
    static SkipProfile constant(double rho, std::size_t k, ScalingMode mode = ScalingMode::at_concat);

    void validate() const;
    bool active_at(double sigma) const;
    double evaluate(std::size_t layer, double sigma) const;
    std::vector<double> coefficients(double sigma) const;
};

}  // namespace skiptune
