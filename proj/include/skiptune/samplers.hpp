#pragma once

// Probability-flow ODE and stochastic samplers over the VE process, plus ODE
// inversion. All solvers see the model only through a BatchDenoiser, so
// analytic denoisers can be plugged in for verification.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "skiptune/schedule.hpp"
#include "skiptune/skip_tuning.hpp"
#include "skiptune/tensor.hpp"
#include "skiptune/unet.hpp"

namespace skiptune {

enum class Solver { euler, heun, unipc };

std::string to_string(Solver solver);
Solver parse_solver(const std::string& text);

// Piecewise-constant churn strength tau(sigma). Segments are half-open
// (low, high]; sigmas outside every segment get `fallback`.
struct ChurnSchedule {
    struct Segment {
        double low = 0.0, high = 0.0, tau = 0.0;
    };
    std::vector<Segment> segments;
    double fallback = 0.0;

    static ChurnSchedule constant(double tau);
    double tau(double sigma) const;
    bool is_zero() const;
    void validate() const;
};

struct SamplerConfig {
    Solver solver = Solver::heun;
    std::size_t steps = 18;
    int unipc_order = 2;
    ChurnSchedule churn;
    std::uint64_t seed = 0;
    bool record = false;  // keep every intermediate state

    void validate() const;
};

struct Trajectory {
    std::vector<double> sigmas;  // sigma at each recorded state, in integration order
    std::vector<Tensor> states;  // empty unless SamplerConfig::record
    Tensor final;
    std::size_t nfe = 0;
};

// (x, sigma) -> x0 estimate for the whole batch at one noise level.
using BatchDenoiser = std::function<Tensor(const Tensor& x, double sigma)>;

BatchDenoiser make_batch_denoiser(const MiniUNet& net, const SkipProfile* profile = nullptr,
                                  std::vector<int> labels = {});

// (x0_hat - x) / sigma^2
Tensor score_from_denoiser(const Tensor& x, double sigma, const Tensor& x0_hat);

// Standard normal noise of shape [count, item_shape...]; item i draws from a
// generator seeded by (seed, first_index + i), independent of batching.
Tensor item_noise(std::size_t count, const Shape& item_shape, std::uint64_t seed, std::size_t first_index = 0,
                  std::uint64_t stream = 0);

// Integrates dx/dsigma = (x - D(x, sigma)) / sigma from sigma_max to 0,
// starting at sigma_max * unit_noise. The final step is an Euler step to 0.
Trajectory sample_ode(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                      const Tensor& unit_noise);

// Euler–Maruyama on the churned SDE
//   x' = x + (1 + tau^2) (s' - s) d + tau sqrt(2 s (s - s')) z,  d = (x - D) / s,
// with the last step to 0 taken deterministically. tau == 0 reproduces the
// Euler ODE exactly. `first_index` offsets the per-item noise streams.
Trajectory sample_stochastic(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                             const Tensor& unit_noise, std::size_t first_index = 0);

// Integrates the same ODE upward from sigma_min (data treated as x(sigma_min))
// to sigma_max over the reversed grid and returns x(sigma_max) / sigma_max.
Trajectory invert(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                  const Tensor& data);

}  // namespace skiptune
