#pragma once

// Training objectives and the training loop for the denoiser.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "skiptune/dataset.hpp"
#include "skiptune/schedule.hpp"
#include "skiptune/skip_tuning.hpp"
#include "skiptune/tensor.hpp"
#include "skiptune/unet.hpp"

namespace skiptune {

enum class Weighting { uniform, edm };

Weighting parse_weighting(const std::string& text);
std::string to_string(Weighting weighting);

// Maps a [B, ...] image batch to [B, F] (or any [B, ...]) features.
using FeatureExtractor = std::function<Tensor(const Tensor&)>;

// (x_t, per-item sigma, labels) -> x0 estimate.
using DenoiseFn = std::function<Tensor(const Tensor& x_t, std::span<const double> sigmas, std::span<const int> labels)>;

DenoiseFn unet_denoiser(const MiniUNet& net, const SkipProfile* profile = nullptr);
// Per-call skip coefficients shared by the whole batch, given as a [k] tensor
// that may carry a gradient.
DenoiseFn unet_denoiser(const MiniUNet& net, const Tensor& coefficients, ScalingMode mode);

struct LossConfig {
    Weighting weighting = Weighting::edm;
    double sigma_data = 0.5;
    FeatureExtractor feature_extractor;  // needed by feature and hybrid losses
    double hybrid_feature_weight = 1.0;
};

double loss_weight(const LossConfig& cfg, double sigma);

// Everything random about one loss evaluation, so different losses can be
// compared on identical draws.
struct LossBatch {
    Tensor x0;
    std::vector<double> sigmas;
    Tensor eps;
    std::vector<int> labels;  // empty for unconditional denoisers

    Tensor noisy() const;
};

// sigma per item log-uniform over the schedule, eps standard normal.
LossBatch make_loss_batch(const Tensor& x0, std::vector<int> labels, const NoiseSchedule& schedule,
                          std::mt19937_64& rng);
// Same, with one fixed sigma.
LossBatch make_loss_batch(const Tensor& x0, std::vector<int> labels, double sigma, std::mt19937_64& rng);

// mean_b w(sigma_b) * || D(x_t)_b - x0_b ||^2
Tensor loss_pixel(const DenoiseFn& denoiser, const LossBatch& batch, const LossConfig& cfg);
// mean_b w(sigma_b) * || f(D(x_t))_b - f(x0)_b ||^2
Tensor loss_feature(const DenoiseFn& denoiser, const LossBatch& batch, const LossConfig& cfg);
// loss_pixel + hybrid_feature_weight * loss_feature
Tensor loss_hybrid(const DenoiseFn& denoiser, const LossBatch& batch, const LossConfig& cfg);

enum class BandReduction { sum, mean };

struct WaveletBands {
    double ll = 0.0, lh = 0.0, hl = 0.0, hh = 0.0;
    double total() const { return ll + lh + hl + hh; }
};

// Single-level orthonormal Haar transform of each channel, per 2x2 block
// [[a, b], [c, d]]: LL = (a+b+c+d)/2, LH = (a+b-c-d)/2, HL = (a-b+c-d)/2,
// HH = (a-b-c+d)/2. Returns [B, C, 4, H/2, W/2] with bands in that order.
Tensor haar2d(const Tensor& x);

// Weighted per-band squared residuals of D(x_t) - x0. With sum reduction the
// four bands add up to loss_pixel.
WaveletBands loss_wavelet_bands(const DenoiseFn& denoiser, const LossBatch& batch, const LossConfig& cfg,
                                BandReduction reduction = BandReduction::sum);

struct TrainConfig {
    std::size_t steps = 5000;
    std::size_t batch_size = 32;
    double lr = 2e-3;
    std::size_t warmup_steps = 100;
    std::uint64_t seed = 0;
    LossConfig loss;
    NoiseSchedule schedule;
    bool class_conditional = false;
};

struct TrainReport {
    std::vector<double> losses;
    double heldout_initial = 0.0;
    double heldout_final = 0.0;
    double heldout_constant_baseline = 0.0;  // best constant image (training mean)
};

// Resumable optimization of all network parameters: run() may be called
// repeatedly and continues the same optimizer state, data order and RNG.
// `data` must outlive the trainer.
class Trainer {
public:
    Trainer(MiniUNet& net, const Dataset& data, const TrainConfig& cfg);
    ~Trainer();
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    void run(std::size_t steps, std::vector<double>* losses = nullptr);
    std::size_t steps_done() const;
    std::size_t samples_seen() const;

private:
    struct State;
    std::unique_ptr<State> state_;
};

// Optimizes all network parameters on the pixel loss (hybrid when a feature
// extractor and non-zero weight are configured). `heldout` may be empty.
TrainReport train(MiniUNet& net, const Dataset& data, const Dataset& heldout, const TrainConfig& cfg);

// Held-out pixel loss on a fixed draw (seeded), used before/after training.
double heldout_loss(const DenoiseFn& denoiser, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed);

}  // namespace skiptune
