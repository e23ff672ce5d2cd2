#include "skiptune/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "skiptune/errors.hpp"
#include "skiptune/optim.hpp"

namespace skiptune {

namespace {

Tensor weights_tensor(const LossConfig& cfg, const std::vector<double>& sigmas) {
    std::vector<double> w(sigmas.size());
    for (std::size_t b = 0; b < sigmas.size(); ++b) w[b] = loss_weight(cfg, sigmas[b]);
    const std::size_t n = w.size();
    return Tensor::from({n}, std::move(w));
}

void check_batch(const LossBatch& batch) {
    if (!batch.x0.defined() || batch.x0.rank() < 1 || batch.x0.dim(0) == 0) throw ConfigError("loss batch is empty");
    if (batch.sigmas.size() != batch.x0.dim(0)) throw DimensionError("loss batch: one sigma per item required");
}

Tensor weighted_mean_sq(const Tensor& residual, const std::vector<double>& sigmas, const LossConfig& cfg) {
    Tensor per_item = ops::sum_per_item(ops::square(residual));
    return ops::mean(ops::mul(per_item, weights_tensor(cfg, sigmas)));
}

}  // namespace

Weighting parse_weighting(const std::string& text) {
    if (text == "uniform") return Weighting::uniform;
    if (text == "edm") return Weighting::edm;
    throw ConfigError("unknown loss weighting '" + text + "'");
}

std::string to_string(Weighting weighting) { return weighting == Weighting::edm ? "edm" : "uniform"; }

DenoiseFn unet_denoiser(const MiniUNet& net, const SkipProfile* profile) {
    return [&net, profile](const Tensor& x, std::span<const double> sigmas, std::span<const int> labels) {
        return net.forward(x, sigmas, profile, false, labels).denoised;
    };
}

DenoiseFn unet_denoiser(const MiniUNet& net, const Tensor& coefficients, ScalingMode mode) {
    return [&net, coefficients, mode](const Tensor& x, std::span<const double> sigmas, std::span<const int> labels) {
        const Tensor rows = ops::broadcast_rows(coefficients, x.dim(0));
        return net.forward(x, sigmas, rows, mode, false, labels).denoised;
    };
}

double loss_weight(const LossConfig& cfg, double sigma) {
    if (cfg.weighting == Weighting::uniform) return 1.0;
    const double sd = cfg.sigma_data;
    return (sigma * sigma + sd * sd) / ((sigma * sd) * (sigma * sd));
}

Tensor LossBatch::noisy() const { return perturb(x0, sigmas, eps); }

LossBatch make_loss_batch(const Tensor& x0, std::vector<int> labels, const NoiseSchedule& schedule,
                          std::mt19937_64& rng) {
    LossBatch b;
    b.x0 = x0;
    b.labels = std::move(labels);
    b.sigmas.resize(x0.dim(0));
    for (double& s : b.sigmas) s = sample_log_uniform_sigma(schedule, rng);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> eps(x0.numel());
    for (double& e : eps) e = n(rng);
    b.eps = Tensor::from(x0.shape(), std::move(eps));
    return b;
}

LossBatch make_loss_batch(const Tensor& x0, std::vector<int> labels, double sigma, std::mt19937_64& rng) {
    LossBatch b;
    b.x0 = x0;
    b.labels = std::move(labels);
    b.sigmas.assign(x0.dim(0), sigma);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> eps(x0.numel());
    for (double& e : eps) e = n(rng);
    b.eps = Tensor::from(x0.shape(), std::move(eps));
    return b;
}

Tensor loss_pixel(const DenoiseFn& denoiser, const LossBatch& batch, const LossConfig& cfg) {
    check_batch(batch);
    const Tensor pred = denoiser(batch.noisy(), batch.sigmas, batch.labels);
    return weighted_mean_sq(ops::sub(pred, batch.x0), batch.sigmas, cfg);
}

Tensor loss_feature(const DenoiseFn& denoiser, const LossBatch& batch, const LossConfig& cfg) {
    check_batch(batch);
    if (!cfg.feature_extractor) throw ConfigError("feature loss needs a feature extractor");
    const Tensor pred = denoiser(batch.noisy(), batch.sigmas, batch.labels);
    Tensor target;
    {
        NoGradGuard ng;
        target = cfg.feature_extractor(batch.x0);
    }
    return weighted_mean_sq(ops::sub(cfg.feature_extractor(pred), target), batch.sigmas, cfg);
}

Tensor loss_hybrid(const DenoiseFn& denoiser, const LossBatch& batch, const LossConfig& cfg) {
    check_batch(batch);
    const Tensor pred = denoiser(batch.noisy(), batch.sigmas, batch.labels);
    Tensor pixel = weighted_mean_sq(ops::sub(pred, batch.x0), batch.sigmas, cfg);
    if (cfg.hybrid_feature_weight == 0.0) return pixel;
    if (!cfg.feature_extractor) throw ConfigError("hybrid loss needs a feature extractor");
    Tensor target;
    {
        NoGradGuard ng;
        target = cfg.feature_extractor(batch.x0);
    }
    Tensor feature = weighted_mean_sq(ops::sub(cfg.feature_extractor(pred), target), batch.sigmas, cfg);
    return ops::add(pixel, ops::mul_scalar(feature, cfg.hybrid_feature_weight));
}

Tensor haar2d(const Tensor& x) {
    if (x.rank() != 4) throw DimensionError("haar2d: expected [B, C, H, W]");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 || w % 2) throw ConfigError("haar2d: spatial dims must be even, got " + shape_str(x.shape()));
    const std::size_t oh = h / 2, ow = w / 2, band = oh * ow;
    std::vector<double> out(planes * 4 * band);
    auto v = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const double* s = v.data() + p * h * w + 2 * y * w + 2 * xx;
                const double a = s[0], b = s[1], c = s[w], d = s[w + 1];
                double* o = out.data() + p * 4 * band + y * ow + xx;
                o[0] = 0.5 * (a + b + c + d);
                o[band] = 0.5 * (a + b - c - d);
                o[2 * band] = 0.5 * (a - b + c - d);
                o[3 * band] = 0.5 * (a - b - c + d);
            }
    return Tensor::from({x.dim(0), x.dim(1), 4, oh, ow}, std::move(out));
}

WaveletBands loss_wavelet_bands(const DenoiseFn& denoiser, const LossBatch& batch, const LossConfig& cfg,
                                BandReduction reduction) {
    check_batch(batch);
    if (batch.x0.rank() != 4 || batch.x0.dim(2) % 2 || batch.x0.dim(3) % 2)
        throw ConfigError("wavelet losses need [B, C, H, W] with even spatial dims");
    Tensor residual;
    {
        NoGradGuard ng;
        residual = ops::sub(denoiser(batch.noisy(), batch.sigmas, batch.labels), batch.x0);
    }
    const Tensor coeffs = haar2d(residual);
    const std::size_t batch_size = batch.x0.dim(0), channels = batch.x0.dim(1);
    const std::size_t band = coeffs.dim(3) * coeffs.dim(4);
    const double norm = reduction == BandReduction::mean ? static_cast<double>(channels * band) : 1.0;
    double acc[4] = {0, 0, 0, 0};
    auto cv = coeffs.data();
    for (std::size_t b = 0; b < batch_size; ++b) {
        const double w = loss_weight(cfg, batch.sigmas[b]);
        for (std::size_t k = 0; k < 4; ++k) {
            double s = 0.0;
            for (std::size_t c = 0; c < channels; ++c) {
                const double* p = cv.data() + ((b * channels + c) * 4 + k) * band;
                for (std::size_t i = 0; i < band; ++i) s += p[i] * p[i];
            }
            acc[k] += w * s / norm;
        }
    }
    const double n = static_cast<double>(batch_size);
    return {acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n};
}

double heldout_loss(const DenoiseFn& denoiser, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed) {
    if (data.size() == 0) return 0.0;
    NoGradGuard ng;
    std::mt19937_64 rng(seed);
    const auto batch = make_loss_batch(data.images, cfg.class_conditional ? data.labels : std::vector<int>{},
                                       cfg.schedule, rng);
    return loss_pixel(denoiser, batch, cfg.loss).item();
}

struct Trainer::State {
    MiniUNet& net;
    const Dataset& data;
    TrainConfig cfg;
    DenoiseFn model;
    Adam opt;
    std::mt19937_64 rng;
    std::vector<std::size_t> order;
    std::size_t cursor;
    std::size_t step = 0;

    static std::vector<Tensor> params_of(MiniUNet& net) {
        std::vector<Tensor> params;
        for (auto& p : net.parameters()) params.push_back(p.value);
        return params;
    }

    State(MiniUNet& n, const Dataset& d, const TrainConfig& c)
        : net(n), data(d), cfg(c), model(unet_denoiser(n)), opt(params_of(n), AdamConfig{c.lr}), rng(c.seed),
          order(d.size()), cursor(d.size()) {
        std::iota(order.begin(), order.end(), 0);
    }
};

Trainer::Trainer(MiniUNet& net, const Dataset& data, const TrainConfig& cfg) {
    if (data.size() == 0) throw ConfigError("training dataset is empty");
    if (cfg.batch_size == 0) throw ConfigError("training batch size must be positive");
    if (cfg.class_conditional && !data.labelled()) throw ConfigError("class-conditional training needs labels");
    state_ = std::make_unique<State>(net, data, cfg);
}

Trainer::~Trainer() = default;

std::size_t Trainer::steps_done() const { return state_->step; }

std::size_t Trainer::samples_seen() const {
    return state_->step * std::min(state_->cfg.batch_size, state_->data.size());
}

void Trainer::run(std::size_t steps, std::vector<double>* losses) {
    State& st = *state_;
    const TrainConfig& cfg = st.cfg;
    const bool hybrid = cfg.loss.feature_extractor && cfg.loss.hybrid_feature_weight != 0.0;
    st.net.set_requires_grad(true);
    try {
        for (std::size_t i = 0; i < steps; ++i, ++st.step) {
            std::vector<std::size_t> idx;
            for (std::size_t j = 0; j < std::min(cfg.batch_size, st.data.size()); ++j) {
                if (st.cursor == st.order.size()) {
                    std::shuffle(st.order.begin(), st.order.end(), st.rng);
                    st.cursor = 0;
                }
                idx.push_back(st.order[st.cursor++]);
            }
            auto batch = make_loss_batch(st.data.gather(idx),
                                         cfg.class_conditional ? st.data.gather_labels(idx) : std::vector<int>{},
                                         cfg.schedule, st.rng);
            st.opt.zero_grad();
            Tensor loss = hybrid ? loss_hybrid(st.model, batch, cfg.loss) : loss_pixel(st.model, batch, cfg.loss);
            const double value = loss.item();
            if (!std::isfinite(value)) throw NumericError("training diverged at step " + std::to_string(st.step));
            if (losses) losses->push_back(value);
            backward(loss);
            const double warm =
                cfg.warmup_steps ? std::min(1.0, static_cast<double>(st.step + 1) / cfg.warmup_steps) : 1.0;
            st.opt.step(warm);
        }
    } catch (...) {
        st.net.set_requires_grad(false);
        throw;
    }
    st.net.set_requires_grad(false);
    for (auto& p : st.net.parameters()) p.value.zero_grad();
}

TrainReport train(MiniUNet& net, const Dataset& data, const Dataset& heldout, const TrainConfig& cfg) {
    Trainer trainer(net, data, cfg);
    TrainReport report;
    const std::uint64_t eval_seed = cfg.seed ^ 0xe7a1ULL;
    const auto model = unet_denoiser(net);

    // Best constant predictor: the training mean image.
    const std::size_t item = data.images.numel() / data.size();
    std::vector<double> mean_img(item, 0.0);
    for (std::size_t b = 0; b < data.size(); ++b)
        for (std::size_t i = 0; i < item; ++i) mean_img[i] += data.images.data()[b * item + i];
    for (double& v : mean_img) v /= static_cast<double>(data.size());
    const DenoiseFn constant = [&mean_img, item](const Tensor& x, std::span<const double>, std::span<const int>) {
        std::vector<double> out(x.numel());
        for (std::size_t b = 0; b < x.dim(0); ++b) std::copy(mean_img.begin(), mean_img.end(), out.begin() + b * item);
        return Tensor::from(x.shape(), std::move(out));
    };
    report.heldout_initial = heldout_loss(model, heldout, cfg, eval_seed);
    report.heldout_constant_baseline = heldout_loss(constant, heldout, cfg, eval_seed);
    trainer.run(cfg.steps, &report.losses);
    report.heldout_final = heldout_loss(model, heldout, cfg, eval_seed);
    return report;
}

}  // namespace skiptune
