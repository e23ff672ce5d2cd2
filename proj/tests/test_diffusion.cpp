#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "skiptune/classifier.hpp"
#include "skiptune/diffusion.hpp"
#include "skiptune/errors.hpp"
#include "toy_config.hpp"

using namespace skiptune;

namespace {

DenoiseFn oracle_denoiser(const Tensor& x0) {
    return [x0](const Tensor&, std::span<const double>, std::span<const int>) { return x0; };
}

DenoiseFn zero_denoiser() {
    return [](const Tensor& x, std::span<const double>, std::span<const int>) { return Tensor::zeros(x.shape()); };
}

// Posterior mean for unit-variance Gaussian data, all items at one sigma.
DenoiseFn unit_gaussian_denoiser() {
    return [](const Tensor& x, std::span<const double> sigmas, std::span<const int>) {
        return ops::mul_scalar(x, 1.0 / (1.0 + sigmas[0] * sigmas[0]));
    };
}

LossConfig uniform_loss() {
    LossConfig cfg;
    cfg.weighting = Weighting::uniform;
    return cfg;
}

FeatureExtractor identity_features() {
    return [](const Tensor& x) { return x; };
}

}  // namespace

TEST_CASE("loss weights") {
    LossConfig cfg;
    CHECK(loss_weight(cfg, 1.0) == doctest::Approx((1.0 + 0.25) / 0.25));
    CHECK(loss_weight(uniform_loss(), 3.0) == 1.0);
    CHECK(parse_weighting(to_string(Weighting::edm)) == Weighting::edm);
    CHECK_THROWS_AS(parse_weighting("snr"), ConfigError);
}

TEST_CASE("pixel loss closed cases") {
    std::mt19937_64 rng(1);
    auto x0 = testutil::randn({6, 1, 4, 4}, rng);
    auto batch = make_loss_batch(x0, {}, 0.8, rng);
    CHECK(loss_pixel(oracle_denoiser(x0), batch, uniform_loss()).item() == 0.0);

    double mean_sq = 0.0;
    for (double v : x0.data()) mean_sq += v * v;
    mean_sq /= 6.0;
    CHECK(loss_pixel(zero_denoiser(), batch, uniform_loss()).item() == doctest::Approx(mean_sq).epsilon(1e-14));

    LossBatch empty;
    CHECK_THROWS_AS(loss_pixel(zero_denoiser(), empty, uniform_loss()), ConfigError);
}

TEST_CASE("pixel loss matches the Gaussian posterior variance") {
    constexpr std::size_t n = 4000, d = 2;
    std::mt19937_64 rng(7);
    for (double sigma : {0.3, 1.0, 2.5}) {
        auto x0 = testutil::randn({n, d}, rng);
        auto batch = make_loss_batch(x0, {}, sigma, rng);
        const double got = loss_pixel(unit_gaussian_denoiser(), batch, uniform_loss()).item();
        const double v = sigma * sigma / (1.0 + sigma * sigma);
        // Each item's loss is v times a chi-square with d degrees of freedom.
        const double se = v * std::sqrt(2.0 * d / n);
        INFO("sigma ", sigma, " got ", got, " expected ", d * v);
        CHECK(std::abs(got - d * v) < 3.0 * se);
    }
}

TEST_CASE("feature loss") {
    std::mt19937_64 rng(2);
    auto x0 = testutil::randn({5, 1, 4, 4}, rng);
    auto batch = make_loss_batch(x0, {}, NoiseSchedule{}, rng);
    auto denoiser = unit_gaussian_denoiser();
    LossConfig cfg;
    CHECK_THROWS_AS(loss_feature(denoiser, batch, cfg), ConfigError);

    // Per-item sigmas differ here; the closed-form denoiser only reads the first.
    cfg.feature_extractor = identity_features();
    CHECK(loss_feature(denoiser, batch, cfg).item() == loss_pixel(denoiser, batch, cfg).item());
    CHECK(loss_feature(oracle_denoiser(x0), batch, cfg).item() == 0.0);

    // Fixed linear map on flattened images.
    auto a = testutil::randn({16, 3}, rng);
    cfg.feature_extractor = [a](const Tensor& x) { return ops::matmul(ops::reshape(x, {x.dim(0), 16}), a); };
    const double got = loss_feature(denoiser, batch, cfg).item();
    const Tensor pred = denoiser(batch.noisy(), batch.sigmas, {});
    double expected = 0.0;
    for (std::size_t b = 0; b < 5; ++b) {
        double item = 0.0;
        for (std::size_t f = 0; f < 3; ++f) {
            double r = 0.0;
            for (std::size_t p = 0; p < 16; ++p)
                r += (pred.data()[b * 16 + p] - x0.data()[b * 16 + p]) * a.data()[p * 3 + f];
            item += r * r;
        }
        expected += loss_weight(cfg, batch.sigmas[b]) * item;
    }
    CHECK(got == doctest::Approx(expected / 5.0).epsilon(1e-12));
}

TEST_CASE("hybrid loss recomposition") {
    std::mt19937_64 rng(3);
    auto x0 = testutil::randn({4, 1, 8, 8}, rng);
    auto batch = make_loss_batch(x0, {}, NoiseSchedule{}, rng);
    auto denoiser = unit_gaussian_denoiser();
    LossConfig cfg;
    cfg.feature_extractor = identity_features();
    cfg.hybrid_feature_weight = 0.0;
    const double pixel = loss_pixel(denoiser, batch, cfg).item();
    CHECK(loss_hybrid(denoiser, batch, cfg).item() == pixel);
    cfg.hybrid_feature_weight = 1.0;
    CHECK(loss_hybrid(denoiser, batch, cfg).item() == doctest::Approx(2.0 * pixel).epsilon(1e-15));

    Classifier clf(1, 4, 9);
    cfg.feature_extractor = [&clf](const Tensor& x) { return clf.features(x); };
    const double feature = loss_feature(denoiser, batch, cfg).item();
    CHECK(std::abs(loss_hybrid(denoiser, batch, cfg).item() - (pixel + feature)) <= 1e-12 * (pixel + feature));
}

TEST_CASE("haar transform hand example") {
    auto x = Tensor::from({1, 1, 2, 2}, {1.0, 0.0, 0.0, 0.0});
    auto h = haar2d(x);
    CHECK(h.shape() == Shape{1, 1, 4, 1, 1});
    for (double v : h.data()) CHECK(v == 0.5);

    // Same residual through the band losses.
    auto zero = Tensor::zeros({1, 1, 2, 2});
    LossBatch batch{zero, {1.0}, Tensor::zeros({1, 1, 2, 2}), {}};
    auto bands = loss_wavelet_bands(
        [&](const Tensor&, std::span<const double>, std::span<const int>) { return x; }, batch, uniform_loss());
    CHECK(bands.ll == 0.25);
    CHECK(bands.lh == 0.25);
    CHECK(bands.hl == 0.25);
    CHECK(bands.hh == 0.25);

    CHECK_THROWS_AS(haar2d(Tensor::zeros({1, 1, 3, 4})), ConfigError);
}

TEST_CASE("wavelet bands: constant residual and Parseval") {
    std::mt19937_64 rng(4);
    auto x0 = testutil::randn({3, 2, 8, 8}, rng);
    auto batch = make_loss_batch(x0, {}, NoiseSchedule{}, rng);
    auto shifted = [&](const Tensor&, std::span<const double>, std::span<const int>) { return ops::add_scalar(x0, 0.3); };
    auto flat = loss_wavelet_bands(shifted, batch, uniform_loss());
    // (x0 + 0.3) - x0 is constant only up to rounding.
    CHECK(flat.ll > 0.0);
    CHECK(flat.lh <= 1e-28 * flat.ll);
    CHECK(flat.hl <= 1e-28 * flat.ll);
    CHECK(flat.hh <= 1e-28 * flat.ll);

    auto denoiser = unit_gaussian_denoiser();
    for (auto weighting : {Weighting::uniform, Weighting::edm}) {
        LossConfig cfg;
        cfg.weighting = weighting;
        const double pixel = loss_pixel(denoiser, batch, cfg).item();
        const auto bands = loss_wavelet_bands(denoiser, batch, cfg);
        CHECK(std::abs(bands.total() - pixel) <= 1e-10 * pixel);
        const auto means = loss_wavelet_bands(denoiser, batch, cfg, BandReduction::mean);
        CHECK(means.hh == doctest::Approx(bands.hh / (2 * 4 * 4)).epsilon(1e-13));
    }
}

TEST_CASE("training with zero steps leaves the initialization") {
    auto data = generate_dataset("gmm", 16, 8, 1);
    MiniUNet net(testutil::toy_unet(), 12);
    const MiniUNet fresh(testutil::toy_unet(), 12);
    TrainConfig cfg;
    cfg.steps = 0;
    auto report = train(net, data, Dataset{}, cfg);
    CHECK(report.losses.empty());
    for (std::size_t i = 0; i < net.parameters().size(); ++i)
        CHECK(net.parameters()[i].value.to_vector() == fresh.parameters()[i].value.to_vector());
}

TEST_CASE("short training lowers the held-out loss") {
    auto data = generate_dataset("gmm", 256, 8, 2);
    auto heldout = generate_dataset("gmm", 64, 8, 3);
    MiniUNet net(testutil::toy_unet(), 13);
    TrainConfig cfg;
    cfg.steps = 150;
    cfg.batch_size = 16;
    auto report = train(net, data, heldout, cfg);
    CHECK(report.losses.size() == 150);
    MESSAGE("heldout ", report.heldout_initial, " -> ", report.heldout_final, " constant ",
            report.heldout_constant_baseline);
    CHECK(report.heldout_final < report.heldout_initial);
}

TEST_CASE("divergence is reported with its step") {
    auto data = generate_dataset("gmm", 32, 8, 2);
    MiniUNet net(testutil::toy_unet(), 14);
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 8;
    cfg.lr = 1e300;
    cfg.warmup_steps = 0;
    try {
        train(net, data, Dataset{}, cfg);
        FAIL("expected divergence");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("training diverged at step") != std::string::npos);
    }
    TrainConfig conditional;
    conditional.class_conditional = true;
    CHECK_THROWS_AS(train(net, make_dataset("unlabelled", data.images), Dataset{}, conditional), ConfigError);
}

TEST_CASE("resumed training equals one continuous run") {
    auto data = generate_dataset("gmm", 40, 8, 6);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.warmup_steps = 4;
    MiniUNet a(testutil::toy_unet(), 15), b(testutil::toy_unet(), 15);
    std::vector<double> la, lb;
    Trainer(a, data, cfg).run(10, &la);
    Trainer tb(b, data, cfg);
    tb.run(4, &lb);
    tb.run(6, &lb);
    CHECK(tb.steps_done() == 10);
    CHECK(tb.samples_seen() == 80);
    CHECK(la == lb);
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
        CHECK(a.parameters()[i].value.to_vector() == b.parameters()[i].value.to_vector());
}
