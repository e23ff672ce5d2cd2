#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "skiptune/errors.hpp"
#include "skiptune/unet.hpp"
#include "toy_config.hpp"

using namespace skiptune;
using testutil::randn;
using testutil::toy_unet;

namespace {

std::vector<double> run(const MiniUNet& net, const Tensor& x, double sigma, const SkipProfile* p) {
    NoGradGuard ng;
    return net.denoise(x, sigma, p).to_vector();
}

SkipProfile random_profile(std::mt19937_64& rng, std::size_t k, ScalingMode mode) {
    std::uniform_real_distribution<double> u(0.3, 0.95);
    SkipProfile p;
    p.k = k;
    p.rho_bottom = u(rng);
    p.rho_top = u(rng);
    p.mode = mode;
    return p;
}

}  // namespace

TEST_CASE("default config has six skips") {
    UNetConfig c;
    CHECK(c.skip_count() == 6);
    MiniUNet net(toy_unet(), 1);
    CHECK(net.skip_count() == 6);
}

TEST_CASE("config validation") {
    auto c = toy_unet();
    c.groupnorm_groups = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("all-ones profile is bitwise identical to no profile") {
    MiniUNet net(toy_unet(), 2);
    std::mt19937_64 rng(3);
    for (auto mode : {ScalingMode::at_concat, ScalingMode::orig_only, ScalingMode::norm_input_only}) {
        auto ones = SkipProfile::identity(6);
        ones.mode = mode;
        for (int t = 0; t < 4; ++t) {
            auto x = randn({2, 1, 8, 8}, rng, false, 3.0);
            CHECK(run(net, x, 2.5, nullptr) == run(net, x, 2.5, &ones));
        }
    }
}

TEST_CASE("aligned groups: mode equivalences hold bitwise") {
    MiniUNet net(toy_unet(GroupAlignment::aligned), 4);
    std::mt19937_64 rng(5);
    for (int t = 0; t < 32; ++t) {
        auto x = randn({1, 1, 8, 8}, rng, false, 2.0);
        auto pa = random_profile(rng, 6, ScalingMode::at_concat);
        auto po = pa;
        po.mode = ScalingMode::orig_only;
        auto pn = pa;
        pn.mode = ScalingMode::norm_input_only;
        const double sigma = 0.1 + t;
        const auto a = run(net, x, sigma, &pa);
        CHECK(a == run(net, x, sigma, &po));
        CHECK(run(net, x, sigma, &pn) == run(net, x, sigma, nullptr));
        CHECK(a != run(net, x, sigma, nullptr));
    }
}

TEST_CASE("straddling groups: norm-input scaling changes the output") {
    MiniUNet net(toy_unet(GroupAlignment::straddling), 6);
    std::mt19937_64 rng(7);
    auto p = SkipProfile::constant(0.7, 6, ScalingMode::norm_input_only);
    for (int t = 0; t < 8; ++t) {
        auto x = randn({1, 1, 8, 8}, rng, false, 2.0);
        CHECK(run(net, x, 1.0, &p) != run(net, x, 1.0, nullptr));
    }
}

TEST_CASE("taps: count and skip-norm homogeneity") {
    MiniUNet net(toy_unet(), 8);
    std::mt19937_64 rng(9);
    auto x = randn({3, 1, 8, 8}, rng, false, 2.0);
    const std::vector<double> sigmas(3, 1.5);
    NoGradGuard ng;
    auto base = net.forward(x, sigmas, static_cast<const SkipProfile*>(nullptr), true);
    auto uninstrumented = net.forward(x, sigmas, static_cast<const SkipProfile*>(nullptr), false);
    CHECK(uninstrumented.taps.empty());
    CHECK(base.denoised.to_vector() == uninstrumented.denoised.to_vector());
    REQUIRE(base.taps.size() == 6);
    auto p = random_profile(rng, 6, ScalingMode::at_concat);
    auto tuned = net.forward(x, sigmas, &p, true);
    const auto rho = p.coefficients(1.5);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(tuned.taps[i].layer == i);
        CHECK(tuned.taps[i].d_norm == doctest::Approx(rho[i] * base.taps[i].d_norm).epsilon(1e-13));
    }
    // The bottom connection sees an unchanged up-path activation.
    CHECK(tuned.taps[0].u_norm == base.taps[0].u_norm);
}

TEST_CASE("profile errors") {
    MiniUNet net(toy_unet(), 1);
    auto x = Tensor::zeros({1, 1, 8, 8});
    auto p = SkipProfile::constant(0.5, 5);
    CHECK_THROWS_AS(net.denoise(x, 1.0, &p), ConfigError);
    auto q = SkipProfile::constant(0.5, 6);
    q.rho_top = 1.3;
    CHECK_THROWS_AS(net.denoise(x, 1.0, &q), DomainError);
    CHECK_THROWS_AS(net.denoise(x, 100.0), DomainError);
}

TEST_CASE("preconditioning") {
    auto x = Tensor::from({1, 2}, {1.0, -2.0});
    const double tiny[] = {1e-9};
    auto near = denoiser_precondition(Tensor::from({1, 2}, {5.0, 5.0}), x, tiny, 0.5);
    CHECK(near.data()[0] == doctest::Approx(1.0).epsilon(1e-8));
    const double half[] = {0.5};
    auto raw = Tensor::from({1, 2}, {1.0, 0.0});
    auto y = denoiser_precondition(raw, x, half, 0.5);
    CHECK(y.data()[0] == doctest::Approx(0.5 * 1.0 + 0.35355339059327373).epsilon(1e-15));
    CHECK(y.data()[1] == doctest::Approx(-1.0).epsilon(1e-15));
    auto z = denoiser_precondition(Tensor::zeros({1, 2}), x, half, 0.5);
    CHECK(z.data()[0] == 0.5);
}

TEST_CASE("checkpoint round trip") {
    MiniUNet net(toy_unet(), 12);
    const auto path = (std::filesystem::temp_directory_path() / "skiptune_unet_test.ckpt").string();
    net.save(path);
    auto loaded = MiniUNet::load(path);
    std::mt19937_64 rng(1);
    auto x = randn({2, 1, 8, 8}, rng);
    CHECK(run(net, x, 3.0, nullptr) == run(loaded, x, 3.0, nullptr));
    CHECK(loaded.config().to_fields() == net.config().to_fields());
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("garbage", f);
    std::fclose(f);
    CHECK_THROWS_AS(MiniUNet::load(path), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("class conditioning") {
    auto c = toy_unet();
    c.num_classes = 3;
    MiniUNet net(c, 2);
    auto x = Tensor::zeros({2, 1, 8, 8});
    std::vector<int> labels{0, 2};
    CHECK(net.denoise(x, 1.0, nullptr, labels).numel() == 128);
    CHECK_THROWS_AS(net.denoise(x, 1.0), ConfigError);
}

TEST_CASE("loss gradient against finite differences on random parameters") {
    MiniUNet net(toy_unet(), 13);
    std::mt19937_64 rng(14);
    auto x0 = randn({2, 1, 8, 8}, rng);
    auto xt = randn({2, 1, 8, 8}, rng, false, 1.3);
    const std::vector<double> sigmas{0.7, 2.0};
    auto coeff = Tensor::from({2, 6}, {0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9});
    auto loss_fn = [&] {
        auto d = net.forward(xt, sigmas, coeff, ScalingMode::at_concat).denoised;
        return ops::mean(ops::square(ops::sub(d, x0)));
    };
    net.set_requires_grad(true);
    backward(loss_fn());
    auto& params = net.parameters();
    std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
    for (int trial = 0; trial < 10; ++trial) {
        auto& p = params[pick(rng)].value;
        std::uniform_int_distribution<std::size_t> entry(0, p.numel() - 1);
        const std::size_t i = entry(rng);
        const double analytic = p.grad()[i];
        const double orig = p.data()[i];
        double fp, fm;
        {
            NoGradGuard ng;
            p.impl()->data[i] = orig + 1e-5;
            fp = loss_fn().item();
            p.impl()->data[i] = orig - 1e-5;
            fm = loss_fn().item();
            p.impl()->data[i] = orig;
        }
        const double numeric = (fp - fm) / 2e-5;
        const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        INFO(params[0].name << " trial " << trial << " analytic " << analytic << " numeric " << numeric);
        CHECK(rel <= 1e-4);
    }
}
