#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "primitive_cases.hpp"
#include "skiptune/errors.hpp"
#include "skiptune/tensor.hpp"

using namespace skiptune;
using testutil::gradcheck;
using testutil::project;
using testutil::randn;

TEST_CASE("silu fixed point at zero") {
    CHECK(ops::silu(Tensor::scalar(0.0)).item() == 0.0);
}

TEST_CASE("group_norm of a constant group is zero") {
    auto x = Tensor::full({1, 4, 2, 2}, 3.25);
    auto y = ops::group_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 2);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("group_norm rejects groups that do not divide channels") {
    auto x = Tensor::zeros({1, 6, 2, 2});
    CHECK_THROWS_AS(ops::group_norm(x, Tensor::full({6}, 1.0), Tensor::zeros({6}), 4), ConfigError);
}

TEST_CASE("shape mismatch is a dimension error") {
    CHECK_THROWS_AS(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
    CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({3, 1, 3, 3}), Tensor{}), DimensionError);
}

TEST_CASE("conv2d gradient on a 1x1x4x4 input") {
    std::mt19937_64 rng(1);
    auto x = randn({1, 1, 4, 4}, rng);
    auto w = randn({2, 1, 3, 3}, rng);
    auto b = randn({2}, rng);
    auto rep = gradcheck([](const std::vector<Tensor>& in) { return project(ops::conv2d(in[0], in[1], in[2])); },
                         {x, w, b});
    CHECK(rep.worst_abs <= 1e-6);
}

TEST_CASE("backward basics") {
    auto x = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    backward(ops::sum(x));
    CHECK(x.to_vector().size() == 3);
    auto g = x.grad();
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 1.0);

    auto y = Tensor::from({2}, {1.0, 2.0}, true);
    auto loss = ops::sum(ops::mul(y, y));
    backward(loss);
    CHECK(y.grad()[0] == 2.0);
    CHECK(y.grad()[1] == 4.0);
    CHECK_THROWS_AS(backward(loss), ContractError);
}

TEST_CASE("backward rejects a non-scalar root") {
    auto x = Tensor::from({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(ops::square(x)), ContractError);
}

TEST_CASE("no-grad mode records nothing") {
    auto x = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor y;
    {
        NoGradGuard guard;
        y = ops::square(x);
    }
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("group_norm ignores a gain that is uniform over each group") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = randn({2, 8, 3, 3}, rng, false, 2.0);
        auto gamma = randn({8}, rng);
        auto beta = randn({8}, rng);
        const std::size_t offset = trial % 2 ? 2 : 0;
        std::uniform_real_distribution<double> u(0.05, 3.0);
        std::vector<double> gains(16);
        // Same value within each group of 2 channels (offset-aware), per item.
        for (std::size_t b = 0; b < 2; ++b) {
            double per_group[4];
            for (double& v : per_group) v = u(rng);
            for (std::size_t c = 0; c < 8; ++c) gains[b * 8 + c] = per_group[((c + offset) % 8) / 2];
        }
        auto base = ops::group_norm(x, gamma, beta, 4, offset);
        auto scaled = ops::group_norm(x, gamma, beta, 4, offset, Tensor::from({2, 8}, gains));
        CHECK(base.to_vector() == scaled.to_vector());
    }
}

TEST_CASE("group_norm with materialized uniform scaling matches to machine precision") {
    std::mt19937_64 rng(8);
    auto x = randn({1, 4, 4, 4}, rng);
    auto gamma = Tensor::full({4}, 1.0);
    auto beta = Tensor::zeros({4});
    auto a = ops::group_norm(x, gamma, beta, 2);
    auto b = ops::group_norm(ops::mul_scalar(x, 0.7), gamma, beta, 2);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-4);
}

TEST_CASE("finite-difference checks for every primitive") {
    for (auto& c : testutil::primitive_cases(2024)) {
        auto rep = gradcheck(c.fn, c.inputs);
        INFO(c.name << " worst rel " << rep.worst_rel);
        CHECK(rep.worst_rel <= 1e-4);
    }
}

TEST_CASE("group_norm gains: derivative along a uniform direction vanishes") {
    std::mt19937_64 rng(5);
    auto x = randn({1, 4, 2, 2}, rng);
    auto gamma = randn({4}, rng);
    auto beta = randn({4}, rng);
    auto s = Tensor::from({1}, {0.6}, true);
    backward(project(ops::group_norm(x, gamma, beta, 2, 0, ops::gain_block(s, 2, 2))));
    CHECK(std::abs(s.grad()[0]) < 1e-12);
}
