#pragma once

// One finite-difference case per differentiable primitive, shared by the unit
// tests and the acceptance run.

#include <functional>
#include <random>
#include <vector>

#include "gradcheck.hpp"

namespace testutil {

struct PrimitiveCase {
    const char* name;
    std::function<skiptune::Tensor(const std::vector<skiptune::Tensor>&)> fn;
    std::vector<skiptune::Tensor> inputs;
};

inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed) {
    using namespace skiptune;
    std::mt19937_64 rng(seed);
    const std::vector<int> labels{2, 0, 1};
    return {
        {"add", [](auto& in) { return project(ops::add(in[0], in[1])); }, {randn({3, 4}, rng), randn({3, 4}, rng)}},
        {"sub", [](auto& in) { return project(ops::sub(in[0], in[1])); }, {randn({3, 4}, rng), randn({3, 4}, rng)}},
        {"mul", [](auto& in) { return project(ops::mul(in[0], in[1])); }, {randn({3, 4}, rng), randn({3, 4}, rng)}},
        {"mul_scalar", [](auto& in) { return project(ops::mul_scalar(in[0], -1.7)); }, {randn({5}, rng)}},
        {"add_scalar", [](auto& in) { return project(ops::add_scalar(in[0], 0.3)); }, {randn({5}, rng)}},
        {"square", [](auto& in) { return project(ops::square(in[0])); }, {randn({5}, rng)}},
        {"silu", [](auto& in) { return project(ops::silu(in[0])); }, {randn({6}, rng, false, 3.0)}},
        {"sigmoid", [](auto& in) { return project(ops::sigmoid(in[0])); }, {randn({6}, rng, false, 3.0)}},
        {"relu", [](auto& in) { return project(ops::relu(in[0])); }, {Tensor::from({4}, {-1.2, 0.4, 2.0, -0.3})}},
        {"sum", [](auto& in) { return ops::sum(ops::mul(in[0], in[0])); }, {randn({2, 3}, rng)}},
        {"mean", [](auto& in) { return ops::mean(ops::square(in[0])); }, {randn({2, 3}, rng)}},
        {"sum_per_item", [](auto& in) { return project(ops::sum_per_item(in[0])); }, {randn({3, 2, 2}, rng)}},
        {"scale_rows", [](auto& in) { return project(ops::scale_rows(in[0], in[1])); },
         {randn({3, 2, 2}, rng), randn({3}, rng)}},
        {"matmul", [](auto& in) { return project(ops::matmul(in[0], in[1])); }, {randn({3, 4}, rng), randn({4, 2}, rng)}},
        {"linear", [](auto& in) { return project(ops::linear(in[0], in[1], in[2])); },
         {randn({3, 4}, rng), randn({5, 4}, rng), randn({5}, rng)}},
        {"reshape", [](auto& in) { return project(ops::reshape(in[0], {6})); }, {randn({2, 3}, rng)}},
        {"conv2d_3x3", [](auto& in) { return project(ops::conv2d(in[0], in[1], in[2])); },
         {randn({2, 3, 4, 4}, rng), randn({2, 3, 3, 3}, rng), randn({2}, rng)}},
        {"conv2d_1x1", [](auto& in) { return project(ops::conv2d(in[0], in[1], Tensor{})); },
         {randn({2, 3, 2, 2}, rng), randn({4, 3, 1, 1}, rng)}},
        {"group_norm", [](auto& in) { return project(ops::group_norm(in[0], in[1], in[2], 2)); },
         {randn({2, 4, 3, 3}, rng), randn({4}, rng), randn({4}, rng)}},
        {"group_norm_offset", [](auto& in) { return project(ops::group_norm(in[0], in[1], in[2], 4, 1)); },
         {randn({2, 8, 2, 2}, rng), randn({8}, rng), randn({8}, rng)}},
        {"group_norm_gains", [](auto& in) { return project(ops::group_norm(in[0], in[1], in[2], 4, 2, in[3])); },
         {randn({2, 8, 2, 2}, rng), randn({8}, rng), randn({8}, rng),
          Tensor::from({2, 8}, {0.7, 0.5, 0.7, 0.9, 1, 1.2, 1, 0.8, 0.3, 0.3, 0.6, 0.3, 1, 1, 1, 0.2})}},
        {"group_norm_gain_block",
         [](auto& in) { return project(ops::group_norm(in[0], in[1], in[2], 4, 2, ops::gain_block(in[3], 4, 4))); },
         {randn({2, 8, 2, 2}, rng), randn({8}, rng), randn({8}, rng), Tensor::from({2}, {0.6, 0.35})}},
        {"concat_channels", [](auto& in) { return project(ops::concat_channels(in[0], in[1])); },
         {randn({2, 2, 2, 2}, rng), randn({2, 3, 2, 2}, rng)}},
        {"add_channel_bias", [](auto& in) { return project(ops::add_channel_bias(in[0], in[1])); },
         {randn({2, 3, 2, 2}, rng), randn({2, 3}, rng)}},
        {"avg_pool2", [](auto& in) { return project(ops::avg_pool2(in[0])); }, {randn({2, 2, 4, 4}, rng)}},
        {"upsample2", [](auto& in) { return project(ops::upsample2(in[0])); }, {randn({2, 2, 2, 2}, rng)}},
        {"global_avg_pool", [](auto& in) { return project(ops::global_avg_pool(in[0])); }, {randn({2, 3, 2, 2}, rng)}},
        {"select_column", [](auto& in) { return project(ops::select_column(in[0], 1)); }, {randn({3, 4}, rng)}},
        {"broadcast_rows", [](auto& in) { return project(ops::broadcast_rows(in[0], 3)); }, {randn({4}, rng)}},
        {"gain_block", [](auto& in) { return project(ops::gain_block(in[0], 2, 3)); }, {randn({3}, rng)}},
        {"embedding", [labels](auto& in) { return project(ops::embedding(in[0], labels)); }, {randn({4, 3}, rng)}},
        {"cross_entropy", [labels](auto& in) { return ops::cross_entropy(in[0], labels); }, {randn({3, 4}, rng)}},
    };
}

}  // namespace testutil
