#pragma once

#include <vector>

#include "skiptune/tensor.hpp"

namespace skiptune {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over leaf tensors. Parameters without an accumulated gradient are
// skipped for that step.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg);

    void zero_grad();
    void step(double lr_scale = 1.0);
    std::size_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace skiptune
