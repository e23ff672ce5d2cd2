#pragma once

// Small convolutional classifier whose penultimate layer (64 features) is the
// feature space for feature losses, toy Fréchet distance and feature MMD.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "skiptune/dataset.hpp"
#include "skiptune/tensor.hpp"

namespace skiptune {

struct ClassifierConfig {
    std::size_t input_channels = 1;
    std::size_t num_classes = 4;
    std::size_t steps = 600;
    std::size_t batch_size = 64;
    double lr = 2e-3;
    std::uint64_t seed = 0;
};

class Classifier {
public:
    static constexpr std::size_t kFeatureDim = 64;

    Classifier(std::size_t input_channels, std::size_t num_classes, std::uint64_t seed);

    Tensor features(const Tensor& x) const;  // [B, 64]
    Tensor logits(const Tensor& x) const;    // [B, classes]
    double accuracy(const Dataset& data) const;

    std::vector<Tensor> parameters() const;
    void set_requires_grad(bool on);
    std::size_t num_classes() const { return num_classes_; }
    std::size_t input_channels() const { return input_channels_; }

    void save(const std::string& path) const;
    static Classifier load(const std::string& path);

private:
    std::size_t input_channels_, num_classes_;
    Tensor w1_, b1_, w2_, b2_, w3_, b3_, fc_w_, fc_b_;
};

struct ClassifierReport {
    std::vector<double> losses;
    double heldout_accuracy = 0.0;
};

// Trains on `train` and reports accuracy on `heldout`.
Classifier train_classifier(const Dataset& train, const Dataset& heldout, const ClassifierConfig& cfg,
                            ClassifierReport* report = nullptr);

}  // namespace skiptune
