#include "skiptune/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "binary_io.hpp"
#include "skiptune/errors.hpp"
#include "skiptune/optim.hpp"

namespace skiptune {

namespace {

constexpr char kMagic[8] = {'S', 'K', 'T', 'C', 'L', 'S', 'F', '\0'};
constexpr std::uint32_t kVersion = 1;

Tensor init_weight(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = n(rng);
    return Tensor::from(shape, std::move(v));
}

}  // namespace

Classifier::Classifier(std::size_t input_channels, std::size_t num_classes, std::uint64_t seed)
    : input_channels_(input_channels), num_classes_(num_classes) {
    if (input_channels < 1 || num_classes < 2) throw ConfigError("classifier needs >= 1 channel and >= 2 classes");
    std::mt19937_64 rng(seed);
    w1_ = init_weight({16, input_channels, 3, 3}, input_channels * 9, rng);
    b1_ = Tensor::zeros({16});
    w2_ = init_weight({32, 16, 3, 3}, 16 * 9, rng);
    b2_ = Tensor::zeros({32});
    w3_ = init_weight({kFeatureDim, 32, 3, 3}, 32 * 9, rng);
    b3_ = Tensor::zeros({kFeatureDim});
    fc_w_ = init_weight({num_classes, kFeatureDim}, kFeatureDim, rng);
    fc_b_ = Tensor::zeros({num_classes});
}

Tensor Classifier::features(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != input_channels_ || x.dim(2) % 4 || x.dim(3) % 4)
        throw DimensionError("classifier: expected [B, C, H, W] with H, W divisible by 4, got " + shape_str(x.shape()));
    Tensor h = ops::avg_pool2(ops::relu(ops::conv2d(x, w1_, b1_)));
    h = ops::avg_pool2(ops::relu(ops::conv2d(h, w2_, b2_)));
    h = ops::relu(ops::conv2d(h, w3_, b3_));
    return ops::global_avg_pool(h);
}

Tensor Classifier::logits(const Tensor& x) const { return ops::linear(features(x), fc_w_, fc_b_); }

double Classifier::accuracy(const Dataset& data) const {
    if (!data.labelled()) throw ConfigError("classifier accuracy needs a labelled dataset");
    NoGradGuard ng;
    const auto lg = logits(data.images);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < data.size(); ++b) {
        const double* row = lg.data().data() + b * num_classes_;
        const auto best = std::max_element(row, row + num_classes_) - row;
        correct += best == data.labels[b];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<Tensor> Classifier::parameters() const { return {w1_, b1_, w2_, b2_, w3_, b3_, fc_w_, fc_b_}; }

void Classifier::set_requires_grad(bool on) {
    for (auto& p : parameters()) p.set_requires_grad(on);
}

void Classifier::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open classifier for writing: " + path);
    os.write(kMagic, sizeof kMagic);
    binio::put_le<std::uint32_t>(os, kVersion);
    binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(input_channels_));
    binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(num_classes_));
    for (const auto& p : parameters())
        for (double v : p.data()) binio::put_f64(os, v);
    if (!os) throw IoError("failed writing classifier: " + path);
}

Classifier Classifier::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open classifier: " + path);
    char magic[sizeof kMagic];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw IoError("not a classifier file: " + path);
    if (binio::get_le<std::uint32_t>(is) != kVersion) throw IoError("unsupported classifier version");
    const auto channels = binio::get_le<std::uint32_t>(is);
    const auto classes = binio::get_le<std::uint32_t>(is);
    Classifier c(channels, classes, 0);
    for (auto& p : c.parameters())
        for (double& v : p.impl()->data) v = binio::get_f64(is);
    return c;
}

Classifier train_classifier(const Dataset& train, const Dataset& heldout, const ClassifierConfig& cfg,
                            ClassifierReport* report) {
    if (train.size() == 0) throw ConfigError("classifier training set is empty");
    if (!train.labelled()) throw ConfigError("classifier training needs labels");
    Classifier net(cfg.input_channels, cfg.num_classes, cfg.seed);
    net.set_requires_grad(true);
    Adam opt(net.parameters(), AdamConfig{cfg.lr});
    std::mt19937_64 rng(cfg.seed ^ 0x5eedc1a55ULL);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> idx;
        for (std::size_t j = 0; j < std::min(cfg.batch_size, train.size()); ++j) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        const auto labels = train.gather_labels(idx);
        opt.zero_grad();
        Tensor loss = ops::cross_entropy(net.logits(train.gather(idx)), labels);
        if (!std::isfinite(loss.item()))
            throw NumericError("classifier training diverged at step " + std::to_string(step));
        if (report) report->losses.push_back(loss.item());
        backward(loss);
        opt.step();
    }
    net.set_requires_grad(false);
    if (report && heldout.size()) report->heldout_accuracy = net.accuracy(heldout);
    return net;
}

}  // namespace skiptune
