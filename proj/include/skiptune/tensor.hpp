#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a handle: copies share storage and gradient. Operations in
// namespace ops record a backward closure whenever grad mode is enabled and
// at least one input requires a gradient. backward() walks the recorded graph
// once and then releases it.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace skiptune {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    // Reads out.grad and accumulates into the inputs' grad buffers.
    std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool graph_released = false;
    std::shared_ptr<Node> node;

    std::vector<double>& grad_buffer();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    // Writable access to the values; only legal on tensors not produced by a
    // recorded operation.
    std::span<double> mutable_data();
    std::vector<double> to_vector() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    double item() const;
    // Copy of the values detached from any graph.
    Tensor detach() const;

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Runs reverse accumulation from a scalar root and frees the graph. A second
// call on the same root is a ContractError.
void backward(const Tensor& loss);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline constexpr double kGroupNormEps = 1e-5;

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor sum(const Tensor& a);   // -> [1]
Tensor mean(const Tensor& a);  // -> [1]
// [B, ...] -> [B], summing everything but the leading axis.
Tensor sum_per_item(const Tensor& a);
// x[b, ...] * s[b]
Tensor scale_rows(const Tensor& x, const Tensor& s);
// [M, K] x [K, N] -> [M, N]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [B, in] · w[out, in]^T + bias[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor reshape(const Tensor& a, const Shape& shape);

// NCHW convolution, stride 1, zero padding kernel/2 (odd square kernels).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias);

// Group normalization over [B, C, ...]. `channel_offset` rotates the channel
// to group assignment: channel c belongs to group ((c + offset) mod C) / (C / G).
// `gains`, if defined, is a [B, C] per-item channel gain applied to the input
// before normalization. Within each (item, group) the gains are divided by
// their largest magnitude first, so a gain that is uniform over a group leaves
// the output exactly unchanged and eps acts in the unscaled frame.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                  std::size_t channel_offset = 0, const Tensor& gains = Tensor{},
                  double eps = kGroupNormEps);

Tensor concat_channels(const Tensor& a, const Tensor& b);
// x [B, C, H, W] + e [B, C] broadcast over space.
Tensor add_channel_bias(const Tensor& x, const Tensor& e);
Tensor avg_pool2(const Tensor& x);
Tensor upsample2(const Tensor& x);
// [B, C, H, W] -> [B, C]
Tensor global_avg_pool(const Tensor& x);

// Column i of a [B, K] tensor -> [B].
Tensor select_column(const Tensor& x, std::size_t column);
// Repeats a [K] tensor into [B, K].
Tensor broadcast_rows(const Tensor& row, std::size_t batch);
// Per-item channel gains [B, a + b]: column s[b] repeated `a` times followed
// by `b` ones.
Tensor gain_block(const Tensor& s, std::size_t scaled_channels, std::size_t unit_channels);
// Rows of an embedding table [N, D] indexed by labels -> [len, D].
Tensor embedding(const Tensor& table, std::span<const int> labels);

// Mean softmax cross-entropy of logits [B, K] against labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace ops

}  // namespace skiptune
