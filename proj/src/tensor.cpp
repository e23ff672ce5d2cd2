#include "skiptune/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "skiptune/errors.hpp"

namespace skiptune {

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return impl;
}

bool wants_graph(std::initializer_list<const Tensor*> inputs) {
    if (!t_grad_enabled) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

// Builds the output tensor and, when any input requires a gradient, attaches
// a node holding the inputs alive plus the backward closure.
Tensor finish(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
              std::function<void(TensorImpl&)> backward_fn) {
    auto impl = new_impl(std::move(shape), std::move(data));
    if (wants_graph(inputs)) {
        auto node = std::make_shared<Node>();
        for (const Tensor* t : inputs)
            if (t->defined()) node->inputs.push_back(t->impl_ptr());
        node->backward = std::move(backward_fn);
        impl->node = std::move(node);
        impl->requires_grad = true;
    }
    return Tensor(std::move(impl));
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require_defined(a, op);
    require_defined(b, op);
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    require_defined(t, op);
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
}

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

template <class F>
Tensor unary(const Tensor& a, F&& value, const char* op,
             std::function<double(double x, double y)> derivative) {
    require_defined(a, op);
    std::vector<double> out(a.numel());
    const auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(in[i]);
    TensorImpl* ai = a.impl();
    return finish(a.shape(), std::move(out), {&a}, [ai, derivative](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * derivative(ai->data[i], o.data[i]);
    });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0, requires_grad); }

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    auto impl = new_impl(shape, std::vector<double>(shape_numel(shape), value));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    auto impl = new_impl(shape, std::move(values));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

const Shape& Tensor::shape() const {
    require_defined(*this, "shape");
    return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("dim: axis out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return defined() ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
    require_defined(*this, "data");
    return impl_->data;
}

std::span<double> Tensor::mutable_data() {
    require_defined(*this, "mutable_data");
    if (impl_->node) throw ContractError("mutable_data: tensor is part of a recorded graph");
    return impl_->data;
}

std::vector<double> Tensor::to_vector() const {
    auto d = data();
    return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    require_defined(*this, "set_requires_grad");
    if (impl_->node) throw ContractError("set_requires_grad: only leaf tensors can be toggled");
    impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return defined() && impl_->grad.size() == impl_->data.size(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractError("grad: no gradient has been accumulated");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (defined()) impl_->grad.clear();
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item: tensor is not a scalar " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::detach() const {
    require_defined(*this, "detach");
    return Tensor(new_impl(impl_->shape, impl_->data));
}

void backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.numel() != 1)
        throw ContractError("backward: root must be a scalar, got " + shape_str(loss.shape()));
    TensorImpl* root = loss.impl();
    if (root->graph_released) throw ContractError("backward: graph already released for this root");
    if (!root->requires_grad) throw ContractError("backward: root does not require grad");

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        if (impl->node && next < impl->node->inputs.size()) {
            TensorImpl* child = impl->node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(impl);
        stack.pop_back();
    }

    root->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        if (impl->node && !impl->grad.empty()) impl->node->backward(*impl);
    }
    for (TensorImpl* impl : order) {
        if (impl->node) {
            impl->node.reset();
            impl->graph_released = true;
        }
    }
    root->graph_released = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    TensorImpl *ai = a.impl(), *bi = b.impl();
    return finish(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl& o) {
        for (TensorImpl* t : {ai, bi}) {
            if (!t->requires_grad) continue;
            auto& g = t->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    TensorImpl *ai = a.impl(), *bi = b.impl();
    return finish(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            auto& g = ai->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad) {
            auto& g = bi->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    TensorImpl *ai = a.impl(), *bi = b.impl();
    return finish(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            auto& g = ai->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            auto& g = bi->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
        }
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x * s; }, "mul_scalar", [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x + s; }, "add_scalar", [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
    return unary(a, [](double x) { return x * x; }, "square", [](double x, double) { return 2.0 * x; });
}

Tensor silu(const Tensor& a) {
    return unary(
        a, [](double x) { return x * sigmoid_scalar(x); }, "silu",
        [](double x, double) {
            const double s = sigmoid_scalar(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor sigmoid(const Tensor& a) {
    return unary(a, sigmoid_scalar, "sigmoid", [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
    return unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, "relu",
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
    require_defined(a, "sum");
    double s = 0.0;
    for (double v : a.data()) s += v;
    TensorImpl* ai = a.impl();
    return finish({1}, {s}, {&a}, [ai](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (double& v : g) v += o.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    require_defined(a, "mean");
    if (a.numel() == 0) throw DimensionError("mean: empty tensor");
    return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_per_item(const Tensor& a) {
    require_defined(a, "sum_per_item");
    if (a.rank() < 1) throw DimensionError("sum_per_item: needs a leading batch axis");
    const std::size_t batch = a.dim(0);
    const std::size_t inner = batch ? a.numel() / batch : 0;
    std::vector<double> out(batch, 0.0);
    auto x = a.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) out[b] += x[b * inner + i];
    TensorImpl* ai = a.impl();
    return finish({batch}, std::move(out), {&a}, [ai, inner](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (std::size_t b = 0; b < o.data.size(); ++b)
            for (std::size_t i = 0; i < inner; ++i) g[b * inner + i] += o.grad[b];
    });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    require_defined(x, "scale_rows");
    require_rank(s, 1, "scale_rows");
    if (x.rank() < 1 || x.dim(0) != s.dim(0))
        throw DimensionError("scale_rows: " + shape_str(x.shape()) + " vs scales " + shape_str(s.shape()));
    const std::size_t batch = x.dim(0);
    const std::size_t inner = batch ? x.numel() / batch : 0;
    std::vector<double> out(x.numel());
    auto xv = x.data();
    auto sv = s.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] = xv[b * inner + i] * sv[b];
    TensorImpl *xi = x.impl(), *si = s.impl();
    return finish(x.shape(), std::move(out), {&x, &s}, [xi, si, inner](TensorImpl& o) {
        const std::size_t batch = si->data.size();
        if (xi->requires_grad) {
            auto& g = xi->grad_buffer();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < inner; ++i) g[b * inner + i] += o.grad[b * inner + i] * si->data[b];
        }
        if (si->requires_grad) {
            auto& g = si->grad_buffer();
            for (std::size_t b = 0; b < batch; ++b) {
                double acc = 0.0;
                for (std::size_t i = 0; i < inner; ++i) acc += o.grad[b * inner + i] * xi->data[b * inner + i];
                g[b] += acc;
            }
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(m * n);
    MapMat(out.data(), m, n).noalias() = CMapMat(a.data().data(), m, k) * CMapMat(b.data().data(), k, n);
    TensorImpl *ai = a.impl(), *bi = b.impl();
    return finish({m, n}, std::move(out), {&a, &b}, [ai, bi, m, k, n](TensorImpl& o) {
        CMapMat go(o.grad.data(), m, n);
        if (ai->requires_grad)
            MapMat(ai->grad_buffer().data(), m, k).noalias() += go * CMapMat(bi->data.data(), k, n).transpose();
        if (bi->requires_grad)
            MapMat(bi->grad_buffer().data(), k, n).noalias() += CMapMat(ai->data.data(), m, k).transpose() * go;
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    if (w.dim(1) != in)
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim))
        throw DimensionError("linear: bias " + shape_str(bias.shape()));
    std::vector<double> out(batch * out_dim);
    MapMat om(out.data(), batch, out_dim);
    om.noalias() = CMapMat(x.data().data(), batch, in) * CMapMat(w.data().data(), out_dim, in).transpose();
    if (bias.defined())
        om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), out_dim);
    TensorImpl *xi = x.impl(), *wi = w.impl(), *bi = bias.impl();
    return finish({batch, out_dim}, std::move(out), {&x, &w, &bias},
                  [xi, wi, bi, batch, in, out_dim](TensorImpl& o) {
                      CMapMat go(o.grad.data(), batch, out_dim);
                      if (xi->requires_grad)
                          MapMat(xi->grad_buffer().data(), batch, in).noalias() +=
                              go * CMapMat(wi->data.data(), out_dim, in);
                      if (wi->requires_grad)
                          MapMat(wi->grad_buffer().data(), out_dim, in).noalias() +=
                              go.transpose() * CMapMat(xi->data.data(), batch, in);
                      if (bi && bi->requires_grad)
                          Eigen::Map<Eigen::RowVectorXd>(bi->grad_buffer().data(), out_dim) += go.colwise().sum();
                  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    require_defined(a, "reshape");
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    TensorImpl* ai = a.impl();
    return finish(shape, a.to_vector(), {&a}, [ai](TensorImpl& o) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank(x, 4, "conv2d");
    require_rank(w, 4, "conv2d");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t cout = w.dim(0), ksize = w.dim(2);
    if (w.dim(1) != cin || w.dim(3) != ksize || ksize % 2 == 0)
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        throw DimensionError("conv2d: bias " + shape_str(bias.shape()));
    const long pad = static_cast<long>(ksize / 2);
    const std::size_t kdim = cin * ksize * ksize;
    const std::size_t ncols = batch * h * wd;

    // im2col: row r = (ci*k + ky)*k + kx, column n = (b*h + y)*w + x.
    auto cols = std::make_shared<std::vector<double>>(kdim * ncols, 0.0);
    const auto xv = x.data();
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < ksize; ++ky)
            for (std::size_t kx = 0; kx < ksize; ++kx) {
                double* row = cols->data() + ((ci * ksize + ky) * ksize + kx) * ncols;
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* plane = xv.data() + (b * cin + ci) * h * wd;
                    for (std::size_t y = 0; y < h; ++y) {
                        const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
                        if (sy < 0 || sy >= static_cast<long>(h)) continue;
                        double* dst = row + (b * h + y) * wd;
                        for (std::size_t xx = 0; xx < wd; ++xx) {
                            const long sx = static_cast<long>(xx) + static_cast<long>(kx) - pad;
                            if (sx >= 0 && sx < static_cast<long>(wd)) dst[xx] = plane[sy * wd + sx];
                        }
                    }
                }
            }

    RowMat prod = CMapMat(w.data().data(), cout, kdim) * CMapMat(cols->data(), kdim, ncols);
    std::vector<double> out(batch * cout * h * wd);
    const std::size_t hw = h * wd;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
            const double bv = bias.defined() ? bias.data()[co] : 0.0;
            const double* src = prod.data() + co * ncols + b * hw;
            double* dst = out.data() + (b * cout + co) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
        }

    TensorImpl *xi = x.impl(), *wi = w.impl(), *bi = bias.impl();
    return finish({batch, cout, h, wd}, std::move(out), {&x, &w, &bias},
                  [xi, wi, bi, cols, batch, cin, cout, h, wd, ksize, pad, kdim, ncols](TensorImpl& o) {
                      const std::size_t hw = h * wd;
                      RowMat gout(cout, ncols);
                      for (std::size_t b = 0; b < batch; ++b)
                          for (std::size_t co = 0; co < cout; ++co)
                              std::copy_n(o.grad.data() + (b * cout + co) * hw, hw, gout.data() + co * ncols + b * hw);
                      if (wi->requires_grad)
                          MapMat(wi->grad_buffer().data(), cout, kdim).noalias() +=
                              gout * CMapMat(cols->data(), kdim, ncols).transpose();
                      if (bi && bi->requires_grad)
                          Eigen::Map<Eigen::VectorXd>(bi->grad_buffer().data(), cout) += gout.rowwise().sum();
                      if (!xi->requires_grad) return;
                      RowMat gcols = CMapMat(wi->data.data(), cout, kdim).transpose() * gout;
                      auto& gx = xi->grad_buffer();
                      for (std::size_t ci = 0; ci < cin; ++ci)
                          for (std::size_t ky = 0; ky < ksize; ++ky)
                              for (std::size_t kx = 0; kx < ksize; ++kx) {
                                  const double* row = gcols.data() + ((ci * ksize + ky) * ksize + kx) * ncols;
                                  for (std::size_t b = 0; b < batch; ++b) {
                                      double* plane = gx.data() + (b * cin + ci) * hw;
                                      for (std::size_t y = 0; y < h; ++y) {
                                          const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
                                          if (sy < 0 || sy >= static_cast<long>(h)) continue;
                                          const double* src = row + (b * h + y) * wd;
                                          for (std::size_t xx = 0; xx < wd; ++xx) {
                                              const long sx = static_cast<long>(xx) + static_cast<long>(kx) - pad;
                                              if (sx >= 0 && sx < static_cast<long>(wd)) plane[sy * wd + sx] += src[xx];
                                          }
                                      }
                                  }
                              }
                  });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                  std::size_t channel_offset, const Tensor& gains, double eps) {
    require_defined(x, "group_norm");
    if (x.rank() < 2) throw DimensionError("group_norm: expected [B, C, ...], got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), channels = x.dim(1);
    if (groups == 0 || channels % groups != 0)
        throw ConfigError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                          std::to_string(channels) + " channels");
    require_rank(gamma, 1, "group_norm");
    require_rank(beta, 1, "group_norm");
    if (gamma.dim(0) != channels || beta.dim(0) != channels)
        throw DimensionError("group_norm: affine parameters must have " + std::to_string(channels) + " entries");
    if (gains.defined() && gains.shape() != Shape{batch, channels})
        throw DimensionError("group_norm: gains must be [B, C], got " + shape_str(gains.shape()));

    const std::size_t spatial = (batch * channels) != 0 ? x.numel() / (batch * channels) : 0;
    const std::size_t group_size = channels / groups;
    const std::size_t count = group_size * spatial;

    // members[g] lists the channels of group g.
    auto members = std::make_shared<std::vector<std::vector<std::size_t>>>(groups);
    for (std::size_t c = 0; c < channels; ++c) (*members)[((c + channel_offset) % channels) / group_size].push_back(c);

    auto scale = std::make_shared<std::vector<double>>(batch * channels, 1.0);
    auto peak = std::make_shared<std::vector<double>>(batch * groups, 1.0);
    auto peak_channel = std::make_shared<std::vector<std::size_t>>(batch * groups, 0);
    if (gains.defined()) {
        const auto gv = gains.data();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t g = 0; g < groups; ++g) {
                double top = 0.0;
                std::size_t arg = (*members)[g].front();
                for (std::size_t c : (*members)[g])
                    if (std::abs(gv[b * channels + c]) > top) {
                        top = std::abs(gv[b * channels + c]);
                        arg = c;
                    }
                if (!(top > 0.0) || !std::isfinite(top))
                    throw DomainError("group_norm: gains of a group must be finite and not all zero");
                (*peak)[b * groups + g] = top;
                (*peak_channel)[b * groups + g] = arg;
                for (std::size_t c : (*members)[g]) (*scale)[b * channels + c] = gv[b * channels + c] / top;
            }
    }

    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(batch * groups);
    std::vector<double> out(x.numel());
    const auto xv = x.data();
    const auto gm = gamma.data();
    const auto bt = beta.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t g = 0; g < groups; ++g) {
            double mu = 0.0;
            for (std::size_t c : (*members)[g]) {
                const double s = (*scale)[b * channels + c];
                const double* p = xv.data() + (b * channels + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) mu += p[i] * s;
            }
            mu /= static_cast<double>(count);
            double var = 0.0;
            for (std::size_t c : (*members)[g]) {
                const double s = (*scale)[b * channels + c];
                const double* p = xv.data() + (b * channels + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) {
                    const double d = p[i] * s - mu;
                    var += d * d;
                }
            }
            var /= static_cast<double>(count);
            const double r = 1.0 / std::sqrt(var + eps);
            (*rstd)[b * groups + g] = r;
            for (std::size_t c : (*members)[g]) {
                const double s = (*scale)[b * channels + c];
                const std::size_t base = (b * channels + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) {
                    const double n = (xv[base + i] * s - mu) * r;
                    (*xhat)[base + i] = n;
                    out[base + i] = n * gm[c] + bt[c];
                }
            }
        }

    TensorImpl *xi = x.impl(), *gi = gamma.impl(), *bi = beta.impl(), *si = gains.impl();
    return finish(x.shape(), std::move(out), {&x, &gamma, &beta, &gains},
                  [=](TensorImpl& o) {
                      std::vector<double> dz(count);
                      for (std::size_t b = 0; b < batch; ++b)
                          for (std::size_t g = 0; g < groups; ++g) {
                              const auto& chans = (*members)[g];
                              double sum_dx = 0.0, sum_dx_xh = 0.0;
                              for (std::size_t c : chans) {
                                  const std::size_t base = (b * channels + c) * spatial;
                                  const double gam = gi->data[c];
                                  for (std::size_t i = 0; i < spatial; ++i) {
                                      const double d = o.grad[base + i] * gam;
                                      sum_dx += d;
                                      sum_dx_xh += d * (*xhat)[base + i];
                                  }
                              }
                              const double r = (*rstd)[b * groups + g];
                              const double n = static_cast<double>(count);
                              std::size_t j = 0;
                              for (std::size_t c : chans) {
                                  const std::size_t base = (b * channels + c) * spatial;
                                  const double gam = gi->data[c];
                                  for (std::size_t i = 0; i < spatial; ++i, ++j)
                                      dz[j] = r / n * (n * o.grad[base + i] * gam - sum_dx - (*xhat)[base + i] * sum_dx_xh);
                              }
                              if (xi->requires_grad) {
                                  auto& gx = xi->grad_buffer();
                                  j = 0;
                                  for (std::size_t c : chans) {
                                      const double s = (*scale)[b * channels + c];
                                      const std::size_t base = (b * channels + c) * spatial;
                                      for (std::size_t i = 0; i < spatial; ++i, ++j) gx[base + i] += dz[j] * s;
                                  }
                              }
                              if (si && si->requires_grad) {
                                  // scale_c = gain_c / |gain_peak|
                                  auto& gg = si->grad_buffer();
                                  const double top = (*peak)[b * groups + g];
                                  const std::size_t arg = (*peak_channel)[b * groups + g];
                                  double through_peak = 0.0;
                                  j = 0;
                                  for (std::size_t c : chans) {
                                      const std::size_t base = (b * channels + c) * spatial;
                                      double ds = 0.0;
                                      for (std::size_t i = 0; i < spatial; ++i, ++j) ds += dz[j] * xi->data[base + i];
                                      gg[b * channels + c] += ds / top;
                                      through_peak += ds * si->data[b * channels + c] / (top * top);
                                  }
                                  const double sign = si->data[b * channels + arg] < 0.0 ? -1.0 : 1.0;
                                  gg[b * channels + arg] -= sign * through_peak;
                              }
                          }
                      if (gi->requires_grad || bi->requires_grad) {
                          auto* gg = gi->requires_grad ? &gi->grad_buffer() : nullptr;
                          auto* gb = bi->requires_grad ? &bi->grad_buffer() : nullptr;
                          for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t c = 0; c < channels; ++c) {
                                  const std::size_t base = (b * channels + c) * spatial;
                                  double sg = 0.0, sb = 0.0;
                                  for (std::size_t i = 0; i < spatial; ++i) {
                                      sg += o.grad[base + i] * (*xhat)[base + i];
                                      sb += o.grad[base + i];
                                  }
                                  if (gg) (*gg)[c] += sg;
                                  if (gb) (*gb)[c] += sb;
                              }
                      }
                  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_defined(a, "concat_channels");
    require_defined(b, "concat_channels");
    if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
        !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2))
        throw DimensionError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t batch = a.dim(0);
    const std::size_t na = batch ? a.numel() / batch : 0;
    const std::size_t nb = batch ? b.numel() / batch : 0;
    Shape shape = a.shape();
    shape[1] += b.dim(1);
    std::vector<double> out(a.numel() + b.numel());
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < batch; ++i) {
        std::copy_n(av.data() + i * na, na, out.data() + i * (na + nb));
        std::copy_n(bv.data() + i * nb, nb, out.data() + i * (na + nb) + na);
    }
    TensorImpl *ai = a.impl(), *bi = b.impl();
    return finish(std::move(shape), std::move(out), {&a, &b}, [ai, bi, batch, na, nb](TensorImpl& o) {
        if (ai->requires_grad) {
            auto& g = ai->grad_buffer();
            for (std::size_t i = 0; i < batch; ++i)
                for (std::size_t j = 0; j < na; ++j) g[i * na + j] += o.grad[i * (na + nb) + j];
        }
        if (bi->requires_grad) {
            auto& g = bi->grad_buffer();
            for (std::size_t i = 0; i < batch; ++i)
                for (std::size_t j = 0; j < nb; ++j) g[i * nb + j] += o.grad[i * (na + nb) + na + j];
        }
    });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& e) {
    require_defined(x, "add_channel_bias");
    require_rank(e, 2, "add_channel_bias");
    if (x.rank() < 2 || x.dim(0) != e.dim(0) || x.dim(1) != e.dim(1))
        throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " vs " + shape_str(e.shape()));
    const std::size_t rows = e.numel();
    const std::size_t spatial = rows ? x.numel() / rows : 0;
    std::vector<double> out(x.numel());
    auto xv = x.data(), ev = e.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < spatial; ++i) out[r * spatial + i] = xv[r * spatial + i] + ev[r];
    TensorImpl *xi = x.impl(), *ei = e.impl();
    return finish(x.shape(), std::move(out), {&x, &e}, [xi, ei, rows, spatial](TensorImpl& o) {
        if (xi->requires_grad) {
            auto& g = xi->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (ei->requires_grad) {
            auto& g = ei->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (std::size_t i = 0; i < spatial; ++i) acc += o.grad[r * spatial + i];
                g[r] += acc;
            }
        }
    });
}

Tensor avg_pool2(const Tensor& x) {
    require_rank(x, 4, "avg_pool2");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 || w % 2) throw DimensionError("avg_pool2: spatial dims must be even, got " + shape_str(x.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<double> out(planes * oh * ow);
    auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const double* s = xv.data() + p * h * w + 2 * y * w + 2 * xx;
                out[(p * oh + y) * ow + xx] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
            }
    TensorImpl* xi = x.impl();
    return finish({x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x}, [xi, planes, h, w, oh, ow](TensorImpl& o) {
        if (!xi->requires_grad) return;
        auto& g = xi->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    const double d = 0.25 * o.grad[(p * oh + y) * ow + xx];
                    double* t = g.data() + p * h * w + 2 * y * w + 2 * xx;
                    t[0] += d;
                    t[1] += d;
                    t[w] += d;
                    t[w + 1] += d;
                }
    });
}

Tensor upsample2(const Tensor& x) {
    require_rank(x, 4, "upsample2");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = 2 * h, ow = 2 * w;
    std::vector<double> out(planes * oh * ow);
    auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = xv[(p * h + y / 2) * w + xx / 2];
    TensorImpl* xi = x.impl();
    return finish({x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x}, [xi, planes, h, w, oh, ow](TensorImpl& o) {
        if (!xi->requires_grad) return;
        auto& g = xi->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) g[(p * h + y / 2) * w + xx / 2] += o.grad[(p * oh + y) * ow + xx];
    });
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 4, "global_avg_pool");
    const std::size_t rows = x.dim(0) * x.dim(1), spatial = x.dim(2) * x.dim(3);
    std::vector<double> out(rows, 0.0);
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < spatial; ++i) out[r] += xv[r * spatial + i];
        out[r] /= static_cast<double>(spatial);
    }
    TensorImpl* xi = x.impl();
    return finish({x.dim(0), x.dim(1)}, std::move(out), {&x}, [xi, rows, spatial](TensorImpl& o) {
        if (!xi->requires_grad) return;
        auto& g = xi->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < spatial; ++i) g[r * spatial + i] += o.grad[r] / static_cast<double>(spatial);
    });
}

Tensor select_column(const Tensor& x, std::size_t column) {
    require_rank(x, 2, "select_column");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (column >= cols) throw DimensionError("select_column: column out of range");
    std::vector<double> out(rows);
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) out[r] = xv[r * cols + column];
    TensorImpl* xi = x.impl();
    return finish({rows}, std::move(out), {&x}, [xi, cols, column](TensorImpl& o) {
        if (!xi->requires_grad) return;
        auto& g = xi->grad_buffer();
        for (std::size_t r = 0; r < o.data.size(); ++r) g[r * cols + column] += o.grad[r];
    });
}

Tensor broadcast_rows(const Tensor& row, std::size_t batch) {
    require_rank(row, 1, "broadcast_rows");
    const std::size_t k = row.dim(0);
    std::vector<double> out(batch * k);
    auto rv = row.data();
    for (std::size_t b = 0; b < batch; ++b) std::copy(rv.begin(), rv.end(), out.begin() + b * k);
    TensorImpl* ri = row.impl();
    return finish({batch, k}, std::move(out), {&row}, [ri, batch, k](TensorImpl& o) {
        if (!ri->requires_grad) return;
        auto& g = ri->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < k; ++j) g[j] += o.grad[b * k + j];
    });
}

Tensor gain_block(const Tensor& s, std::size_t scaled_channels, std::size_t unit_channels) {
    require_rank(s, 1, "gain_block");
    const std::size_t batch = s.dim(0), width = scaled_channels + unit_channels;
    std::vector<double> out(batch * width, 1.0);
    auto sv = s.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < scaled_channels; ++c) out[b * width + c] = sv[b];
    TensorImpl* si = s.impl();
    return finish({batch, width}, std::move(out), {&s}, [si, scaled_channels, width](TensorImpl& o) {
        if (!si->requires_grad) return;
        auto& g = si->grad_buffer();
        for (std::size_t b = 0; b < g.size(); ++b)
            for (std::size_t c = 0; c < scaled_channels; ++c) g[b] += o.grad[b * width + c];
    });
}

Tensor embedding(const Tensor& table, std::span<const int> labels) {
    require_rank(table, 2, "embedding");
    const std::size_t rows = table.dim(0), width = table.dim(1);
    std::vector<double> out(labels.size() * width);
    auto tv = table.data();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= rows)
            throw DomainError("embedding: label " + std::to_string(labels[i]) + " out of range");
        std::copy_n(tv.data() + static_cast<std::size_t>(labels[i]) * width, width, out.data() + i * width);
    }
    TensorImpl* ti = table.impl();
    std::vector<int> idx(labels.begin(), labels.end());
    return finish({labels.size(), width}, std::move(out), {&table}, [ti, idx, width](TensorImpl& o) {
        if (!ti->requires_grad) return;
        auto& g = ti->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < width; ++j) g[static_cast<std::size_t>(idx[i]) * width + j] += o.grad[i * width + j];
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch) throw DimensionError("cross_entropy: label count mismatch");
    if (batch == 0) throw DimensionError("cross_entropy: empty batch");
    auto probs = std::make_shared<std::vector<double>>(batch * classes);
    auto lv = logits.data();
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes)
            throw DomainError("cross_entropy: label out of range");
        const double* row = lv.data() + b * classes;
        const double top = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - top);
        for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] = std::exp(row[c] - top) / z;
        loss -= row[labels[b]] - top - std::log(z);
    }
    loss /= static_cast<double>(batch);
    TensorImpl* li = logits.impl();
    std::vector<int> idx(labels.begin(), labels.end());
    return finish({1}, {loss}, {&logits}, [li, probs, idx, batch, classes](TensorImpl& o) {
        if (!li->requires_grad) return;
        auto& g = li->grad_buffer();
        const double scale = o.grad[0] / static_cast<double>(batch);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < classes; ++c) {
                const double onehot = static_cast<std::size_t>(idx[b]) == c ? 1.0 : 0.0;
                g[b * classes + c] += scale * ((*probs)[b * classes + c] - onehot);
            }
    });
}

}  // namespace ops

}  // namespace skiptune
