#include "skiptune/metrics.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "skiptune/csv.hpp"
#include "skiptune/errors.hpp"

namespace skiptune {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t row_width(const Tensor& t) {
    if (t.rank() == 0) throw DimensionError("sample set must have a leading item axis");
    return t.dim(0) == 0 ? shape_numel(Shape(t.shape().begin() + 1, t.shape().end())) : t.numel() / t.dim(0);
}

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(row_width(t))};
}

std::span<const double> row(const Tensor& t, std::size_t i) {
    const std::size_t w = row_width(t);
    return t.data().subspan(i * w, w);
}

double median(std::vector<double> v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    const double hi = v[mid];
    if (v.size() % 2) return hi;
    return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + mid));
}

// Sum of all entries and of the diagonal of a kernel block.
struct BlockSums {
    double total = 0.0;
    double diagonal = 0.0;
};

// Dot-product kernels go through one Gram matrix; laplacian is summed
// directly because it needs l1 distances.
BlockSums kernel_block(const KernelSpec& k, const Tensor& a, const Tensor& b, bool square) {
    BlockSums sums;
    if (k.kind == KernelKind::laplacian) {
        for (std::size_t i = 0; i < a.dim(0); ++i)
            for (std::size_t j = 0; j < b.dim(0); ++j) {
                const double v = kernel_value(k, row(a, i), row(b, j));
                sums.total += v;
                if (square && i == j) sums.diagonal += v;
            }
        return sums;
    }
    const auto A = as_matrix(a);
    const auto B = as_matrix(b);
    Eigen::MatrixXd G = A * B.transpose();
    const Eigen::VectorXd na = A.rowwise().squaredNorm();
    const Eigen::VectorXd nb = B.rowwise().squaredNorm();
    auto apply = [&](Eigen::Index i, Eigen::Index j) {
        const double dot = G(i, j);
        switch (k.kind) {
            case KernelKind::linear: return dot;
            case KernelKind::rbf: {
                const double d2 = std::max(0.0, na(i) + nb(j) - 2.0 * dot);
                return std::exp(-d2 / (2.0 * *k.bandwidth * *k.bandwidth));
            }
            case KernelKind::sigmoid: return std::tanh(*k.sigmoid_a * dot + k.sigmoid_c);
            case KernelKind::imq: {
                const double d2 = std::max(0.0, na(i) + nb(j) - 2.0 * dot);
                return 1.0 / std::sqrt(d2 + k.imq_c * k.imq_c);
            }
            case KernelKind::polynomial: return std::pow(dot + k.coef0, k.degree);
            case KernelKind::cosine: {
                const double n = std::sqrt(na(i) * nb(j));
                return n > 0.0 ? dot / n : 0.0;
            }
            case KernelKind::laplacian: break;
        }
        return 0.0;
    };
    for (Eigen::Index i = 0; i < G.rows(); ++i)
        for (Eigen::Index j = 0; j < G.cols(); ++j) {
            const double v = apply(i, j);
            sums.total += v;
            if (square && i == j) sums.diagonal += v;
        }
    return sums;
}

void require_same_width(const Tensor& a, const Tensor& b, const char* what) {
    if (row_width(a) != row_width(b))
        throw DimensionError(std::string(what) + ": sample widths differ (" + std::to_string(row_width(a)) + " vs " +
                             std::to_string(row_width(b)) + ")");
}

}  // namespace

PropRatios prop_ratios(std::span<const SkipTap> taps) {
    PropRatios out;
    for (const auto& tap : taps) {
        if (!(tap.u_norm > 0.0))
            throw NumericError("degenerate activation: up-path norm is zero at skip " + std::to_string(tap.layer));
        out.ratios.push_back(tap.d_norm / tap.u_norm);
    }
    if (!out.ratios.empty())
        out.average = std::accumulate(out.ratios.begin(), out.ratios.end(), 0.0) / out.ratios.size();
    return out;
}

std::string to_string(ProbeScalarization s) {
    return s == ProbeScalarization::output_sum ? "output_sum" : "frobenius";
}

ProbeScalarization parse_probe_scalarization(const std::string& text) {
    if (text == "output_sum") return ProbeScalarization::output_sum;
    if (text == "frobenius") return ProbeScalarization::frobenius;
    throw ConfigError("unknown probe scalarization: " + text);
}

double gradient_norm_probe(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                           ProbeScalarization scalarization) {
    if (!grad_enabled()) throw ContractError("gradient probe needs grad mode; a NoGradGuard is active");
    if (x.rank() == 0 || x.dim(0) == 0) throw DimensionError("gradient probe needs a non-empty batch");
    const std::size_t batch = x.dim(0), width = x.numel() / batch;
    std::vector<double> sq(batch, 0.0);

    auto accumulate = [&](const Tensor& input, const Tensor& scalar) {
        if (!scalar.requires_grad()) return;  // output does not depend on the input
        backward(scalar);
        if (!input.has_grad()) return;
        auto g = input.grad();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < width; ++i) sq[b] += g[b * width + i] * g[b * width + i];
    };

    if (scalarization == ProbeScalarization::output_sum) {
        Tensor input = Tensor::from(x.shape(), x.to_vector(), true);
        accumulate(input, ops::sum(fn(input)));
    } else {
        std::size_t out_width = 0;
        for (std::size_t j = 0;; ++j) {
            Tensor input = Tensor::from(x.shape(), x.to_vector(), true);
            Tensor out = fn(input);
            if (out.rank() == 0 || out.dim(0) != batch) throw DimensionError("probe function changed the batch size");
            out_width = out.numel() / batch;
            if (j >= out_width) break;
            Tensor mask = Tensor::zeros(out.shape());
            auto m = mask.mutable_data();
            for (std::size_t b = 0; b < batch; ++b) m[b * out_width + j] = 1.0;
            accumulate(input, ops::sum(ops::mul(out, mask)));
        }
    }
    double total = 0.0;
    for (double v : sq) total += std::sqrt(v);
    return total / batch;
}

double gradient_norm_probe(const MiniUNet& net, const Tensor& x, double sigma, const SkipProfile* profile,
                           ProbeScalarization scalarization, std::span<const int> labels) {
    // Work on a frozen copy so parameter gradients are neither computed nor
    // left behind on the caller's model.
    MiniUNet frozen = net.clone();
    frozen.set_requires_grad(false);
    const std::vector<double> sigmas(x.rank() ? x.dim(0) : 0, sigma);
    return gradient_norm_probe(
        [&](const Tensor& in) { return frozen.forward(in, sigmas, profile, false, labels).denoised; }, x,
        scalarization);
}

std::string to_string(KernelKind k) {
    switch (k) {
        case KernelKind::linear: return "linear";
        case KernelKind::rbf: return "rbf";
        case KernelKind::laplacian: return "laplacian";
        case KernelKind::sigmoid: return "sigmoid";
        case KernelKind::imq: return "imq";
        case KernelKind::polynomial: return "polynomial";
        case KernelKind::cosine: return "cosine";
    }
    return "?";
}

KernelKind parse_kernel_kind(const std::string& text) {
    for (KernelKind k : all_kernel_kinds())
        if (to_string(k) == text) return k;
    throw ConfigError("unknown kernel: " + text);
}

const std::vector<KernelKind>& all_kernel_kinds() {
    static const std::vector<KernelKind> kinds = {KernelKind::linear,  KernelKind::rbf,        KernelKind::laplacian,
                                                  KernelKind::sigmoid, KernelKind::imq,        KernelKind::polynomial,
                                                  KernelKind::cosine};
    return kinds;
}

void KernelSpec::validate() const {
    if (bandwidth && !(*bandwidth > 0.0 && std::isfinite(*bandwidth)))
        throw ConfigError("kernel bandwidth must be positive, got " + format_double(*bandwidth));
    if (degree < 1) throw ConfigError("polynomial degree must be at least 1");
    if (sigmoid_a && !std::isfinite(*sigmoid_a)) throw ConfigError("sigmoid scale must be finite");
    if (!std::isfinite(sigmoid_c) || !std::isfinite(imq_c) || !std::isfinite(coef0))
        throw ConfigError("kernel parameters must be finite");
}

bool KernelSpec::resolved() const {
    if ((kind == KernelKind::rbf || kind == KernelKind::laplacian) && !bandwidth) return false;
    if (kind == KernelKind::sigmoid && !sigmoid_a) return false;
    return true;
}

KernelSpec resolve_kernel(const KernelSpec& spec, std::span<const Tensor> samples) {
    spec.validate();
    KernelSpec out = spec;
    if (out.resolved()) return out;
    if (samples.empty()) throw DimensionError("kernel resolution needs at least one sample set");
    const std::size_t width = row_width(samples[0]);
    for (const auto& s : samples) require_same_width(samples[0], s, "resolve_kernel");
    if (out.kind == KernelKind::sigmoid) {
        out.sigmoid_a = 1.0 / static_cast<double>(width);
        return out;
    }

    std::vector<std::span<const double>> pooled;
    for (const auto& s : samples)
        for (std::size_t i = 0; i < s.dim(0); ++i) pooled.push_back(row(s, i));
    if (pooled.size() < 2) throw DimensionError("median heuristic needs at least two rows");
    const std::size_t stride = (pooled.size() + kMedianHeuristicMaxPoints - 1) / kMedianHeuristicMaxPoints;
    std::vector<std::span<const double>> picked;
    for (std::size_t i = 0; i < pooled.size(); i += stride) picked.push_back(pooled[i]);

    const bool l1 = out.kind == KernelKind::laplacian;
    std::vector<double> dist;
    dist.reserve(picked.size() * (picked.size() - 1) / 2);
    for (std::size_t i = 0; i < picked.size(); ++i)
        for (std::size_t j = i + 1; j < picked.size(); ++j) {
            double d = 0.0;
            for (std::size_t q = 0; q < width; ++q) {
                const double diff = picked[i][q] - picked[j][q];
                d += l1 ? std::abs(diff) : diff * diff;
            }
            dist.push_back(l1 ? d : std::sqrt(d));
        }
    const double bw = median(std::move(dist));
    if (!(bw > 0.0)) throw NumericError("median heuristic gave a zero bandwidth (mostly duplicate samples)");
    out.bandwidth = bw;
    return out;
}

double kernel_value(const KernelSpec& k, std::span<const double> a, std::span<const double> b) {
    if (!k.resolved()) throw ContractError("kernel_value needs a resolved kernel");
    if (a.size() != b.size()) throw DimensionError("kernel arguments differ in length");
    double dot = 0.0, d2 = 0.0, d1 = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        dot += a[i] * b[i];
        d2 += diff * diff;
        d1 += std::abs(diff);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    switch (k.kind) {
        case KernelKind::linear: return dot;
        case KernelKind::rbf: return std::exp(-d2 / (2.0 * *k.bandwidth * *k.bandwidth));
        case KernelKind::laplacian: return std::exp(-d1 / *k.bandwidth);
        case KernelKind::sigmoid: return std::tanh(*k.sigmoid_a * dot + k.sigmoid_c);
        case KernelKind::imq: return 1.0 / std::sqrt(d2 + k.imq_c * k.imq_c);
        case KernelKind::polynomial: return std::pow(dot + k.coef0, k.degree);
        case KernelKind::cosine: return na > 0.0 && nb > 0.0 ? dot / std::sqrt(na * nb) : 0.0;
    }
    return 0.0;
}

double mmd_unbiased(const Tensor& x, const Tensor& y, const KernelSpec& kernel) {
    require_same_width(x, y, "mmd");
    const std::size_t m = x.dim(0), n = y.dim(0);
    if (m < 2 || n < 2) throw DomainError("mmd needs at least two samples per set, got " + std::to_string(m) + " and " +
                                          std::to_string(n));
    const Tensor both[] = {x, y};
    const KernelSpec k = resolve_kernel(kernel, both);
    const BlockSums xx = kernel_block(k, x, x, true);
    const BlockSums yy = kernel_block(k, y, y, true);
    const BlockSums xy = kernel_block(k, x, y, false);
    const double dm = static_cast<double>(m), dn = static_cast<double>(n);
    return (xx.total - xx.diagonal) / (dm * (dm - 1.0)) + (yy.total - yy.diagonal) / (dn * (dn - 1.0)) -
           2.0 * xy.total / (dm * dn);
}

std::map<KernelKind, std::optional<double>> relative_mmd_table(const Tensor& baseline, const Tensor& tuned,
                                                               const Tensor& reference,
                                                               std::span<const KernelSpec> kernels) {
    if (baseline.shape() != tuned.shape() || baseline.shape() != reference.shape())
        throw DimensionError("relative mmd needs equal sample counts and shapes");
    const bool same_as_reference = baseline.to_vector() == reference.to_vector();
    const Tensor all[] = {baseline, tuned, reference};
    std::map<KernelKind, std::optional<double>> out;
    for (const auto& spec : kernels) {
        const KernelSpec k = resolve_kernel(spec, all);
        const double base = mmd_unbiased(baseline, reference, k);
        const auto r0 = row(reference, 0);
        const double scale = std::max(1.0, std::abs(kernel_value(k, r0, r0)));
        if (same_as_reference || !(std::abs(base) > 1e-12 * scale)) {
            out[spec.kind] = std::nullopt;
            continue;
        }
        out[spec.kind] = mmd_unbiased(tuned, reference, k) / base;
    }
    return out;
}

double toy_fid(const Tensor& features_a, const Tensor& features_b, double eps) {
    require_same_width(features_a, features_b, "toy_fid");
    const std::size_t dim = row_width(features_a);
    if (features_a.dim(0) < dim + 1 || features_b.dim(0) < dim + 1)
        throw DomainError("toy_fid needs at least dim+1 = " + std::to_string(dim + 1) + " samples per set");
    auto moments = [&](const Tensor& f) {
        const auto M = as_matrix(f);
        Eigen::VectorXd mu = M.colwise().mean();
        RowMatrix centered = M.rowwise() - mu.transpose();
        Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(M.rows() - 1);
        cov.diagonal().array() += eps;
        return std::pair{mu, cov};
    };
    const auto [mu_a, cov_a] = moments(features_a);
    const auto [mu_b, cov_b] = moments(features_b);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
    const Eigen::VectorXd root_vals = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd root_a = ea.eigenvectors() * root_vals.asDiagonal() * ea.eigenvectors().transpose();
    const Eigen::MatrixXd inner = root_a * cov_b * root_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    return (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
}

double immd(const Tensor& features_a, const Tensor& features_b, const KernelSpec& kernel) {
    return mmd_unbiased(features_a, features_b, kernel);
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("spearman inputs differ in length");
    if (a.size() < 2) throw DomainError("spearman needs at least two points");
    auto ranks = [](std::span<const double> v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) throw DomainError("spearman is undefined for a constant input");
    return sab / std::sqrt(saa * sbb);
}

double spearman_p_value(double r, std::size_t n) {
    if (n < 3) throw DomainError("spearman p-value needs at least three points");
    if (!(std::abs(r) <= 1.0)) throw DomainError("rank correlation must lie in [-1, 1]");
    if (std::abs(r) == 1.0) return 0.0;
    const double df = static_cast<double>(n - 2);
    const double t = std::abs(r) * std::sqrt(df / (1.0 - r * r));
    boost::math::students_t dist(df);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, t));
}

void MetricReport::validate() const {
    auto finite = [](double v, const std::string& what) {
        if (!std::isfinite(v)) throw NumericError("metric " + what + " is not finite");
    };
    for (double p : prop) {
        finite(p, "prop");
        if (p < 0.0) throw NumericError("prop entries must be non-negative");
    }
    finite(avg_prop, "avg_prop");
    finite(gradient_norm, "gradient_norm");
    for (const auto& [key, v] : losses) finite(v, "loss " + key.first);
    for (const auto& [kind, v] : mmd) finite(v, "mmd " + to_string(kind));
    finite(toy_fid, "toy_fid");
    finite(immd, "immd");
}

std::vector<std::vector<std::string>> MetricReport::rows() const {
    std::vector<std::vector<std::string>> out;
    for (std::size_t i = 0; i < prop.size(); ++i) out.push_back({"prop", "layer=" + std::to_string(i), format_double(prop[i])});
    out.push_back({"avg_prop", "", format_double(avg_prop)});
    out.push_back({"gradient_norm", "", format_double(gradient_norm)});
    for (const auto& [key, v] : losses)
        out.push_back({"loss", key.first + ":sigma=" + format_double(key.second), format_double(v)});
    for (const auto& [kind, v] : mmd) out.push_back({"mmd", to_string(kind), format_double(v)});
    out.push_back({"toy_fid", "", format_double(toy_fid)});
    out.push_back({"immd", "", format_double(immd)});
    return out;
}

void MetricReport::write_csv(const std::string& path) const {
    validate();
    CsvTable table{"metric_report", 1, {"name", "qualifier", "value"}, rows()};
    skiptune::write_csv(path, table);
}

std::string MetricReport::text() const {
    std::ostringstream out;
    for (const auto& r : rows()) out << r[0] << (r[1].empty() ? "" : "[" + r[1] + "]") << " = " << r[2] << '\n';
    return out.str();
}

}  // namespace skiptune
