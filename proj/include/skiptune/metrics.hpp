#pragma once

// Measurements: skip-norm proportions, the gradient-norm probe, MMD two-sample
// estimates, and Fréchet distance / MMD in classifier feature space.

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "skiptune/tensor.hpp"
#include "skiptune/unet.hpp"

namespace skiptune {

struct PropRatios {
    std::vector<double> ratios;  // bottom connection first
    double average = 0.0;
};

// ‖d_i‖ / ‖u_i‖ per tap. A tap with u_norm == 0 is a NumericError.
PropRatios prop_ratios(std::span<const SkipTap> taps);

enum class ProbeScalarization { output_sum, frobenius };

std::string to_string(ProbeScalarization s);
ProbeScalarization parse_probe_scalarization(const std::string& text);

// Mean over the batch of the l2 norm of d(sum of item outputs)/dx, or of the
// per-item Jacobian Frobenius norm. `fn` must map [B, ...] to [B, ...] with
// items independent. Requires grad mode (ContractError otherwise).
double gradient_norm_probe(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                           ProbeScalarization scalarization = ProbeScalarization::output_sum);

// Probe of the preconditioned denoiser output at a single sigma.
double gradient_norm_probe(const MiniUNet& net, const Tensor& x, double sigma, const SkipProfile* profile = nullptr,
                           ProbeScalarization scalarization = ProbeScalarization::output_sum,
                           std::span<const int> labels = {});

enum class KernelKind { linear, rbf, laplacian, sigmoid, imq, polynomial, cosine };

std::string to_string(KernelKind k);
KernelKind parse_kernel_kind(const std::string& text);
const std::vector<KernelKind>& all_kernel_kinds();

// rbf: exp(-‖x-y‖² / (2 bw²)); laplacian: exp(-‖x-y‖₁ / bw);
// sigmoid: tanh(a <x,y> + c); imq: 1 / sqrt(‖x-y‖² + c²);
// polynomial: (<x,y> + coef0)^degree; cosine: <x,y> / (‖x‖‖y‖), 0 if either is 0.
// Unset bandwidth means median heuristic; unset sigmoid_a means 1/dim.
struct KernelSpec {
    KernelKind kind = KernelKind::rbf;
    std::optional<double> bandwidth;
    std::optional<double> sigmoid_a;
    double sigmoid_c = 0.0;
    double imq_c = 1.0;
    int degree = 3;
    double coef0 = 1.0;

    void validate() const;
    bool resolved() const;
};

inline constexpr std::size_t kMedianHeuristicMaxPoints = 1000;

// Fills unset parameters from the pooled rows of the given sample sets. The
// median is taken over pairwise distances of at most 1000 evenly strided rows.
KernelSpec resolve_kernel(const KernelSpec& spec, std::span<const Tensor> samples);

// Samples are [N, ...] with one row per item.
double kernel_value(const KernelSpec& resolved, std::span<const double> a, std::span<const double> b);

// Unbiased MMD² estimate; may be negative. Needs at least two rows in each set.
double mmd_unbiased(const Tensor& x, const Tensor& y, const KernelSpec& kernel);

// Per kernel: mmd(tuned, reference) / mmd(baseline, reference), with the
// kernel resolved once on all three sets. nullopt when the baseline distance
// is degenerate (reference equal to baseline, or |mmd| at rounding level).
std::map<KernelKind, std::optional<double>> relative_mmd_table(const Tensor& baseline, const Tensor& tuned,
                                                               const Tensor& reference,
                                                               std::span<const KernelSpec> kernels);

inline constexpr double kFrechetEps = 1e-6;

// ‖μa-μb‖² + tr(Σa + Σb - 2 (Σa Σb)^{1/2}) with eps·I added to both covariances.
double toy_fid(const Tensor& features_a, const Tensor& features_b, double eps = kFrechetEps);
double immd(const Tensor& features_a, const Tensor& features_b, const KernelSpec& kernel);

// Rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);
// Two-sided p-value for a rank correlation r over n points, from the
// t approximation t = r sqrt((n - 2) / (1 - r^2)) with n - 2 degrees of freedom.
double spearman_p_value(double r, std::size_t n);

struct MetricReport {
    std::vector<double> prop;
    double avg_prop = 0.0;
    double gradient_norm = 0.0;
    std::map<std::pair<std::string, double>, double> losses;  // (space, sigma)
    std::map<KernelKind, double> mmd;
    double toy_fid = 0.0;
    double immd = 0.0;

    void validate() const;
    // Rows of (name, qualifier, value).
    std::vector<std::vector<std::string>> rows() const;
    void write_csv(const std::string& path) const;
    std::string text() const;
};

}  // namespace skiptune
