#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "doctest.h"
#include "gradcheck.hpp"
#include "skiptune/csv.hpp"
#include "skiptune/errors.hpp"
#include "skiptune/metrics.hpp"
#include "toy_config.hpp"

using namespace skiptune;

namespace {

// Straight double-sum estimator with kernels written out independently.
double brute_kernel(const KernelSpec& k, const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    auto dot = [&](const std::vector<double>& u, const std::vector<double>& v) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += u[i] * v[i];
        return s;
    };
    double sq = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sq += (a[i] - b[i]) * (a[i] - b[i]);
        l1 += std::abs(a[i] - b[i]);
    }
    switch (k.kind) {
        case KernelKind::linear: return dot(a, b);
        case KernelKind::rbf: return std::exp(-0.5 * sq / (*k.bandwidth * *k.bandwidth));
        case KernelKind::laplacian: return std::exp(-l1 / *k.bandwidth);
        case KernelKind::sigmoid: return std::tanh(*k.sigmoid_a * dot(a, b) + k.sigmoid_c);
        case KernelKind::imq: return std::pow(sq + k.imq_c * k.imq_c, -0.5);
        case KernelKind::polynomial: {
            double p = 1.0;
            for (int d = 0; d < k.degree; ++d) p *= dot(a, b) + k.coef0;
            return p;
        }
        case KernelKind::cosine: {
            const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
            return na == 0.0 || nb == 0.0 ? 0.0 : dot(a, b) / (na * nb);
        }
    }
    return 0.0;
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
    std::vector<std::vector<double>> out;
    const std::size_t w = t.numel() / t.dim(0);
    for (std::size_t i = 0; i < t.dim(0); ++i) out.emplace_back(t.data().begin() + i * w, t.data().begin() + (i + 1) * w);
    return out;
}

double brute_mmd(const Tensor& x, const Tensor& y, const KernelSpec& k) {
    const auto X = rows_of(x), Y = rows_of(y);
    const double m = X.size(), n = Y.size();
    double xx = 0.0, yy = 0.0, xy = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i)
        for (std::size_t j = 0; j < X.size(); ++j)
            if (i != j) xx += brute_kernel(k, X[i], X[j]);
    for (std::size_t i = 0; i < Y.size(); ++i)
        for (std::size_t j = 0; j < Y.size(); ++j)
            if (i != j) yy += brute_kernel(k, Y[i], Y[j]);
    for (const auto& a : X)
        for (const auto& b : Y) xy += brute_kernel(k, a, b);
    return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2.0 * xy / (m * n);
}

KernelSpec explicit_kernel(KernelKind kind) {
    KernelSpec k;
    k.kind = kind;
    k.bandwidth = 1.7;
    k.sigmoid_a = 0.3;
    k.sigmoid_c = 0.1;
    k.imq_c = 1.2;
    k.degree = 3;
    k.coef0 = 0.5;
    return k;
}

// Principal square root by the Denman-Beavers iteration; works for the
// non-symmetric product of two SPD matrices.
double trace_sqrt_product(const Eigen::Matrix2d& a, const Eigen::Matrix2d& b) {
    Eigen::Matrix2d y = a * b, z = Eigen::Matrix2d::Identity();
    for (int it = 0; it < 100; ++it) {
        const Eigen::Matrix2d yn = 0.5 * (y + z.inverse());
        const Eigen::Matrix2d zn = 0.5 * (z + y.inverse());
        y = yn;
        z = zn;
    }
    return y.trace();
}

}  // namespace

TEST_CASE("prop ratios") {
    std::vector<SkipTap> taps = {{0, 0.0, 2.0}, {1, 0.0, 3.0}};
    auto zero = prop_ratios(taps);
    CHECK(zero.ratios == std::vector<double>{0.0, 0.0});
    CHECK(zero.average == 0.0);

    taps = {{0, std::hypot(3.0, 4.0), 5.0}, {1, 1.0, 4.0}};
    auto r = prop_ratios(taps);
    CHECK(r.ratios[0] == 1.0);
    CHECK(r.ratios[1] == 0.25);
    CHECK(r.average == 0.625);

    taps[1].u_norm = 0.0;
    CHECK_THROWS_AS(prop_ratios(taps), NumericError);
}

TEST_CASE("gradient probe on closed-form maps") {
    std::mt19937_64 rng(3);
    auto x = testutil::randn({4, 5}, rng);
    auto identity = [](const Tensor& t) { return t; };
    CHECK(gradient_norm_probe(identity, x) == doctest::Approx(std::sqrt(5.0)).epsilon(1e-14));
    CHECK(gradient_norm_probe(identity, x, ProbeScalarization::frobenius) ==
          doctest::Approx(std::sqrt(5.0)).epsilon(1e-14));

    // U(x) = A x per item, so d(sum U)/dx = 1^T A.
    const std::vector<double> a = {1.0, 2.0, 0.0, -1.0, 0.5, 3.0};  // A is 2x3
    auto at = Tensor::from({3, 2}, {1.0, -1.0, 2.0, 0.5, 0.0, 3.0});
    auto linear_map = [&](const Tensor& t) { return ops::matmul(t, at); };
    auto x3 = testutil::randn({2, 3}, rng);
    const double col_sum = std::sqrt(0.0 * 0.0 + 2.5 * 2.5 + 3.0 * 3.0);
    CHECK(gradient_norm_probe(linear_map, x3) == doctest::Approx(col_sum).epsilon(1e-14));
    double fro = 0.0;
    for (double v : a) fro += v * v;
    CHECK(gradient_norm_probe(linear_map, x3, ProbeScalarization::frobenius) ==
          doctest::Approx(std::sqrt(fro)).epsilon(1e-14));

    NoGradGuard guard;
    CHECK_THROWS_AS(gradient_norm_probe(identity, x), ContractError);
}

TEST_CASE("gradient probe on the network leaves parameters untouched") {
    MiniUNet net(testutil::toy_unet(), 8);
    net.set_requires_grad(true);
    std::mt19937_64 rng(5);
    auto x = testutil::randn({2, 1, 8, 8}, rng);
    const double g = gradient_norm_probe(net, x, 2.0);
    CHECK(std::isfinite(g));
    CHECK(g > 0.0);
    for (const auto& p : net.parameters()) CHECK_FALSE(p.value.has_grad());
    // Items are independent, so the batch mean equals the mean of single-item probes.
    const double g0 = gradient_norm_probe(net, Tensor::from({1, 1, 8, 8}, {x.data().begin(), x.data().begin() + 64}), 2.0);
    const double g1 = gradient_norm_probe(net, Tensor::from({1, 1, 8, 8}, {x.data().begin() + 64, x.data().end()}), 2.0);
    CHECK(g == doctest::Approx(0.5 * (g0 + g1)).epsilon(1e-12));
}

TEST_CASE("mmd hand example") {
    auto x = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto y = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 1.0});
    KernelSpec k;
    k.kind = KernelKind::linear;
    CHECK(mmd_unbiased(x, y, k) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK_THROWS_AS(mmd_unbiased(Tensor::from({1, 2}, {0.0, 0.0}), y, k), DomainError);
}

TEST_CASE("mmd matches the brute-force double sum for every kernel") {
    std::mt19937_64 rng(11);
    for (KernelKind kind : all_kernel_kinds()) {
        for (std::size_t m : {2u, 5u, 16u}) {
            for (std::size_t n : {2u, 9u, 16u}) {
                auto x = testutil::randn({m, 3}, rng);
                auto y = testutil::randn({n, 3}, rng);
                if (kind == KernelKind::cosine) y.mutable_data()[0] = y.mutable_data()[1] = y.mutable_data()[2] = 0.0;
                const KernelSpec k = explicit_kernel(kind);
                const double fast = mmd_unbiased(x, y, k), slow = brute_mmd(x, y, k);
                INFO(to_string(kind), " m=", m, " n=", n);
                CHECK(std::abs(fast - slow) <= 1e-12 * std::max(1.0, std::abs(slow)));
                CHECK(std::abs(mmd_unbiased(y, x, k) - fast) <= 1e-12 * std::max(1.0, std::abs(fast)));
            }
        }
        // Identical sets in identical order.
        auto x = testutil::randn({7, 2}, rng);
        const KernelSpec k = explicit_kernel(kind);
        CHECK(std::abs(mmd_unbiased(x, x, k) - brute_mmd(x, x, k)) <= 1e-12);
    }
}

TEST_CASE("median heuristic uses the pooled pairwise median") {
    std::mt19937_64 rng(2);
    auto x = testutil::randn({6, 2}, rng);
    auto y = testutil::randn({5, 2}, rng);
    const Tensor sets[] = {x, y};
    std::vector<std::vector<double>> pooled = rows_of(x);
    for (auto& r : rows_of(y)) pooled.push_back(r);
    std::vector<double> l2, l1;
    for (std::size_t i = 0; i < pooled.size(); ++i)
        for (std::size_t j = i + 1; j < pooled.size(); ++j) {
            l2.push_back(std::hypot(pooled[i][0] - pooled[j][0], pooled[i][1] - pooled[j][1]));
            l1.push_back(std::abs(pooled[i][0] - pooled[j][0]) + std::abs(pooled[i][1] - pooled[j][1]));
        }
    std::sort(l2.begin(), l2.end());
    std::sort(l1.begin(), l1.end());
    // 55 pairs: the median is the 28th value.
    KernelSpec rbf;
    CHECK(*resolve_kernel(rbf, sets).bandwidth == l2[27]);
    KernelSpec lap;
    lap.kind = KernelKind::laplacian;
    CHECK(*resolve_kernel(lap, sets).bandwidth == l1[27]);
    KernelSpec sig;
    sig.kind = KernelKind::sigmoid;
    CHECK(*resolve_kernel(sig, sets).sigmoid_a == 0.5);

    KernelSpec bad;
    bad.bandwidth = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = KernelSpec{};
    bad.kind = KernelKind::polynomial;
    bad.degree = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("mmd is unbiased under the null") {
    std::mt19937_64 rng(21);
    std::vector<double> est;
    KernelSpec k;
    k.bandwidth = 1.0;
    for (int r = 0; r < 200; ++r) est.push_back(mmd_unbiased(testutil::randn({40, 2}, rng), testutil::randn({40, 2}, rng), k));
    const double mean = std::accumulate(est.begin(), est.end(), 0.0) / est.size();
    double var = 0.0;
    for (double e : est) var += (e - mean) * (e - mean);
    const double se = std::sqrt(var / (est.size() - 1) / est.size());
    CHECK(std::abs(mean) < 3.0 * se);
}

TEST_CASE("mmd of two same-distribution samples sits inside the permutation null") {
    constexpr std::size_t m = 2000;
    std::mt19937_64 rng(31);
    auto x = testutil::randn({m, 2}, rng);
    auto y = testutil::randn({m, 2}, rng);
    const Tensor sets[] = {x, y};
    const KernelSpec k = resolve_kernel(KernelSpec{}, sets);
    const double observed = mmd_unbiased(x, y, k);

    // Pooled Gram matrix once, then relabel.
    auto pooled = rows_of(x);
    for (auto& r : rows_of(y)) pooled.push_back(r);
    const std::size_t n = pooled.size();
    std::vector<float> gram(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) gram[i * n + j] = static_cast<float>(brute_kernel(k, pooled[i], pooled[j]));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<char> in_x(n);
    std::vector<double> null;
    for (int p = 0; p < 200; ++p) {
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t i = 0; i < n; ++i) in_x[perm[i]] = i < m;
        double xx = 0.0, yy = 0.0, xy = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double v = gram[i * n + j];
                if (in_x[i] && in_x[j]) {
                    if (i != j) xx += v;
                } else if (!in_x[i] && !in_x[j]) {
                    if (i != j) yy += v;
                } else if (in_x[i]) {
                    xy += v;
                }
            }
        const double dm = m;
        null.push_back(xx / (dm * (dm - 1)) + yy / (dm * (dm - 1)) - 2.0 * xy / (dm * dm));
    }
    for (double& v : null) v = std::abs(v);
    std::sort(null.begin(), null.end());
    const double q99 = null[static_cast<std::size_t>(0.99 * null.size())];
    MESSAGE("observed ", observed, " null q99 ", q99);
    CHECK(std::abs(observed) < q99);
}

TEST_CASE("relative mmd table") {
    std::mt19937_64 rng(41);
    auto base = testutil::randn({30, 2}, rng);
    auto ref = testutil::randn({30, 2}, rng);
    std::vector<KernelSpec> kernels;
    for (KernelKind kind : all_kernel_kinds()) {
        KernelSpec k;
        k.kind = kind;
        kernels.push_back(k);
    }
    auto same = relative_mmd_table(base, base, ref, kernels);
    CHECK(same.size() == 7);
    for (const auto& [kind, ratio] : same) {
        REQUIRE(ratio.has_value());
        CHECK(*ratio == doctest::Approx(1.0).epsilon(1e-15));
    }
    auto tuned = testutil::randn({30, 2}, rng);
    for (const auto& [kind, ratio] : relative_mmd_table(base, tuned, base, kernels)) CHECK_FALSE(ratio.has_value());
    CHECK_THROWS_AS(relative_mmd_table(base, testutil::randn({29, 2}, rng), ref, kernels), DimensionError);
}

TEST_CASE("toy fid closed forms") {
    std::mt19937_64 rng(51);
    auto a = testutil::randn({40, 3}, rng);
    CHECK(std::abs(toy_fid(a, a)) <= 1e-8);
    CHECK(std::abs(immd(a, a, explicit_kernel(KernelKind::rbf))) < 0.1);

    // A shift leaves the sample covariance unchanged.
    const std::vector<double> delta = {0.5, -1.0, 2.0};
    auto b = a.to_vector();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += delta[i % 3];
    CHECK(toy_fid(a, Tensor::from({40, 3}, b)) == doctest::Approx(5.25).epsilon(1e-10));

    CHECK_THROWS_AS(toy_fid(testutil::randn({3, 3}, rng), a), DomainError);
}

TEST_CASE("toy fid matches a direct matrix square root") {
    std::mt19937_64 rng(61);
    for (int trial = 0; trial < 5; ++trial) {
        auto a = testutil::randn({25, 2}, rng);
        auto bv = testutil::randn({30, 2}, rng).to_vector();
        for (std::size_t i = 0; i < bv.size(); i += 2) {
            bv[i] = 1.5 * bv[i] + 0.7 * bv[i + 1] + 0.3;
            bv[i + 1] = 0.4 * bv[i + 1] - 1.0;
        }
        auto b = Tensor::from({30, 2}, bv);
        auto stats = [](const Tensor& t) {
            const auto rows = rows_of(t);
            Eigen::Vector2d mu = Eigen::Vector2d::Zero();
            for (const auto& r : rows) mu += Eigen::Vector2d(r[0], r[1]);
            mu /= rows.size();
            Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
            for (const auto& r : rows) {
                const Eigen::Vector2d c = Eigen::Vector2d(r[0], r[1]) - mu;
                cov += c * c.transpose();
            }
            cov /= rows.size() - 1.0;
            cov += kFrechetEps * Eigen::Matrix2d::Identity();
            return std::pair{mu, cov};
        };
        const auto [ma, ca] = stats(a);
        const auto [mb, cb] = stats(b);
        const double oracle = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(ca, cb);
        CHECK(std::abs(toy_fid(a, b) - oracle) <= 1e-8);
    }
}

TEST_CASE("spearman") {
    const std::vector<double> up = {1, 2, 3, 4}, down = {9, 7, 4, 1};
    CHECK(spearman(up, up) == doctest::Approx(1.0));
    CHECK(spearman(up, down) == doctest::Approx(-1.0));
    const std::vector<double> a = {1, 2, 2, 3, 5, 4}, b = {2, 1, 4, 4, 6, 3};
    CHECK(spearman(a, b) == doctest::Approx(0.66176470588235292).epsilon(1e-14));
    // scipy's spearmanr p-value uses the same t approximation.
    CHECK(spearman_p_value(spearman(a, b), a.size()) == doctest::Approx(0.15225708579279451).epsilon(1e-10));
    CHECK(spearman_p_value(-1.0, 6) == 0.0);
    CHECK_THROWS_AS(spearman_p_value(0.5, 2), DomainError);
    const std::vector<double> flat = {1, 1, 1, 1};
    CHECK_THROWS_AS(spearman(up, flat), DomainError);
}

TEST_CASE("metric report round trip") {
    MetricReport r;
    r.prop = {0.25, 0.5};
    r.avg_prop = 0.375;
    r.gradient_norm = 0.1219;
    r.losses[{"pixel", 0.5}] = 1.0 / 3.0;
    r.mmd[KernelKind::imq] = -2e-5;
    r.toy_fid = 0.7;
    r.immd = 0.01;
    const auto path = (std::filesystem::temp_directory_path() / "skiptune_metric_report.csv").string();
    r.write_csv(path);
    auto table = read_csv(path);
    CHECK(table.schema == "metric_report");
    CHECK(table.version == 1);
    CHECK(table.header == std::vector<std::string>{"name", "qualifier", "value"});
    CHECK(table.rows.size() == r.rows().size());
    bool found = false;
    for (const auto& row : table.rows)
        if (row[0] == "loss") {
            CHECK(row[1] == "pixel:sigma=0.5");
            CHECK(std::stod(row[2]) == 1.0 / 3.0);
            found = true;
        }
    CHECK(found);
    CHECK(r.text().find("mmd[imq] = -2.0000000000000002e-05") != std::string::npos);
    std::filesystem::remove(path);

    r.toy_fid = std::nan("");
    CHECK_THROWS_AS(r.validate(), NumericError);
    r.toy_fid = 0.0;
    r.prop[0] = -1.0;
    CHECK_THROWS_AS(r.validate(), NumericError);
}

TEST_CASE("kernel and scalarization names round trip") {
    for (KernelKind k : all_kernel_kinds()) CHECK(parse_kernel_kind(to_string(k)) == k);
    CHECK_THROWS_AS(parse_kernel_kind("gauss"), ConfigError);
    CHECK(parse_probe_scalarization("frobenius") == ProbeScalarization::frobenius);
    CHECK_THROWS_AS(parse_probe_scalarization("max"), ConfigError);
}
