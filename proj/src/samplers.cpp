#include "skiptune/samplers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

#include "skiptune/errors.hpp"

namespace skiptune {

namespace {

using Vec = std::vector<double>;

Tensor evaluate(const BatchDenoiser& denoiser, const Vec& x, const Shape& shape, double sigma, std::size_t& nfe) {
    ++nfe;
    Tensor out = denoiser(Tensor::from(shape, x), sigma);
    if (out.shape() != shape) throw DimensionError("denoiser returned shape " + shape_str(out.shape()));
    for (double v : out.data())
        if (!std::isfinite(v)) throw NumericError("denoiser produced a non-finite value at sigma " + std::to_string(sigma));
    return out;
}

Vec slope(const Vec& x, const Tensor& x0_hat, double sigma) {
    Vec d(x.size());
    auto m = x0_hat.data();
    for (std::size_t i = 0; i < x.size(); ++i) d[i] = (x[i] - m[i]) / sigma;
    return d;
}

void record_state(Trajectory& traj, const SamplerConfig& cfg, double sigma, const Vec& x, const Shape& shape) {
    traj.sigmas.push_back(sigma);
    if (cfg.record) traj.states.push_back(Tensor::from(shape, x));
}

// Heun/Euler over an arbitrary sigma sequence. A step that ends at sigma 0 is
// always an Euler step.
Trajectory integrate_explicit(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const Vec& sigmas, Vec x,
                              const Shape& shape) {
    Trajectory traj;
    record_state(traj, cfg, sigmas[0], x, shape);
    for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
        const double s = sigmas[i], t = sigmas[i + 1];
        const double h = t - s;
        const Vec d = slope(x, evaluate(denoiser, x, shape, s, traj.nfe), s);
        if (cfg.solver == Solver::euler || t == 0.0) {
            for (std::size_t j = 0; j < x.size(); ++j) x[j] = x[j] + h * d[j];
        } else {
            Vec xp(x.size());
            for (std::size_t j = 0; j < x.size(); ++j) xp[j] = x[j] + h * d[j];
            const Vec dp = slope(xp, evaluate(denoiser, xp, shape, t, traj.nfe), t);
            for (std::size_t j = 0; j < x.size(); ++j) x[j] = x[j] + h * (0.5 * d[j] + 0.5 * dp[j]);
        }
        record_state(traj, cfg, t, x, shape);
    }
    traj.final = Tensor::from(shape, std::move(x));
    return traj;
}

// Multistep predictor-corrector over data prediction in lambda = -log(sigma),
// B(h) = h variant. The corrector reuses the model evaluation that feeds the
// next step, so it costs no extra evaluations.
Trajectory integrate_unipc(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const Vec& sigmas, Vec x,
                           const Shape& shape) {
    Trajectory traj;
    record_state(traj, cfg, sigmas[0], x, shape);
    const std::size_t steps = sigmas.size() - 1;
    std::vector<Vec> models;
    std::vector<double> lambdas;
    {
        Tensor m = evaluate(denoiser, x, shape, sigmas[0], traj.nfe);
        models.emplace_back(m.data().begin(), m.data().end());
        lambdas.push_back(-std::log(sigmas[0]));
    }
    for (std::size_t i = 0; i < steps; ++i) {
        const double s = sigmas[i], t = sigmas[i + 1];
        const Vec& m0 = models.back();
        if (t == 0.0) {
            x = m0;
            record_state(traj, cfg, t, x, shape);
            break;
        }
        const int order = static_cast<int>(std::min<std::size_t>(cfg.unipc_order, models.size()));
        const double lambda_t = -std::log(t);
        const double h = lambda_t - lambdas.back();

        std::vector<double> rks;
        std::vector<Vec> d1s;
        for (int j = 1; j < order; ++j) {
            const Vec& mj = models[models.size() - 1 - j];
            const double rk = (lambdas[lambdas.size() - 1 - j] - lambdas.back()) / h;
            Vec d1(x.size());
            for (std::size_t q = 0; q < x.size(); ++q) d1[q] = (mj[q] - m0[q]) / rk;
            rks.push_back(rk);
            d1s.push_back(std::move(d1));
        }
        rks.push_back(1.0);

        const double hh = -h;
        const double h_phi_1 = std::expm1(hh);
        double h_phi_k = h_phi_1 / hh - 1.0;
        double factorial = 1.0;
        const double b_h = hh;
        Eigen::MatrixXd R(order, order);
        Eigen::VectorXd b(order);
        for (int p = 1; p <= order; ++p) {
            for (int j = 0; j < order; ++j) R(p - 1, j) = std::pow(rks[j], p - 1);
            b(p - 1) = h_phi_k * factorial / b_h;
            factorial *= p + 1;
            h_phi_k = h_phi_k / hh - 1.0 / factorial;
        }

        std::vector<double> rhos_p;
        if (order == 2) {
            rhos_p = {0.5};
        } else if (order > 2) {
            Eigen::VectorXd r = R.topLeftCorner(order - 1, order - 1).partialPivLu().solve(b.head(order - 1));
            rhos_p.assign(r.data(), r.data() + r.size());
        }
        std::vector<double> rhos_c;
        if (order == 1) {
            rhos_c = {0.5};
        } else {
            Eigen::VectorXd r = R.partialPivLu().solve(b);
            rhos_c.assign(r.data(), r.data() + r.size());
        }

        Vec base(x.size());
        for (std::size_t q = 0; q < x.size(); ++q) base[q] = t / s * x[q] - h_phi_1 * m0[q];
        Vec xt = base;
        for (std::size_t j = 0; j < d1s.size(); ++j)
            for (std::size_t q = 0; q < x.size(); ++q) xt[q] -= b_h * rhos_p[j] * d1s[j][q];

        const bool last = i + 1 == steps;
        if (!last) {
            Tensor mt = evaluate(denoiser, xt, shape, t, traj.nfe);
            Vec model_t(mt.data().begin(), mt.data().end());
            for (std::size_t q = 0; q < x.size(); ++q) {
                double corr = 0.0;
                for (std::size_t j = 0; j < d1s.size(); ++j) corr += rhos_c[j] * d1s[j][q];
                xt[q] = base[q] - b_h * (corr + rhos_c.back() * (model_t[q] - m0[q]));
            }
            models.push_back(std::move(model_t));
            lambdas.push_back(lambda_t);
            if (models.size() > static_cast<std::size_t>(cfg.unipc_order)) {
                models.erase(models.begin());
                lambdas.erase(lambdas.begin());
            }
        }
        x = std::move(xt);
        record_state(traj, cfg, t, x, shape);
    }
    traj.final = Tensor::from(shape, std::move(x));
    return traj;
}

Trajectory integrate(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const Vec& sigmas, Vec x,
                     const Shape& shape) {
    if (cfg.solver == Solver::unipc) return integrate_unipc(denoiser, cfg, sigmas, std::move(x), shape);
    return integrate_explicit(denoiser, cfg, sigmas, std::move(x), shape);
}

}  // namespace

std::string to_string(Solver solver) {
    switch (solver) {
        case Solver::euler: return "euler";
        case Solver::heun: return "heun";
        case Solver::unipc: return "unipc";
    }
    return "?";
}

Solver parse_solver(const std::string& text) {
    if (text == "euler") return Solver::euler;
    if (text == "heun") return Solver::heun;
    if (text == "unipc") return Solver::unipc;
    throw ConfigError("unknown solver '" + text + "'");
}

ChurnSchedule ChurnSchedule::constant(double tau) {
    ChurnSchedule c;
    c.fallback = tau;
    return c;
}

double ChurnSchedule::tau(double sigma) const {
    for (const auto& s : segments)
        if (sigma > s.low && sigma <= s.high) return s.tau;
    return fallback;
}

bool ChurnSchedule::is_zero() const {
    if (fallback != 0.0) return false;
    for (const auto& s : segments)
        if (s.tau != 0.0) return false;
    return true;
}

void ChurnSchedule::validate() const {
    if (!(fallback >= 0.0) || !std::isfinite(fallback)) throw ConfigError("churn must be finite and >= 0");
    for (const auto& s : segments)
        if (!(s.tau >= 0.0) || !std::isfinite(s.tau) || !(s.high > s.low))
            throw ConfigError("churn segments need low < high and finite tau >= 0");
}

void SamplerConfig::validate() const {
    if (steps < 1) throw ConfigError("sampler needs at least one step");
    if (unipc_order != 2 && unipc_order != 3) throw ConfigError("unipc order must be 2 or 3");
    churn.validate();
}

BatchDenoiser make_batch_denoiser(const MiniUNet& net, const SkipProfile* profile, std::vector<int> labels) {
    return [&net, profile, labels = std::move(labels)](const Tensor& x, double sigma) {
        NoGradGuard ng;
        return net.denoise(x, sigma, profile, labels);
    };
}

Tensor score_from_denoiser(const Tensor& x, double sigma, const Tensor& x0_hat) {
    if (!(sigma > 0.0)) throw DomainError("score: sigma must be positive");
    return ops::mul_scalar(ops::sub(x0_hat, x), 1.0 / (sigma * sigma));
}

Tensor item_noise(std::size_t count, const Shape& item_shape, std::uint64_t seed, std::size_t first_index,
                  std::uint64_t stream) {
    const std::size_t item = shape_numel(item_shape);
    std::vector<double> v(count * item);
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t i = 0; i < count; ++i) {
        std::seed_seq seq{seed, static_cast<std::uint64_t>(first_index + i), stream};
        std::mt19937_64 rng(seq);
        n.reset();  // drop the cached second value so items stay independent of batching
        for (std::size_t j = 0; j < item; ++j) v[i * item + j] = n(rng);
    }
    Shape shape{count};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    return Tensor::from(shape, std::move(v));
}

Trajectory sample_ode(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                      const Tensor& unit_noise) {
    cfg.validate();
    const auto sigmas = sampling_sigmas(schedule, cfg.steps);
    Vec x(unit_noise.numel());
    auto z = unit_noise.data();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = z[i] * schedule.sigma_max;
    if (unit_noise.numel() == 0) {
        Trajectory t;
        t.final = unit_noise.detach();
        return t;
    }
    return integrate(denoiser, cfg, sigmas, std::move(x), unit_noise.shape());
}

Trajectory sample_stochastic(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                             const Tensor& unit_noise, std::size_t first_index) {
    cfg.validate();
    const auto sigmas = sampling_sigmas(schedule, cfg.steps);
    const Shape& shape = unit_noise.shape();
    Trajectory traj;
    Vec x(unit_noise.numel());
    auto z = unit_noise.data();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = z[i] * schedule.sigma_max;
    if (x.empty()) {
        traj.final = unit_noise.detach();
        return traj;
    }
    const std::size_t batch = shape[0];
    const std::size_t item = x.size() / batch;
    std::vector<std::mt19937_64> rngs;
    for (std::size_t b = 0; b < batch; ++b) {
        std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(first_index + b), std::uint64_t{1}};
        rngs.emplace_back(seq);
    }
    // One distribution per item: a shared one would hand a cached value from
    // item b to item b + 1.
    std::vector<std::normal_distribution<double>> normals(batch, std::normal_distribution<double>(0.0, 1.0));
    record_state(traj, cfg, sigmas[0], x, shape);
    for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
        const double s = sigmas[i], t = sigmas[i + 1];
        const double h = t - s;
        const Vec d = slope(x, evaluate(denoiser, x, shape, s, traj.nfe), s);
        const double tau = t == 0.0 ? 0.0 : cfg.churn.tau(s);
        const double step = (1.0 + tau * tau) * h;
        for (std::size_t j = 0; j < x.size(); ++j) x[j] = x[j] + step * d[j];
        if (tau != 0.0) {
            const double amp = tau * std::sqrt(2.0 * s * (s - t));
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t j = 0; j < item; ++j) x[b * item + j] += amp * normals[b](rngs[b]);
        }
        record_state(traj, cfg, t, x, shape);
    }
    traj.final = Tensor::from(shape, std::move(x));
    return traj;
}

Trajectory invert(const BatchDenoiser& denoiser, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                  const Tensor& data) {
    cfg.validate();
    auto sigmas = karras_grid(schedule, cfg.steps + 1);
    std::reverse(sigmas.begin(), sigmas.end());
    if (data.numel() == 0) {
        Trajectory t;
        t.final = data.detach();
        return t;
    }
    auto traj = integrate(denoiser, cfg, sigmas, Vec(data.data().begin(), data.data().end()), data.shape());
    traj.final = ops::mul_scalar(traj.final, 1.0 / schedule.sigma_max);
    return traj;
}

}  // namespace skiptune
