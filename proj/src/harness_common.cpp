#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <random>

#include "json.hpp"
#include "skiptune/csv.hpp"
#include "skiptune/errors.hpp"
#include "skiptune/harness.hpp"
#include "skiptune/optim.hpp"

namespace skiptune {

std::string git_blob_sha1(std::span<const unsigned char> bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw IoError("sha1: cannot allocate digest context");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, digest, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw IoError("sha1: digest failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", digest[i]);
        hex += buf;
    }
    return hex;
}

std::string git_blob_sha1_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return git_blob_sha1(bytes);
}

std::string RunRecord::to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["spec_hash"] = spec_hash;
    j["checkpoint_hash"] = checkpoint_hash;
    j["classifier_hash"] = classifier_hash;
    j["seed"] = seed;
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["outputs"] = outputs;
    j["summary"] = summary;
    return j.dump(2) + "\n";
}

UNetConfig unet_config(const ExperimentConfig& cfg) {
    UNetConfig c;
    c.input_channels = 1;
    c.image_size = cfg.count("data", "image_size");
    c.base_channels = cfg.count("model", "base_channels");
    c.depth = cfg.count("model", "depth");
    c.blocks_per_resolution = cfg.count("model", "blocks_per_resolution");
    c.groupnorm_groups = cfg.count("model", "groupnorm_groups");
    c.time_embedding_dim = cfg.count("model", "time_embedding_dim");
    c.num_classes = cfg.count("model", "num_classes");
    c.group_alignment = parse_group_alignment(cfg.get("model", "group_alignment"));
    c.sigma_data = cfg.real("model", "sigma_data");
    c.sigma_min = cfg.real("model", "sigma_min");
    c.sigma_max = cfg.real("model", "sigma_max");
    c.validate();
    return c;
}

TrainConfig train_config(const ExperimentConfig& cfg) {
    TrainConfig t;
    t.steps = cfg.count("train", "steps");
    t.batch_size = cfg.count("train", "batch");
    t.lr = cfg.real("train", "lr");
    t.warmup_steps = cfg.count("train", "warmup");
    t.seed = cfg.u64("run", "seed");
    t.loss.weighting = parse_weighting(cfg.get("train", "weighting"));
    t.loss.sigma_data = cfg.real("model", "sigma_data");
    t.schedule = NoiseSchedule{cfg.real("model", "sigma_min"), cfg.real("model", "sigma_max"), 7.0};
    t.schedule.validate();
    t.class_conditional = cfg.count("model", "num_classes") > 0;
    if (t.batch_size == 0) throw ConfigError("[train] batch must be positive");
    if (!(t.lr > 0.0)) throw ConfigError("[train] lr must be positive");
    return t;
}

SamplerConfig sampler_config(const ExperimentConfig& cfg) {
    SamplerConfig s;
    s.solver = parse_solver(cfg.get("sampler", "solver"));
    s.steps = cfg.count("sampler", "steps");
    s.unipc_order = static_cast<int>(cfg.count("sampler", "unipc_order"));
    s.churn = ChurnSchedule::constant(cfg.real("sampler", "tau"));
    s.seed = cfg.u64("run", "seed");
    s.validate();
    return s;
}

ClassifierConfig classifier_config(const ExperimentConfig& cfg) {
    ClassifierConfig c;
    c.steps = cfg.count("classifier", "steps");
    c.batch_size = cfg.count("classifier", "batch");
    c.lr = cfg.real("classifier", "lr");
    c.seed = cfg.u64("run", "seed");
    return c;
}

SkipProfile profile_config(const ExperimentConfig& cfg, std::size_t k) {
    SkipProfile p;
    p.rho_bottom = cfg.real("profile", "rho_bottom");
    p.rho_top = cfg.real("profile", "rho_top");
    p.k = k;
    p.reach_top = cfg.flag("profile", "reach_top");
    p.schedule = parse_time_schedule(cfg.get("profile", "schedule"));
    p.rho0 = cfg.real("profile", "rho0");
    p.mode = parse_scaling_mode(cfg.get("profile", "mode"));
    p.domain = NoiseSchedule{cfg.real("model", "sigma_min"), cfg.real("model", "sigma_max"), 7.0};
    p.validate();
    return p;
}

namespace {

// Distinct generator seeds for the three toy splits.
constexpr std::uint64_t kHeldoutSeedOffset = 1000003;
constexpr std::uint64_t kReferenceSeedOffset = 2000003;

Dataset generated(const ExperimentConfig& cfg, std::size_t count, std::uint64_t offset) {
    return generate_dataset(cfg.get("data", "kind"), count, cfg.count("data", "image_size"),
                            cfg.u64("data", "seed") + offset);
}

}  // namespace

Dataset train_dataset(const ExperimentConfig& cfg) {
    const auto& path = cfg.get("data", "path");
    return path.empty() ? generated(cfg, cfg.count("data", "train_count"), 0) : load_dataset(path);
}

Dataset heldout_dataset(const ExperimentConfig& cfg) {
    const auto& path = cfg.get("data", "heldout_path");
    return path.empty() ? generated(cfg, cfg.count("data", "heldout_count"), kHeldoutSeedOffset) : load_dataset(path);
}

Dataset reference_dataset(const ExperimentConfig& cfg) {
    return generated(cfg, cfg.count("metrics", "reference_count"), kReferenceSeedOffset);
}

namespace {

std::vector<int> item_labels(const MiniUNet& net, std::size_t first, std::size_t count) {
    const std::size_t classes = net.config().num_classes;
    if (classes == 0) return {};
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>((first + i) % classes);
    return labels;
}

}  // namespace

DenoiserFactory sampler_model(const MiniUNet& net, const SkipProfile* profile) {
    std::optional<SkipProfile> copy;
    if (profile) copy = *profile;
    return [&net, copy](std::size_t first, std::size_t count) {
        return make_batch_denoiser(net, copy ? &*copy : nullptr, item_labels(net, first, count));
    };
}

DenoiserFactory sampler_model(const MiniUNet& net, const Tensor& coefficients, ScalingMode mode) {
    const Tensor coeffs = coefficients.detach();
    return [&net, coeffs, mode](std::size_t first, std::size_t count) -> BatchDenoiser {
        const auto fn = unet_denoiser(net, coeffs, mode);
        const auto labels = item_labels(net, first, count);
        return [fn, labels](const Tensor& x, double sigma) {
            NoGradGuard ng;
            const std::vector<double> sigmas(x.dim(0), sigma);
            return fn(x, sigmas, labels);
        };
    };
}

Tensor generate_samples(const DenoiserFactory& model, const SamplerConfig& sampler, const NoiseSchedule& schedule,
                        const Shape& item_shape, std::size_t count, std::size_t chunk) {
    if (chunk == 0) throw ConfigError("[run] chunk must be positive");
    sampler.validate();
    const bool stochastic = !sampler.churn.is_zero();
    const std::size_t item = shape_numel(item_shape);
    std::vector<double> out;
    out.reserve(count * item);
    for (std::size_t first = 0; first < count; first += chunk) {
        const std::size_t n = std::min(chunk, count - first);
        const Tensor z = item_noise(n, item_shape, sampler.seed, first);
        const BatchDenoiser denoiser = model(first, n);
        const Trajectory traj = stochastic ? sample_stochastic(denoiser, sampler, schedule, z, first)
                                           : sample_ode(denoiser, sampler, schedule, z);
        out.insert(out.end(), traj.final.data().begin(), traj.final.data().end());
    }
    Shape shape{count};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    return Tensor::from(shape, std::move(out));
}

Tensor classifier_features(const Classifier& clf, const Tensor& images, std::size_t chunk) {
    if (chunk == 0) throw ConfigError("[run] chunk must be positive");
    NoGradGuard ng;
    const std::size_t count = images.dim(0), item = count ? images.numel() / count : 0;
    Shape item_shape(images.shape().begin() + 1, images.shape().end());
    std::vector<double> out;
    std::size_t width = 0;
    for (std::size_t first = 0; first < count; first += chunk) {
        const std::size_t n = std::min(chunk, count - first);
        Shape shape{n};
        shape.insert(shape.end(), item_shape.begin(), item_shape.end());
        const auto begin = images.data().begin() + first * item;
        const Tensor f = clf.features(Tensor::from(shape, std::vector<double>(begin, begin + n * item)));
        width = f.dim(1);
        out.insert(out.end(), f.data().begin(), f.data().end());
    }
    return Tensor::from({count, width}, std::move(out));
}

SampleScores score_samples(const Classifier& clf, const Tensor& samples, const Tensor& reference_features,
                           const KernelSpec& kernel, std::size_t chunk) {
    const Tensor features = classifier_features(clf, samples, chunk);
    for (double v : features.data())
        if (!std::isfinite(v)) throw NumericError("non-finite classifier features on generated samples");
    return {toy_fid(features, reference_features), immd(features, reference_features, kernel)};
}

ProbeBatch probe_batch(const Dataset& heldout, std::size_t size, double sigma, std::uint64_t seed, std::size_t resample,
                       bool conditional) {
    if (heldout.size() == 0) throw ConfigError("probe needs a non-empty held-out set");
    std::seed_seq seq{seed, static_cast<std::uint64_t>(resample), std::uint64_t{0x9b0be}};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick(0, heldout.size() - 1);
    std::vector<std::size_t> idx(size);
    for (auto& i : idx) i = pick(rng);
    const Tensor x0 = heldout.gather(idx);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> eps(x0.numel());
    for (double& e : eps) e = n(rng);
    return {perturb(x0, sigma, Tensor::from(x0.shape(), std::move(eps))),
            conditional ? heldout.gather_labels(idx) : std::vector<int>{}};
}


ProbeCurve probe_curve(const MiniUNet& net, const Dataset& heldout, const ProbeCurveConfig& cfg) {
    if (cfg.rhos.size() < 2 || cfg.resamples == 0) throw ConfigError("probe curve needs two rhos and a resample");
    if (cfg.batch_size == 0) throw ConfigError("probe batch must be positive");
    const bool conditional = net.config().num_classes > 0;
    const std::size_t n_rho = cfg.rhos.size(), jobs = n_rho * cfg.resamples;
    const auto values = parallel_map<double>(jobs, cfg.workers, [&](std::size_t j) {
        const ProbeBatch pb =
            probe_batch(heldout, cfg.batch_size, cfg.sigma, cfg.seed, 1 + j % cfg.resamples, conditional);
        const SkipProfile p = SkipProfile::constant(cfg.rhos[j / cfg.resamples], net.skip_count(), cfg.mode);
        return gradient_norm_probe(net, pb.x, cfg.sigma, &p, cfg.scalarization, pb.labels);
    });
    ProbeCurve out;
    out.value = values;
    for (std::size_t j = 0; j < jobs; ++j) {
        out.rho.push_back(cfg.rhos[j / cfg.resamples]);
        out.resample.push_back(1 + j % cfg.resamples);
    }
    out.spearman = spearman(out.rho, out.value);
    out.p_value = spearman_p_value(out.spearman, jobs);
    for (std::size_t b = 0; b < cfg.resamples; ++b) {
        std::vector<double> ys;
        for (std::size_t i = 0; i < n_rho; ++i) ys.push_back(values[i * cfg.resamples + b]);
        out.mean_batch_spearman += spearman(cfg.rhos, ys);
    }
    out.mean_batch_spearman /= static_cast<double>(cfg.resamples);
    return out;
}

std::string to_string(RhoParam p) { return p == RhoParam::sigmoid ? "sigmoid" : "unconstrained"; }

RhoParam parse_rho_param(const std::string& text) {
    if (text == "sigmoid") return RhoParam::sigmoid;
    if (text == "unconstrained") return RhoParam::unconstrained;
    throw ConfigError("unknown rho parameterization '" + text + "'");
}

Tensor rho_from_params(const Tensor& params, RhoParam param) {
    return param == RhoParam::sigmoid ? ops::sigmoid(params) : params;
}

Tensor initial_rho_params(double rho, std::size_t k, RhoParam param) {
    if (param == RhoParam::sigmoid) {
        if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("sigmoid fine-tuning needs an initial rho in (0, 1)");
        return Tensor::full({k}, std::log(rho / (1.0 - rho)), true);
    }
    return Tensor::full({k}, rho, true);
}

Tensor rho_objective(const MiniUNet& net, const Tensor& params, RhoParam param, ScalingMode mode,
                     const LossBatch& batch, const LossConfig& loss) {
    return loss_feature(unet_denoiser(net, rho_from_params(params, param), mode), batch, loss);
}

RhoFinetuneResult finetune_rho(const MiniUNet& net, const Dataset& data, const RhoFinetuneConfig& cfg) {
    if (data.size() == 0) throw ConfigError("rho fine-tuning needs data");
    if (cfg.batch_size == 0) throw ConfigError("[finetune] batch must be positive");
    MiniUNet frozen = net.clone();
    frozen.set_requires_grad(false);
    RhoFinetuneResult result;
    result.param = cfg.param;
    Tensor params = initial_rho_params(cfg.init_rho, frozen.skip_count(), cfg.param);
    auto current_rho = [&] { return rho_from_params(params.detach(), cfg.param).to_vector(); };
    result.rho = current_rho();
    Adam opt({params}, AdamConfig{cfg.lr});
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> idx(std::min(cfg.batch_size, data.size()));
        for (auto& i : idx) i = pick(rng);
        const auto batch = make_loss_batch(data.gather(idx), frozen.config().num_classes ? data.gather_labels(idx)
                                                                                          : std::vector<int>{},
                                           cfg.schedule, rng);
        opt.zero_grad();
        Tensor loss = rho_objective(frozen, params, cfg.param, cfg.mode, batch, cfg.loss);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            result.diverged = true;
            result.diverged_step = step;
            break;
        }
        backward(loss);
        opt.step();
        const auto rho = current_rho();
        bool finite = true;
        for (double r : rho) finite = finite && std::isfinite(r);
        if (!finite) {
            result.diverged = true;
            result.diverged_step = step;
            break;
        }
        result.losses.push_back(value);
        result.rho_trace.push_back(rho);
        result.rho = rho;
    }
    return result;
}

}  // namespace skiptune
