#include "skiptune/unet.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"
#include "skiptune/csv.hpp"
#include "skiptune/errors.hpp"

namespace skiptune {

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'K', 'T', 'U', 'N', 'E', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::size_t parse_size(const std::map<std::string, std::string>& f, const std::string& key) {
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("checkpoint config is missing '" + key + "'");
    try {
        return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::exception&) {
        throw ConfigError("bad integer for '" + key + "': " + it->second);
    }
}

double parse_double(const std::map<std::string, std::string>& f, const std::string& key) {
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("checkpoint config is missing '" + key + "'");
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw ConfigError("bad number for '" + key + "': " + it->second);
    }
}

double l2_norm(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data()) acc += v * v;
    return std::sqrt(acc);
}

// Norm of the skip activation after per-item scaling.
double scaled_norm(const Tensor& d, const Tensor& coefficients, std::size_t layer) {
    if (!coefficients.defined()) return l2_norm(d);
    const std::size_t batch = d.dim(0);
    const std::size_t inner = d.numel() / batch;
    const std::size_t k = coefficients.dim(1);
    auto dv = d.data();
    auto cv = coefficients.data();
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const double r = cv[b * k + layer];
        for (std::size_t i = 0; i < inner; ++i) {
            const double v = dv[b * inner + i] * r;
            acc += v * v;
        }
    }
    return std::sqrt(acc);
}

}  // namespace

std::string to_string(GroupAlignment alignment) {
    return alignment == GroupAlignment::aligned ? "aligned" : "straddling";
}

GroupAlignment parse_group_alignment(const std::string& text) {
    if (text == "aligned") return GroupAlignment::aligned;
    if (text == "straddling") return GroupAlignment::straddling;
    throw ConfigError("unknown group alignment '" + text + "'");
}

void UNetConfig::validate() const {
    if (input_channels < 1 || base_channels < 1 || depth < 1 || time_embedding_dim < 2 || time_embedding_dim % 2)
        throw ConfigError("unet: channel counts and depth must be positive, embedding dim even");
    if (groupnorm_groups < 1 || base_channels % groupnorm_groups)
        throw ConfigError("unet: groupnorm_groups must divide base_channels");
    if (image_size % (std::size_t{1} << (depth - 1)))
        throw ConfigError("unet: image_size must be divisible by 2^(depth-1)");
    const std::size_t concat_group = 2 * base_channels / groupnorm_groups;
    if (group_alignment == GroupAlignment::aligned && base_channels % concat_group)
        throw ConfigError("unet: aligned groups need an even group count");
    if (group_alignment == GroupAlignment::straddling && (concat_group < 2 || concat_group % 2))
        throw ConfigError("unet: straddling groups need an even concat group size");
    if (!(sigma_data > 0.0) || !(sigma_min > 0.0) || !(sigma_max > sigma_min))
        throw ConfigError("unet: invalid sigma settings");
}

std::map<std::string, std::string> UNetConfig::to_fields() const {
    return {
        {"input_channels", std::to_string(input_channels)},
        {"image_size", std::to_string(image_size)},
        {"base_channels", std::to_string(base_channels)},
        {"depth", std::to_string(depth)},
        {"blocks_per_resolution", std::to_string(blocks_per_resolution)},
        {"groupnorm_groups", std::to_string(groupnorm_groups)},
        {"time_embedding_dim", std::to_string(time_embedding_dim)},
        {"num_classes", std::to_string(num_classes)},
        {"group_alignment", to_string(group_alignment)},
        {"sigma_data", format_double(sigma_data)},
        {"sigma_min", format_double(sigma_min)},
        {"sigma_max", format_double(sigma_max)},
    };
}

UNetConfig UNetConfig::from_fields(const std::map<std::string, std::string>& f) {
    UNetConfig c;
    c.input_channels = parse_size(f, "input_channels");
    c.image_size = parse_size(f, "image_size");
    c.base_channels = parse_size(f, "base_channels");
    c.depth = parse_size(f, "depth");
    c.blocks_per_resolution = parse_size(f, "blocks_per_resolution");
    c.groupnorm_groups = parse_size(f, "groupnorm_groups");
    c.time_embedding_dim = parse_size(f, "time_embedding_dim");
    c.num_classes = parse_size(f, "num_classes");
    auto it = f.find("group_alignment");
    if (it == f.end()) throw ConfigError("checkpoint config is missing 'group_alignment'");
    c.group_alignment = parse_group_alignment(it->second);
    c.sigma_data = parse_double(f, "sigma_data");
    c.sigma_min = parse_double(f, "sigma_min");
    c.sigma_max = parse_double(f, "sigma_max");
    c.validate();
    return c;
}

Tensor denoiser_precondition(const Tensor& raw, const Tensor& x_t, std::span<const double> sigmas, double sigma_data) {
    if (raw.shape() != x_t.shape()) throw DimensionError("precondition: raw output and x_t differ in shape");
    if (x_t.rank() < 1 || sigmas.size() != x_t.dim(0)) throw DimensionError("precondition: one sigma per item");
    std::vector<double> c_skip(sigmas.size()), c_out(sigmas.size());
    const double sd2 = sigma_data * sigma_data;
    for (std::size_t b = 0; b < sigmas.size(); ++b) {
        const double s = sigmas[b];
        if (!(s > 0.0)) throw DomainError("precondition: sigma must be positive");
        c_skip[b] = sd2 / (s * s + sd2);
        c_out[b] = s * sigma_data / std::sqrt(s * s + sd2);
    }
    return ops::add(ops::scale_rows(x_t, Tensor::from({c_skip.size()}, c_skip)),
                    ops::scale_rows(raw, Tensor::from({c_out.size()}, c_out)));
}

MiniUNet::MiniUNet(const UNetConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build(seed);
}

MiniUNet::Conv MiniUNet::make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                                   std::mt19937_64& rng, double gain) {
    std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(cin * k * k)));
    std::vector<double> w(cout * cin * k * k);
    for (double& v : w) v = n(rng);
    Conv c{Tensor::from({cout, cin, k, k}, std::move(w)), Tensor::zeros({cout})};
    params_.push_back({name + ".weight", c.w});
    params_.push_back({name + ".bias", c.b});
    return c;
}

MiniUNet::Norm MiniUNet::make_norm(const std::string& name, std::size_t channels) {
    Norm n{Tensor::full({channels}, 1.0), Tensor::zeros({channels})};
    params_.push_back({name + ".gamma", n.gamma});
    params_.push_back({name + ".beta", n.beta});
    return n;
}

MiniUNet::Linear MiniUNet::make_linear(const std::string& name, std::size_t in, std::size_t out,
                                       std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    std::vector<double> w(out * in);
    for (double& v : w) v = n(rng);
    Linear l{Tensor::from({out, in}, std::move(w)), Tensor::zeros({out})};
    params_.push_back({name + ".weight", l.w});
    params_.push_back({name + ".bias", l.b});
    return l;
}

MiniUNet::Block MiniUNet::make_block(const std::string& name, std::size_t cin, std::size_t cout, bool concat,
                                     std::mt19937_64& rng) {
    Block b;
    b.in_channels = cin;
    b.out_channels = cout;
    b.concat_input = concat;
    b.norm0 = make_norm(name + ".norm0", cin);
    b.conv0 = make_conv(name + ".conv0", cin, cout, 3, rng);
    b.affine = make_linear(name + ".affine", config_.time_embedding_dim, cout, rng);
    b.norm1 = make_norm(name + ".norm1", cout);
    b.conv1 = make_conv(name + ".conv1", cout, cout, 3, rng, 0.2);
    if (cin != cout) b.skip = make_conv(name + ".skip", cin, cout, 1, rng);
    return b;
}

void MiniUNet::build(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t c = config_.base_channels;
    const std::size_t e = config_.time_embedding_dim;

    fourier_freqs_.resize(e / 2);
    for (std::size_t j = 0; j < e / 2; ++j) {
        const double frac = e / 2 > 1 ? static_cast<double>(j) / static_cast<double>(e / 2 - 1) : 0.0;
        fourier_freqs_[j] = std::numbers::pi * std::pow(16.0, frac);
    }
    map0_ = make_linear("map0", e, e, rng);
    map1_ = make_linear("map1", e, e, rng);
    if (config_.num_classes > 0) {
        std::normal_distribution<double> n(0.0, 1.0);
        std::vector<double> t(config_.num_classes * e);
        for (double& v : t) v = n(rng);
        class_table_ = Tensor::from({config_.num_classes, e}, std::move(t));
        params_.push_back({"class_embedding", class_table_});
    }

    conv_in_ = make_conv("conv_in", config_.input_channels, c, 3, rng);
    for (std::size_t level = 0; level < config_.depth; ++level) {
        const std::size_t count = config_.blocks_per_resolution + (level > 0 ? 1 : 0);
        for (std::size_t j = 0; j < count; ++j) {
            encoder_.push_back(make_block("enc" + std::to_string(encoder_.size()), c, c, false, rng));
            encoder_downsample_.push_back(level > 0 && j == 0);
        }
    }
    middle_ = make_block("mid", c, c, false, rng);
    for (std::size_t level = config_.depth; level-- > 0;) {
        for (std::size_t j = 0; j <= config_.blocks_per_resolution; ++j) {
            decoder_.push_back(make_block("dec" + std::to_string(decoder_.size()), 2 * c, c, true, rng));
            decoder_upsample_after_.push_back(level > 0 && j == config_.blocks_per_resolution);
        }
    }
    out_norm_ = make_norm("out_norm", c);
    conv_out_ = make_conv("conv_out", c, config_.input_channels, 3, rng, 0.2);
}

Tensor MiniUNet::time_embedding(std::span<const double> sigmas, std::span<const int> labels) const {
    const std::size_t batch = sigmas.size();
    const std::size_t e = config_.time_embedding_dim;
    const std::size_t half = e / 2;
    std::vector<double> feats(batch * e);
    for (std::size_t b = 0; b < batch; ++b) {
        const double c_noise = std::log(sigmas[b]) / 4.0;
        for (std::size_t j = 0; j < half; ++j) {
            feats[b * e + j] = std::cos(fourier_freqs_[j] * c_noise);
            feats[b * e + half + j] = std::sin(fourier_freqs_[j] * c_noise);
        }
    }
    Tensor emb = ops::linear(Tensor::from({batch, e}, std::move(feats)), map0_.w, map0_.b);
    if (config_.num_classes > 0) {
        if (labels.size() != batch) throw ConfigError("unet: class-conditional model needs one label per item");
        emb = ops::add(emb, ops::embedding(class_table_, labels));
    } else if (!labels.empty()) {
        throw ConfigError("unet: labels given to an unconditional model");
    }
    return ops::silu(ops::linear(ops::silu(emb), map1_.w, map1_.b));
}

Tensor MiniUNet::run_block(const Block& block, const Tensor& norm_input, const Tensor& gains, const Tensor& orig,
                           const Tensor& emb) const {
    const std::size_t groups = config_.groupnorm_groups;
    std::size_t offset = 0;
    if (block.concat_input && config_.group_alignment == GroupAlignment::straddling)
        offset = block.in_channels / groups / 2;
    Tensor h = ops::group_norm(norm_input, block.norm0.gamma, block.norm0.beta, groups, offset, gains);
    h = ops::conv2d(ops::silu(h), block.conv0.w, block.conv0.b);
    h = ops::add_channel_bias(h, ops::linear(emb, block.affine.w, block.affine.b));
    h = ops::silu(ops::group_norm(h, block.norm1.gamma, block.norm1.beta, groups));
    h = ops::conv2d(h, block.conv1.w, block.conv1.b);
    Tensor residual = block.in_channels != block.out_channels ? ops::conv2d(orig, block.skip.w, block.skip.b) : orig;
    return ops::mul_scalar(ops::add(h, residual), std::numbers::sqrt2 / 2.0);
}

ForwardResult MiniUNet::forward(const Tensor& x_t, std::span<const double> sigmas, const Tensor& coefficients,
                                ScalingMode mode, bool instrument, std::span<const int> labels) const {
    if (x_t.rank() != 4 || x_t.dim(1) != config_.input_channels)
        throw DimensionError("unet: expected [B, " + std::to_string(config_.input_channels) + ", H, W], got " +
                             shape_str(x_t.shape()));
    const std::size_t stride = std::size_t{1} << (config_.depth - 1);
    if (x_t.dim(2) % stride || x_t.dim(3) % stride)
        throw DimensionError("unet: spatial size must be divisible by " + std::to_string(stride));
    const std::size_t batch = x_t.dim(0);
    if (sigmas.size() != batch) throw DimensionError("unet: one sigma per item required");
    for (double s : sigmas)
        if (!(s >= config_.sigma_min && s <= config_.sigma_max))
            throw DomainError("unet: sigma " + std::to_string(s) + " outside [sigma_min, sigma_max]");
    const std::size_t k = skip_count();
    if (coefficients.defined() && coefficients.shape() != Shape{batch, k})
        throw ConfigError("unet: skip coefficients must be [" + std::to_string(batch) + ", " + std::to_string(k) +
                          "], got " + shape_str(coefficients.shape()));

    ForwardResult result;
    if (batch == 0) {
        result.denoised = Tensor::zeros(x_t.shape());
        return result;
    }

    std::vector<double> c_in(batch);
    for (std::size_t b = 0; b < batch; ++b)
        c_in[b] = 1.0 / std::sqrt(sigmas[b] * sigmas[b] + config_.sigma_data * config_.sigma_data);
    const Tensor emb = time_embedding(sigmas, labels);

    Tensor h = ops::conv2d(ops::scale_rows(x_t, Tensor::from({batch}, c_in)), conv_in_.w, conv_in_.b);
    std::vector<Tensor> skips{h};
    for (std::size_t j = 0; j < encoder_.size(); ++j) {
        if (encoder_downsample_[j]) h = ops::avg_pool2(h);
        h = run_block(encoder_[j], h, Tensor{}, h, emb);
        skips.push_back(h);
    }
    h = run_block(middle_, h, Tensor{}, h, emb);

    const std::size_t c = config_.base_channels;
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        Tensor d = skips.back();
        skips.pop_back();
        if (instrument)
            result.taps.push_back({i, scaled_norm(d, coefficients, i), l2_norm(h)});
        const Tensor plain = ops::concat_channels(d, h);
        if (!coefficients.defined()) {
            h = run_block(decoder_[i], plain, Tensor{}, plain, emb);
        } else {
            const Tensor s = ops::select_column(coefficients, i);
            const Tensor gains = ops::gain_block(s, c, c);
            switch (mode) {
                case ScalingMode::at_concat:
                    h = run_block(decoder_[i], plain, gains, ops::concat_channels(ops::scale_rows(d, s), h), emb);
                    break;
                case ScalingMode::orig_only:
                    h = run_block(decoder_[i], plain, Tensor{}, ops::concat_channels(ops::scale_rows(d, s), h), emb);
                    break;
                case ScalingMode::norm_input_only:
                    h = run_block(decoder_[i], plain, gains, plain, emb);
                    break;
            }
        }
        if (decoder_upsample_after_[i]) h = ops::upsample2(h);
    }

    h = ops::silu(ops::group_norm(h, out_norm_.gamma, out_norm_.beta, config_.groupnorm_groups));
    const Tensor raw = ops::conv2d(h, conv_out_.w, conv_out_.b);
    result.denoised = denoiser_precondition(raw, x_t, sigmas, config_.sigma_data);
    return result;
}

ForwardResult MiniUNet::forward(const Tensor& x_t, std::span<const double> sigmas, const SkipProfile* profile,
                                bool instrument, std::span<const int> labels) const {
    if (!profile) return forward(x_t, sigmas, Tensor{}, ScalingMode::at_concat, instrument, labels);
    profile->validate();
    const std::size_t k = skip_count();
    if (profile->k != k)
        throw ConfigError("unet: profile has " + std::to_string(profile->k) + " coefficients, model has " +
                          std::to_string(k) + " skips");
    std::vector<double> coeffs;
    coeffs.reserve(sigmas.size() * k);
    for (double s : sigmas) {
        const auto row = profile->coefficients(s);
        for (double r : row)
            if (!(r > 0.0 && r <= 1.0)) throw DomainError("unet: skip coefficient outside (0, 1]");
        coeffs.insert(coeffs.end(), row.begin(), row.end());
    }
    return forward(x_t, sigmas, Tensor::from({sigmas.size(), k}, std::move(coeffs)), profile->mode, instrument,
                   labels);
}

Tensor MiniUNet::denoise(const Tensor& x_t, double sigma, const SkipProfile* profile,
                         std::span<const int> labels) const {
    const std::vector<double> sigmas(x_t.rank() ? x_t.dim(0) : 0, sigma);
    return forward(x_t, sigmas, profile, false, labels).denoised;
}

std::size_t MiniUNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

void MiniUNet::set_requires_grad(bool on) {
    for (auto& p : params_) p.value.set_requires_grad(on);
}

MiniUNet MiniUNet::clone() const {
    MiniUNet copy(config_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto src = params_[i].value.data();
        auto dst = copy.params_[i].value.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return copy;
}

void MiniUNet::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    binio::put_le<std::uint32_t>(os, kCheckpointVersion);
    const auto fields = config_.to_fields();
    binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(fields.size()));
    for (const auto& [key, value] : fields) {
        binio::put_string(os, key);
        binio::put_string(os, value);
    }
    binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) {
        binio::put_string(os, p.name);
        binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
        for (std::size_t d : p.value.shape()) binio::put_le<std::uint64_t>(os, d);
        for (double v : p.value.data()) binio::put_f64(os, v);
    }
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

MiniUNet MiniUNet::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[sizeof kCheckpointMagic];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw IoError("not a checkpoint file: " + path);
    const auto version = binio::get_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    std::map<std::string, std::string> fields;
    const auto nfields = binio::get_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < nfields; ++i) {
        auto key = binio::get_string(is);
        fields[key] = binio::get_string(is);
    }
    MiniUNet net(UNetConfig::from_fields(fields), 0);
    const auto nparams = binio::get_le<std::uint32_t>(is);
    if (nparams != net.params_.size())
        throw IoError("checkpoint has " + std::to_string(nparams) + " parameters, config implies " +
                      std::to_string(net.params_.size()));
    for (auto& p : net.params_) {
        const auto name = binio::get_string(is);
        if (name != p.name) throw IoError("checkpoint parameter '" + name + "' where '" + p.name + "' was expected");
        const auto rank = binio::get_le<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = binio::get_le<std::uint64_t>(is);
        if (shape != p.value.shape())
            throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(shape));
        for (double& v : p.value.mutable_data()) v = binio::get_f64(is);
    }
    return net;
}

}  // namespace skiptune
