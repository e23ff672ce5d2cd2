#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "skiptune/skip_tuning.hpp"
#include "skiptune/tensor.hpp"

namespace skiptune {

enum class GroupAlignment {
    aligned,     // every GroupNorm group at a concat point lies within the skip or the up half
    straddling,  // groups are rotated by half a group so one group spans the boundary
};

std::string to_string(GroupAlignment alignment);
GroupAlignment parse_group_alignment(const std::string& text);

struct UNetConfig {
    std::size_t input_channels = 1;
    std::size_t image_size = 8;
    std::size_t base_channels = 32;
    std::size_t depth = 3;
    std::size_t blocks_per_resolution = 1;
    std::size_t groupnorm_groups = 8;
    std::size_t time_embedding_dim = 32;
    std::size_t num_classes = 0;  // 0 disables class conditioning
    GroupAlignment group_alignment = GroupAlignment::straddling;
    double sigma_data = 0.5;
    double sigma_min = 0.002;
    double sigma_max = 80.0;

    // Number of long skip connections, one per decoder concat point.
    std::size_t skip_count() const { return depth * (blocks_per_resolution + 1); }
    void validate() const;
    std::map<std::string, std::string> to_fields() const;
    static UNetConfig from_fields(const std::map<std::string, std::string>& fields);
};

struct SkipTap {
    std::size_t layer = 0;  // 0 is the bottom (lowest resolution) connection
    double d_norm = 0.0;    // l2 norm of the skip activation as concatenated (after scaling)
    double u_norm = 0.0;    // l2 norm of the up-path activation it is concatenated with
};

struct ForwardResult {
    Tensor denoised;
    std::vector<SkipTap> taps;
};

struct NamedParameter {
    std::string name;
    Tensor value;
};

// c_skip * x_t + c_out * raw with EDM coefficients; one sigma per item.
Tensor denoiser_precondition(const Tensor& raw, const Tensor& x_t, std::span<const double> sigmas, double sigma_data);

class MiniUNet {
public:
    MiniUNet(const UNetConfig& config, std::uint64_t seed);

    const UNetConfig& config() const { return config_; }
    std::size_t skip_count() const { return config_.skip_count(); }

    // Differentiable forward. `coefficients` is [B, k] or undefined (no skip
    // scaling code path at all). Labels are required iff num_classes > 0.
    ForwardResult forward(const Tensor& x_t, std::span<const double> sigmas, const Tensor& coefficients,
                          ScalingMode mode, bool instrument = false, std::span<const int> labels = {}) const;

    // Profile-driven forward; the profile is evaluated at each item's sigma.
    ForwardResult forward(const Tensor& x_t, std::span<const double> sigmas, const SkipProfile* profile,
                          bool instrument = false, std::span<const int> labels = {}) const;

    Tensor denoise(const Tensor& x_t, double sigma, const SkipProfile* profile = nullptr,
                   std::span<const int> labels = {}) const;

    std::vector<NamedParameter>& parameters() { return params_; }
    const std::vector<NamedParameter>& parameters() const { return params_; }
    std::size_t parameter_count() const;
    void set_requires_grad(bool on);

    MiniUNet clone() const;

    void save(const std::string& path) const;
    static MiniUNet load(const std::string& path);

private:
    struct Conv {
        Tensor w, b;
    };
    struct Norm {
        Tensor gamma, beta;
    };
    struct Linear {
        Tensor w, b;
    };
    struct Block {
        std::size_t in_channels = 0, out_channels = 0;
        bool concat_input = false;
        Norm norm0, norm1;
        Conv conv0, conv1, skip;
        Linear affine;
    };

    Tensor run_block(const Block& block, const Tensor& norm_input, const Tensor& gains, const Tensor& orig,
                     const Tensor& emb) const;
    Tensor time_embedding(std::span<const double> sigmas, std::span<const int> labels) const;
    void build(std::uint64_t seed);

    Conv make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::mt19937_64& rng,
                   double gain = 1.0);
    Norm make_norm(const std::string& name, std::size_t channels);
    Linear make_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);
    Block make_block(const std::string& name, std::size_t cin, std::size_t cout, bool concat, std::mt19937_64& rng);

    UNetConfig config_;
    std::vector<NamedParameter> params_;
    Conv conv_in_;
    std::vector<Block> encoder_;  // in execution order; each pushes one skip
    std::vector<bool> encoder_downsample_;
    Block middle_;
    std::vector<Block> decoder_;  // in execution order; each pops one skip
    std::vector<bool> decoder_upsample_after_;
    Linear map0_, map1_;
    Tensor class_table_;
    Norm out_norm_;
    Conv conv_out_;
    std::vector<double> fourier_freqs_;
};

}  // namespace skiptune
