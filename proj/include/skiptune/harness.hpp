#pragma once

// Experiment orchestration. Each command reads an ExperimentConfig, writes
// its CSVs, the resolved config and a JSON run record into one output
// directory, and returns the record.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "skiptune/classifier.hpp"
#include "skiptune/config.hpp"
#include "skiptune/dataset.hpp"
#include "skiptune/diffusion.hpp"
#include "skiptune/metrics.hpp"
#include "skiptune/samplers.hpp"
#include "skiptune/skip_tuning.hpp"
#include "skiptune/unet.hpp"

namespace skiptune {

// SHA-1 of "blob <size>\0" + bytes, as git hashes file contents.
std::string git_blob_sha1(std::span<const unsigned char> bytes);
std::string git_blob_sha1_file(const std::string& path);

struct RunRecord {
    std::string command;
    std::string spec_hash;        // git_blob_sha1 of the resolved config text
    std::string checkpoint_hash;  // empty when the command reads no checkpoint
    std::string classifier_hash;
    std::uint64_t seed = 0;
    double wall_clock_seconds = 0.0;
    std::vector<std::string> outputs;           // files written, relative to the output directory
    std::map<std::string, std::string> summary;  // headline values

    std::string to_json() const;
};

const std::vector<std::string>& experiment_names();

// Throws ConfigError for an unknown command or invalid configuration and
// NumericError for numerical failures.
RunRecord run_experiment(const std::string& command, const ExperimentConfig& cfg, const std::string& out_dir);

// Runs fn(0..n-1) on up to `workers` threads and returns results in index
// order. The first exception thrown by any job is rethrown.
template <typename T>
std::vector<T> parallel_map(std::size_t n, std::size_t workers, const std::function<T(std::size_t)>& fn) {
    std::vector<T> out(n);
    std::size_t next = 0;
    std::exception_ptr error;
    std::mutex lock;
    auto worker = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> g(lock);
                if (next >= n || error) return;
                i = next++;
            }
            try {
                out[i] = fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> g(lock);
                if (!error) error = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(workers, n));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (error) std::rethrow_exception(error);
    return out;
}

// Typed views of the configuration.
UNetConfig unet_config(const ExperimentConfig& cfg);
TrainConfig train_config(const ExperimentConfig& cfg);
SamplerConfig sampler_config(const ExperimentConfig& cfg);
ClassifierConfig classifier_config(const ExperimentConfig& cfg);
SkipProfile profile_config(const ExperimentConfig& cfg, std::size_t k);
Dataset train_dataset(const ExperimentConfig& cfg);
Dataset heldout_dataset(const ExperimentConfig& cfg);
Dataset reference_dataset(const ExperimentConfig& cfg);

// Builds the denoiser for items [first_index, first_index + count), so class
// labels can follow the item index.
using DenoiserFactory = std::function<BatchDenoiser(std::size_t first_index, std::size_t count)>;

// Labels are item_index % num_classes for class-conditional models. The
// profile is copied; a null profile means the untouched network.
DenoiserFactory sampler_model(const MiniUNet& net, const SkipProfile* profile);
// Fixed per-call coefficients [k].
DenoiserFactory sampler_model(const MiniUNet& net, const Tensor& coefficients, ScalingMode mode);

// Samples `count` items in chunks of `chunk`. Item i always starts from the
// same noise and churn stream, so the result does not depend on chunking
// beyond the batched network arithmetic. Non-zero churn selects the
// stochastic sampler, otherwise the ODE solver.
Tensor generate_samples(const DenoiserFactory& model, const SamplerConfig& sampler, const NoiseSchedule& schedule,
                        const Shape& item_shape, std::size_t count, std::size_t chunk);

// Classifier features computed in chunks without a tape.
Tensor classifier_features(const Classifier& clf, const Tensor& images, std::size_t chunk);

struct SampleScores {
    double toy_fid = 0.0;
    double immd = 0.0;
};
SampleScores score_samples(const Classifier& clf, const Tensor& samples, const Tensor& reference_features,
                           const KernelSpec& kernel, std::size_t chunk);

struct ProbeBatch {
    Tensor x;  // noisy inputs at one sigma
    std::vector<int> labels;
};

// `size` held-out items (drawn with replacement) plus noise at `sigma`, from a
// generator seeded by (seed, resample).
ProbeBatch probe_batch(const Dataset& heldout, std::size_t size, double sigma, std::uint64_t seed,
                       std::size_t resample, bool conditional);

// Gradient-norm probe against constant rho. Resample r draws `batch_size`
// held-out items and noise at `sigma` from a generator seeded by (seed, r);
// every rho sees the same resamples. The rank correlation pools all
// (rho, probe) points.
struct ProbeCurveConfig {
    std::vector<double> rhos;
    std::size_t resamples = 20;
    std::size_t batch_size = 16;
    double sigma = 5.0;
    ProbeScalarization scalarization = ProbeScalarization::output_sum;
    ScalingMode mode = ScalingMode::at_concat;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

struct ProbeCurve {
    std::vector<double> rho;    // one entry per point, rho-major
    std::vector<std::size_t> resample;
    std::vector<double> value;
    double spearman = 0.0;
    double p_value = 1.0;
    double mean_batch_spearman = 0.0;  // average of the per-resample correlations
};

ProbeCurve probe_curve(const MiniUNet& net, const Dataset& heldout, const ProbeCurveConfig& cfg);

// Skip-coefficient fine-tuning parameterizations: sigmoid keeps rho in (0, 1);
// unconstrained optimizes rho directly and can leave that range.
enum class RhoParam { sigmoid, unconstrained };
std::string to_string(RhoParam p);
RhoParam parse_rho_param(const std::string& text);

Tensor rho_from_params(const Tensor& params, RhoParam param);
Tensor initial_rho_params(double rho, std::size_t k, RhoParam param);

// Feature-space loss of the frozen network with skip coefficients
// rho(params); differentiable in params.
Tensor rho_objective(const MiniUNet& net, const Tensor& params, RhoParam param, ScalingMode mode,
                     const LossBatch& batch, const LossConfig& loss);

struct RhoFinetuneResult {
    RhoParam param = RhoParam::sigmoid;
    std::vector<double> losses;
    std::vector<std::vector<double>> rho_trace;  // rho after each step
    std::vector<double> rho;                     // final (last finite) coefficients
    bool diverged = false;
    std::size_t diverged_step = 0;
};

struct RhoFinetuneConfig {
    std::size_t steps = 200;
    std::size_t batch_size = 32;
    double lr = 0.01;
    double init_rho = 0.9;
    RhoParam param = RhoParam::sigmoid;
    ScalingMode mode = ScalingMode::at_concat;
    std::uint64_t seed = 0;
    LossConfig loss;
    NoiseSchedule schedule;
};

// Divergence is recorded in the result rather than thrown.
RhoFinetuneResult finetune_rho(const MiniUNet& net, const Dataset& data, const RhoFinetuneConfig& cfg);

}  // namespace skiptune
