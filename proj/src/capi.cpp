#include "skiptune/skiptune.h"

#include <cstring>
#include <exception>
#include <memory>
#include <new>
#include <stdexcept>
#include <string>

#include "skiptune/errors.hpp"
#include "skiptune/harness.hpp"

struct st_config {
    skiptune::ExperimentConfig cfg;
};
struct st_model {
    skiptune::MiniUNet net;
};
struct st_dataset {
    skiptune::Dataset data;
};
struct st_experiment {
    skiptune::RunRecord record;
    std::string json;
};

namespace {

thread_local std::string last_error;

st_status code_of(skiptune::ErrorKind kind) {
    using skiptune::ErrorKind;
    switch (kind) {
        case ErrorKind::config: return ST_ERR_CONFIG;
        case ErrorKind::domain: return ST_ERR_DOMAIN;
        case ErrorKind::dimension: return ST_ERR_DIMENSION;
        case ErrorKind::contract: return ST_ERR_CONTRACT;
        case ErrorKind::numeric: return ST_ERR_NUMERIC;
        case ErrorKind::io: return ST_ERR_IO;
    }
    return ST_ERR_INTERNAL;
}

template <typename F>
st_status guarded(F&& f) {
    last_error.clear();
    try {
        f();
        return ST_OK;
    } catch (const skiptune::Error& e) {
        last_error = e.what();
        return code_of(e.kind());
    } catch (const std::invalid_argument& e) {
        last_error = e.what();
        return ST_ERR_INVALID_ARGUMENT;
    } catch (const std::bad_alloc&) {
        last_error = "out of memory";
        return ST_ERR_INTERNAL;
    } catch (const std::exception& e) {
        last_error = e.what();
        return ST_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown exception";
        return ST_ERR_INTERNAL;
    }
}

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

st_status invalid(const char* what) {
    last_error = what;
    return ST_ERR_INVALID_ARGUMENT;
}

}  // namespace

extern "C" {

int st_api_version(void) { return ST_API_VERSION; }

const char* st_last_error(void) { return last_error.c_str(); }

const char* st_error_string(st_status code) {
    switch (code) {
        case ST_OK: return "ok";
        case ST_ERR_CONFIG: return "configuration error";
        case ST_ERR_DOMAIN: return "domain error";
        case ST_ERR_DIMENSION: return "dimension error";
        case ST_ERR_CONTRACT: return "contract violation";
        case ST_ERR_NUMERIC: return "numerical failure";
        case ST_ERR_IO: return "i/o error";
        case ST_ERR_INVALID_ARGUMENT: return "invalid argument";
        case ST_ERR_INTERNAL: return "internal error";
        default: return "unknown status";
    }
}

st_status st_config_default(st_config_t** out) {
    if (!out) return invalid("out is NULL");
    return guarded([&] { *out = new st_config{}; });
}

st_status st_config_load(const char* path, st_config_t** out) {
    if (!path || !out) return invalid("path and out must not be NULL");
    return guarded([&] { *out = new st_config{skiptune::ExperimentConfig::load(path)}; });
}

st_status st_config_parse(const char* text, st_config_t** out) {
    if (!text || !out) return invalid("text and out must not be NULL");
    return guarded([&] { *out = new st_config{skiptune::ExperimentConfig::parse(text)}; });
}

st_status st_config_set(st_config_t* cfg, const char* section, const char* key, const char* value) {
    if (!cfg || !section || !key || !value) return invalid("arguments must not be NULL");
    return guarded([&] { cfg->cfg.set(section, key, value); });
}

st_status st_config_get(const st_config_t* cfg, const char* section, const char* key, char* buf, size_t buf_size,
                        size_t* needed) {
    if (!cfg || !section || !key) return invalid("arguments must not be NULL");
    return guarded([&] {
        const std::string& v = cfg->cfg.get(section, key);
        if (needed) *needed = v.size() + 1;
        if (buf && buf_size > 0) {
            const size_t n = std::min(buf_size - 1, v.size());
            std::memcpy(buf, v.data(), n);
            buf[n] = '\0';
        }
    });
}

void st_config_free(st_config_t* cfg) { delete cfg; }

size_t st_experiment_count(void) { return skiptune::experiment_names().size(); }

const char* st_experiment_name(size_t i) {
    const auto& names = skiptune::experiment_names();
    return i < names.size() ? names[i].c_str() : nullptr;
}

st_status st_experiment_run(const char* command, const st_config_t* cfg, const char* out_dir,
                            st_experiment_t** out) {
    if (!command || !cfg || !out_dir) return invalid("command, cfg and out_dir must not be NULL");
    return guarded([&] {
        auto run = std::make_unique<st_experiment>();
        run->record = skiptune::run_experiment(command, cfg->cfg, out_dir);
        run->json = run->record.to_json();
        if (out) *out = run.release();
    });
}

const char* st_experiment_record_json(const st_experiment_t* run) { return run ? run->json.c_str() : ""; }

void st_experiment_free(st_experiment_t* run) { delete run; }

st_status st_model_load(const char* path, st_model_t** out) {
    if (!path || !out) return invalid("path and out must not be NULL");
    return guarded([&] {
        auto net = skiptune::MiniUNet::load(path);
        net.set_requires_grad(false);
        *out = new st_model{std::move(net)};
    });
}

size_t st_model_skip_count(const st_model_t* model) { return model ? model->net.skip_count() : 0; }

size_t st_model_item_numel(const st_model_t* model) {
    if (!model) return 0;
    const auto& c = model->net.config();
    return c.input_channels * c.image_size * c.image_size;
}

st_status st_model_denoise(const st_model_t* model, const double* x, size_t batch, double sigma, const double* rho,
                           double* out) {
    if (!model || !x || !out) return invalid("model, x and out must not be NULL");
    return guarded([&] {
        require(batch > 0, "batch must be positive");
        const auto& c = model->net.config();
        const size_t item = st_model_item_numel(model);
        const skiptune::Tensor in =
            skiptune::Tensor::from({batch, c.input_channels, c.image_size, c.image_size},
                                   std::vector<double>(x, x + batch * item));
        skiptune::NoGradGuard ng;
        skiptune::Tensor y;
        if (rho) {
            const size_t k = model->net.skip_count();
            const auto d = skiptune::unet_denoiser(
                model->net, skiptune::Tensor::from({k}, std::vector<double>(rho, rho + k)),
                skiptune::ScalingMode::at_concat);
            const std::vector<double> sigmas(batch, sigma);
            y = d(in, sigmas, {});
        } else {
            y = model->net.denoise(in, sigma);
        }
        std::copy(y.data().begin(), y.data().end(), out);
    });
}

void st_model_free(st_model_t* model) { delete model; }

st_status st_dataset_generate(const char* kind, size_t count, size_t image_size, uint64_t seed, st_dataset_t** out) {
    if (!kind || !out) return invalid("kind and out must not be NULL");
    return guarded([&] { *out = new st_dataset{skiptune::generate_dataset(kind, count, image_size, seed)}; });
}

st_status st_dataset_load(const char* path, st_dataset_t** out) {
    if (!path || !out) return invalid("path and out must not be NULL");
    return guarded([&] { *out = new st_dataset{skiptune::load_dataset(path)}; });
}

st_status st_dataset_save(const st_dataset_t* data, const char* path) {
    if (!data || !path) return invalid("data and path must not be NULL");
    return guarded([&] { skiptune::save_dataset(data->data, path); });
}

size_t st_dataset_size(const st_dataset_t* data) { return data ? data->data.size() : 0; }

size_t st_dataset_item_numel(const st_dataset_t* data) {
    if (!data || data->data.size() == 0) return 0;
    return data->data.images.numel() / data->data.size();
}

const double* st_dataset_images(const st_dataset_t* data) {
    if (!data || data->data.size() == 0) return nullptr;
    return data->data.images.data().data();
}

void st_dataset_free(st_dataset_t* data) { delete data; }

st_status st_karras_grid(double sigma_min, double sigma_max, double exponent, size_t n, double* out) {
    if (!out) return invalid("out must not be NULL");
    return guarded([&] {
        const auto grid = skiptune::karras_grid(skiptune::NoiseSchedule{sigma_min, sigma_max, exponent}, n);
        std::copy(grid.begin(), grid.end(), out);
    });
}

st_status st_mmd_unbiased(st_kernel kernel, double bandwidth, const double* x, size_t m, const double* y, size_t n,
                          size_t dim, double* out) {
    if (!x || !y || !out) return invalid("x, y and out must not be NULL");
    if (kernel < ST_KERNEL_LINEAR || kernel > ST_KERNEL_COSINE) return invalid("unknown kernel");
    return guarded([&] {
        require(dim > 0, "dim must be positive");
        const auto tx = skiptune::Tensor::from({m, dim}, std::vector<double>(x, x + m * dim));
        const auto ty = skiptune::Tensor::from({n, dim}, std::vector<double>(y, y + n * dim));
        skiptune::KernelSpec spec;
        spec.kind = skiptune::all_kernel_kinds().at(static_cast<size_t>(kernel));
        if (bandwidth > 0.0) spec.bandwidth = bandwidth;
        const skiptune::Tensor sets[] = {tx, ty};
        *out = skiptune::mmd_unbiased(tx, ty, skiptune::resolve_kernel(spec, sets));
    });
}

}  // extern "C"
