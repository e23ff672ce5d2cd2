#ifndef SKIPTUNE_H
#define SKIPTUNE_H

/* C interface to the skiptune library. Every function returns an st_status
 * (ST_OK or a negative error code) unless noted; on failure st_last_error()
 * describes the problem for the calling thread. Handles are opaque and are
 * released with the matching *_free function, which accepts NULL. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ST_API __declspec(dllexport)
#else
#define ST_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef int st_status;

#define ST_OK 0
#define ST_ERR_CONFIG (-1)
#define ST_ERR_DOMAIN (-2)
#define ST_ERR_DIMENSION (-3)
#define ST_ERR_CONTRACT (-4)
#define ST_ERR_NUMERIC (-5)
#define ST_ERR_IO (-6)
#define ST_ERR_INVALID_ARGUMENT (-7)
#define ST_ERR_INTERNAL (-8)

#define ST_API_VERSION 1

typedef struct st_config st_config_t;
typedef struct st_model st_model_t;
typedef struct st_dataset st_dataset_t;
typedef struct st_experiment st_experiment_t;

typedef enum {
    ST_KERNEL_LINEAR = 0,
    ST_KERNEL_RBF = 1,
    ST_KERNEL_LAPLACIAN = 2,
    ST_KERNEL_SIGMOID = 3,
    ST_KERNEL_IMQ = 4,
    ST_KERNEL_POLYNOMIAL = 5,
    ST_KERNEL_COSINE = 6
} st_kernel;

ST_API int st_api_version(void);
/* Message of the last failure on this thread; empty if none. Never NULL. */
ST_API const char* st_last_error(void);
/* Static name of a status code. */
ST_API const char* st_error_string(st_status code);

/* Configuration. */
ST_API st_status st_config_default(st_config_t** out);
ST_API st_status st_config_load(const char* path, st_config_t** out);
ST_API st_status st_config_parse(const char* text, st_config_t** out);
ST_API st_status st_config_set(st_config_t* cfg, const char* section, const char* key, const char* value);
/* Copies the value (NUL-terminated) into buf; *needed receives its length + 1. */
ST_API st_status st_config_get(const st_config_t* cfg, const char* section, const char* key, char* buf,
                               size_t buf_size, size_t* needed);
ST_API void st_config_free(st_config_t* cfg);

/* Experiments. */
ST_API size_t st_experiment_count(void);
/* Name of experiment i, or NULL when out of range. */
ST_API const char* st_experiment_name(size_t i);
ST_API st_status st_experiment_run(const char* command, const st_config_t* cfg, const char* out_dir,
                                   st_experiment_t** out);
/* JSON run record; valid until the handle is freed. */
ST_API const char* st_experiment_record_json(const st_experiment_t* run);
ST_API void st_experiment_free(st_experiment_t* run);

/* Models. */
ST_API st_status st_model_load(const char* path, st_model_t** out);
ST_API size_t st_model_skip_count(const st_model_t* model);
ST_API size_t st_model_item_numel(const st_model_t* model);
/* Denoises `batch` items of st_model_item_numel values at one sigma.
 * `rho` holds st_model_skip_count coefficients or is NULL for the untouched
 * network. */
ST_API st_status st_model_denoise(const st_model_t* model, const double* x, size_t batch, double sigma,
                                  const double* rho, double* out);
ST_API void st_model_free(st_model_t* model);

/* Datasets. */
ST_API st_status st_dataset_generate(const char* kind, size_t count, size_t image_size, uint64_t seed,
                                     st_dataset_t** out);
ST_API st_status st_dataset_load(const char* path, st_dataset_t** out);
ST_API st_status st_dataset_save(const st_dataset_t* data, const char* path);
ST_API size_t st_dataset_size(const st_dataset_t* data);
ST_API size_t st_dataset_item_numel(const st_dataset_t* data);
/* Row-major images, st_dataset_size * st_dataset_item_numel values. */
ST_API const double* st_dataset_images(const st_dataset_t* data);
ST_API void st_dataset_free(st_dataset_t* data);

/* Numerics. */
ST_API st_status st_karras_grid(double sigma_min, double sigma_max, double exponent, size_t n, double* out);
/* Unbiased MMD^2 between x [m, dim] and y [n, dim]. bandwidth <= 0 selects
 * the median heuristic for rbf and laplacian and is ignored otherwise. */
ST_API st_status st_mmd_unbiased(st_kernel kernel, double bandwidth, const double* x, size_t m, const double* y,
                                 size_t n, size_t dim, double* out);

#ifdef __cplusplus
}
#endif

#endif
