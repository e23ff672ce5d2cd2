// Exercises the shared library through its C header only.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "skiptune/skiptune.h"

TEST_CASE("version and status strings") {
    CHECK(st_api_version() == ST_API_VERSION);
    CHECK(std::string(st_error_string(ST_OK)) == "ok");
    CHECK(std::string(st_error_string(ST_ERR_NUMERIC)) == "numerical failure");
    CHECK(std::string(st_error_string(12345)) == "unknown status");
    CHECK(st_last_error() != nullptr);
}

TEST_CASE("config handles") {
    st_config_t* cfg = nullptr;
    REQUIRE(st_config_default(&cfg) == ST_OK);
    char buf[32];
    size_t needed = 0;
    REQUIRE(st_config_get(cfg, "model", "sigma_max", buf, sizeof buf, &needed) == ST_OK);
    CHECK(std::string(buf) == "80");
    CHECK(needed == 3);
    CHECK(st_config_set(cfg, "run", "seed", "5") == ST_OK);
    CHECK(st_config_set(cfg, "run", "bogus", "5") == ST_ERR_CONFIG);
    CHECK(std::string(st_last_error()).find("bogus") != std::string::npos);
    CHECK(st_config_set(nullptr, "run", "seed", "5") == ST_ERR_INVALID_ARGUMENT);
    st_config_free(cfg);
    st_config_free(nullptr);

    st_config_t* parsed = nullptr;
    CHECK(st_config_parse("[run]\nseed = x\n", &parsed) == ST_ERR_CONFIG);
    CHECK(parsed == nullptr);
    CHECK(st_config_load("/nonexistent.ini", &parsed) == ST_ERR_CONFIG);
}

TEST_CASE("experiment registry") {
    REQUIRE(st_experiment_count() == 12);
    CHECK(std::string(st_experiment_name(0)) == "gen-data");
    CHECK(st_experiment_name(12) == nullptr);
    st_config_t* cfg = nullptr;
    REQUIRE(st_config_default(&cfg) == ST_OK);
    const auto dir = std::filesystem::temp_directory_path() / "skiptune_capi_run";
    st_experiment_t* run = nullptr;
    CHECK(st_experiment_run("bogus", cfg, dir.string().c_str(), &run) == ST_ERR_CONFIG);
    CHECK(run == nullptr);
    REQUIRE(st_config_set(cfg, "data", "train_count", "8") == ST_OK);
    REQUIRE(st_config_set(cfg, "data", "heldout_count", "4") == ST_OK);
    REQUIRE(st_experiment_run("gen-data", cfg, dir.string().c_str(), &run) == ST_OK);
    CHECK(std::string(st_experiment_record_json(run)).find("\"gen-data\"") != std::string::npos);
    st_experiment_free(run);

    st_dataset_t* data = nullptr;
    REQUIRE(st_dataset_load((dir / "train.bin").string().c_str(), &data) == ST_OK);
    CHECK(st_dataset_size(data) == 8);
    CHECK(st_dataset_item_numel(data) == 64);
    st_dataset_t* again = nullptr;
    REQUIRE(st_dataset_generate("gmm", 8, 8, 1, &again) == ST_OK);
    CHECK(std::memcmp(st_dataset_images(data), st_dataset_images(again), 8 * 64 * sizeof(double)) == 0);
    st_dataset_free(data);
    st_dataset_free(again);
    CHECK(st_dataset_generate("nope", 8, 8, 1, &data) == ST_ERR_CONFIG);
    CHECK(st_model_load((dir / "missing.ckpt").string().c_str(), nullptr) == ST_ERR_INVALID_ARGUMENT);
    st_model_t* model = nullptr;
    CHECK(st_model_load((dir / "missing.ckpt").string().c_str(), &model) == ST_ERR_IO);
    st_config_free(cfg);
    std::filesystem::remove_all(dir);
}

TEST_CASE("numerics through the C API") {
    double grid[5];
    REQUIRE(st_karras_grid(0.002, 80.0, 7.0, 5, grid) == ST_OK);
    CHECK(grid[0] == 80.0);
    CHECK(grid[4] == 0.002);
    CHECK(grid[1] == doctest::Approx(17.5278).epsilon(1e-5));

    // Linear kernel, x = {0, 2}, y = {1, 1}: within-x 0, within-y 1, cross 1.
    const double x[] = {0.0, 2.0}, y[] = {1.0, 1.0};
    double mmd = 0.0;
    REQUIRE(st_mmd_unbiased(ST_KERNEL_LINEAR, 0.0, x, 2, y, 2, 1, &mmd) == ST_OK);
    CHECK(mmd == -1.0);
    CHECK(st_mmd_unbiased(ST_KERNEL_RBF, 0.0, x, 1, y, 2, 1, &mmd) == ST_ERR_DOMAIN);
    CHECK(st_mmd_unbiased(static_cast<st_kernel>(42), 0.0, x, 2, y, 2, 1, &mmd) == ST_ERR_INVALID_ARGUMENT);
    CHECK(st_mmd_unbiased(ST_KERNEL_RBF, 0.0, x, 2, y, 2, 0, &mmd) == ST_ERR_INVALID_ARGUMENT);
}
