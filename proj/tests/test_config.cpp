#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "skiptune/config.hpp"
#include "skiptune/errors.hpp"

using namespace skiptune;

TEST_CASE("defaults are complete and typed") {
    const ExperimentConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.u64("run", "seed") == 0);
    CHECK(cfg.real("model", "sigma_max") == 80.0);
    CHECK(cfg.count("sweep", "windows") == 13);
    CHECK(cfg.reals("sweep", "rhos").size() == 11);
    CHECK(cfg.counts("sweep", "steps") == std::vector<std::size_t>{5, 10, 20});
    CHECK(cfg.words("mmd", "kernels").size() == 7);
    CHECK_FALSE(cfg.flag("profile", "reach_top"));
}

TEST_CASE("parse overrides and keeps the rest") {
    const auto cfg = ExperimentConfig::parse(
        "# comment\n"
        "[run]\n"
        "seed = 42\n"
        "; another comment\n"
        "[sweep]\n"
        "rhos = 0.5, 0.75,1\n"
        "steps=3 4\n");
    CHECK(cfg.u64("run", "seed") == 42);
    CHECK(cfg.reals("sweep", "rhos") == std::vector<double>{0.5, 0.75, 1.0});
    CHECK(cfg.counts("sweep", "steps") == std::vector<std::size_t>{3, 4});
    CHECK(cfg.count("run", "chunk") == 256);
}

TEST_CASE("resolved config round-trips") {
    ExperimentConfig cfg;
    cfg.set("data", "kind", "shapes");
    cfg.set("sampler", "tau", "0.25");
    cfg.set("finetune", "variants", "sigmoid");
    const auto back = ExperimentConfig::parse(cfg.to_ini());
    CHECK(back.values() == cfg.values());
    CHECK(back.to_ini() == cfg.to_ini());
}

TEST_CASE("configuration errors") {
    CHECK_THROWS_AS(ExperimentConfig::parse("[run]\nsed = 1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[nosuch]\nseed = 1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[run]\nseed = -1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[run]\nseed = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[train]\nlr = fast\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[sweep]\nrhos = 0.5 x\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[profile]\nreach_top = maybe\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("seed = 1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[run\nseed = 1\n"), ConfigError);
    // Inline comments are not stripped, so they make the value invalid.
    CHECK_THROWS_AS(ExperimentConfig::parse("[run]\nseed = 1 # one\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/skiptune.ini"), ConfigError);
    ExperimentConfig cfg;
    CHECK_THROWS_AS(cfg.set("run", "nope", "1"), ConfigError);
    CHECK_THROWS_AS(cfg.get("nope", "seed"), ConfigError);
}

TEST_CASE("write and load") {
    const auto path = std::filesystem::temp_directory_path() / "skiptune_test_config.ini";
    ExperimentConfig cfg;
    cfg.set("run", "seed", "7");
    cfg.write(path.string());
    const auto back = ExperimentConfig::load(path.string());
    CHECK(back.u64("run", "seed") == 7);
    std::filesystem::remove(path);
}
