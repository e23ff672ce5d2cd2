// Command-line front end. Talks to the library only through the C API.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "skiptune/skiptune.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int exit_code(st_status s) {
    switch (s) {
        case ST_OK: return kExitOk;
        case ST_ERR_NUMERIC: return kExitNumeric;
        case ST_ERR_INTERNAL: return kExitInternal;
        default: return kExitConfig;
    }
}

int fail(st_status s, const std::string& context) {
    std::fprintf(stderr, "skiptune: %s: %s: %s\n", context.c_str(), st_error_string(s), st_last_error());
    return exit_code(s);
}

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::string checkpoint;
    std::vector<std::string> overrides;
};

int run(const std::string& command, const Options& opt, bool quiet) {
    st_config_t* cfg = nullptr;
    st_status s = opt.config.empty() ? st_config_default(&cfg) : st_config_load(opt.config.c_str(), &cfg);
    if (s != ST_OK) return fail(s, "config");
    auto apply = [&](const char* section, const char* key, const std::string& value) {
        const st_status r = st_config_set(cfg, section, key, value.c_str());
        if (r != ST_OK) fail(r, std::string("--") + key);
        return r;
    };
    for (const auto& o : opt.overrides) {
        const auto dot = o.find('.'), eq = o.find('=');
        if (dot == std::string::npos || eq == std::string::npos || dot > eq) {
            std::fprintf(stderr, "skiptune: --set expects section.key=value, got '%s'\n", o.c_str());
            st_config_free(cfg);
            return kExitConfig;
        }
        s = apply(o.substr(0, dot).c_str(), o.substr(dot + 1, eq - dot - 1).c_str(), o.substr(eq + 1));
        if (s != ST_OK) {
            st_config_free(cfg);
            return exit_code(s);
        }
    }
    if (opt.seed && (s = apply("run", "seed", std::to_string(*opt.seed))) != ST_OK) {
        st_config_free(cfg);
        return exit_code(s);
    }
    if (!opt.checkpoint.empty() && (s = apply("model", "checkpoint", opt.checkpoint)) != ST_OK) {
        st_config_free(cfg);
        return exit_code(s);
    }
    st_experiment_t* exp = nullptr;
    s = st_experiment_run(command.c_str(), cfg, opt.out.c_str(), &exp);
    st_config_free(cfg);
    if (s != ST_OK) return fail(s, command);
    if (!quiet) std::fputs(st_experiment_record_json(exp), stdout);
    st_experiment_free(exp);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Skip-connection scaling laboratory for small diffusion models"};
    app.require_subcommand(1);
    app.fallthrough();
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "Do not print the run record");
    auto* version = app.add_flag("--version", "Print the C API version and exit");
    version->configurable(false);

    Options opt;
    std::string chosen;
    for (std::size_t i = 0; i < st_experiment_count(); ++i) {
        const std::string name = st_experiment_name(i);
        auto* sub = app.add_subcommand(name, "Run the " + name + " experiment");
        sub->add_option("--config", opt.config, "INI configuration file")->check(CLI::ExistingFile);
        sub->add_option("--seed", opt.seed, "Override [run] seed");
        sub->add_option("--out", opt.out, "Output directory")->capture_default_str();
        sub->add_option("--checkpoint", opt.checkpoint, "Override [model] checkpoint");
        sub->add_option("--set", opt.overrides, "Override a key: section.key=value (repeatable)");
        sub->callback([&chosen, name] { chosen = name; });
    }

    // --version needs no subcommand.
    for (int i = 1; i < argc; ++i) {
        if (std::string(argv[i]) == "--version") {
            std::printf("skiptune C API %d\n", st_api_version());
            return kExitOk;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }
    return run(chosen, opt, quiet);
}
