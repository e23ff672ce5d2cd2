#include "skiptune/config.hpp"

#include <boost/property_tree/ini_parser.hpp>

#include <fstream>
#include <sstream>

#include "skiptune/errors.hpp"

namespace skiptune {

namespace {

enum class Kind { text, real, count, u64, flag, reals, counts, words };

struct Entry {
    const char* section;
    const char* key;
    const char* value;
    Kind kind;
};

// Defaults sized for the 8x8 toy problem on one CPU core.
const std::vector<Entry>& defaults() {
    static const std::vector<Entry> table = {
        {"run", "seed", "0", Kind::u64},
        {"run", "workers", "1", Kind::count},
        {"run", "chunk", "256", Kind::count},

        {"data", "kind", "gmm", Kind::text},
        {"data", "train_count", "4096", Kind::count},
        {"data", "heldout_count", "512", Kind::count},
        {"data", "image_size", "8", Kind::count},
        {"data", "seed", "1", Kind::u64},
        {"data", "path", "", Kind::text},
        {"data", "heldout_path", "", Kind::text},

        {"model", "base_channels", "8", Kind::count},
        {"model", "depth", "3", Kind::count},
        {"model", "blocks_per_resolution", "1", Kind::count},
        {"model", "groupnorm_groups", "4", Kind::count},
        {"model", "time_embedding_dim", "16", Kind::count},
        {"model", "num_classes", "0", Kind::count},
        {"model", "group_alignment", "straddling", Kind::text},
        {"model", "sigma_data", "0.5", Kind::real},
        {"model", "sigma_min", "0.002", Kind::real},
        {"model", "sigma_max", "80", Kind::real},
        {"model", "init_seed", "0", Kind::u64},
        {"model", "checkpoint", "", Kind::text},

        {"train", "steps", "5000", Kind::count},
        {"train", "batch", "32", Kind::count},
        {"train", "lr", "0.002", Kind::real},
        {"train", "warmup", "100", Kind::count},
        {"train", "weighting", "edm", Kind::text},

        {"classifier", "steps", "600", Kind::count},
        {"classifier", "batch", "64", Kind::count},
        {"classifier", "lr", "0.002", Kind::real},
        {"classifier", "path", "", Kind::text},
        {"classifier", "min_accuracy", "0.9", Kind::real},

        {"sampler", "solver", "heun", Kind::text},
        {"sampler", "steps", "18", Kind::count},
        {"sampler", "unipc_order", "2", Kind::count},
        {"sampler", "count", "4096", Kind::count},
        {"sampler", "tau", "0", Kind::real},

        {"profile", "rho_bottom", "1", Kind::real},
        {"profile", "rho_top", "1", Kind::real},
        {"profile", "reach_top", "false", Kind::flag},
        {"profile", "schedule", "constant", Kind::text},
        {"profile", "rho0", "1", Kind::real},
        {"profile", "mode", "at_concat", Kind::text},

        {"sweep", "rhos", "0.5 0.55 0.6 0.65 0.7 0.75 0.8 0.85 0.9 0.95 1", Kind::reals},
        {"sweep", "steps", "5 10 20", Kind::counts},
        {"sweep", "taus", "0 0.25 0.5 0.75 1", Kind::reals},
        {"sweep", "stochastic_rhos", "0.6 0.7 0.8 0.9 1", Kind::reals},
        {"sweep", "windows", "13", Kind::count},
        {"sweep", "window_grid_steps", "52", Kind::count},
        {"sweep", "window_rho", "0.7", Kind::real},

        {"metrics", "reference_count", "4096", Kind::count},
        {"metrics", "kernel", "rbf", Kind::text},
        {"metrics", "probe_sigma", "5", Kind::real},
        {"metrics", "probe_batch", "16", Kind::count},
        {"metrics", "probe_rhos", "0.5 0.6 0.7 0.8 0.9 1", Kind::reals},
        {"metrics", "probe_resamples", "20", Kind::count},
        {"metrics", "probe_scalarization", "output_sum", Kind::text},
        {"metrics", "loss_points", "5", Kind::count},
        {"metrics", "loss_count", "512", Kind::count},

        {"finetune", "steps", "200", Kind::count},
        {"finetune", "batch", "32", Kind::count},
        {"finetune", "lr", "0.01", Kind::real},
        {"finetune", "init_rho", "0.9", Kind::real},
        {"finetune", "variants", "sigmoid unconstrained", Kind::words},
        {"finetune", "milestones", "0 2048 4096", Kind::counts},
        {"finetune", "hybrid_weight", "1", Kind::real},
        {"finetune", "full_lr", "0.0001", Kind::real},

        {"mmd", "count", "256", Kind::count},
        {"mmd", "kernels", "linear rbf laplacian sigmoid imq polynomial cosine", Kind::words},
        {"mmd", "rho", "0.7", Kind::real},
        {"mmd", "steps", "18", Kind::count},
    };
    return table;
}

const Entry& entry(const std::string& section, const std::string& key) {
    for (const auto& e : defaults())
        if (section == e.section && key == e.key) return e;
    throw ConfigError("unknown config key [" + section + "] " + key);
}

std::string where(const std::string& section, const std::string& key) { return "[" + section + "] " + key; }

std::vector<std::string> split_list(const std::string& text) {
    std::string spaced = text;
    for (char& c : spaced)
        if (c == ',') c = ' ';
    std::istringstream in(spaced);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

double to_real(const std::string& text, const std::string& at) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        throw ConfigError(at + ": expected a number, got '" + text + "'");
    }
    if (used != text.size()) throw ConfigError(at + ": expected a number, got '" + text + "'");
    return v;
}

std::uint64_t to_u64(const std::string& text, const std::string& at) {
    if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError(at + ": expected a non-negative integer, got '" + text + "'");
    try {
        return std::stoull(text);
    } catch (const std::exception&) {
        throw ConfigError(at + ": integer out of range: " + text);
    }
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
    for (const auto& e : defaults()) values_[e.section][e.key] = e.value;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("config: " + std::string(e.message()) + " at line " + std::to_string(e.line()));
    }
    ExperimentConfig cfg;
    for (const auto& [section, keys] : tree) {
        if (keys.empty() && !keys.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
        for (const auto& [key, value] : keys) cfg.set(section, key, trim(value.data()));
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str());
}

void ExperimentConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    entry(section, key);
    values_[section][key] = value;
}

const std::string& ExperimentConfig::get(const std::string& section, const std::string& key) const {
    entry(section, key);
    return values_.at(section).at(key);
}

double ExperimentConfig::real(const std::string& section, const std::string& key) const {
    return to_real(get(section, key), where(section, key));
}

std::size_t ExperimentConfig::count(const std::string& section, const std::string& key) const {
    return static_cast<std::size_t>(to_u64(get(section, key), where(section, key)));
}

std::uint64_t ExperimentConfig::u64(const std::string& section, const std::string& key) const {
    return to_u64(get(section, key), where(section, key));
}

bool ExperimentConfig::flag(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(where(section, key) + ": expected true or false, got '" + v + "'");
}

std::vector<double> ExperimentConfig::reals(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    for (const auto& w : split_list(get(section, key))) out.push_back(to_real(w, where(section, key)));
    return out;
}

std::vector<std::size_t> ExperimentConfig::counts(const std::string& section, const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& w : split_list(get(section, key)))
        out.push_back(static_cast<std::size_t>(to_u64(w, where(section, key))));
    return out;
}

std::vector<std::string> ExperimentConfig::words(const std::string& section, const std::string& key) const {
    return split_list(get(section, key));
}

void ExperimentConfig::validate() const {
    for (const auto& e : defaults()) {
        switch (e.kind) {
            case Kind::text: break;
            case Kind::real: real(e.section, e.key); break;
            case Kind::count: count(e.section, e.key); break;
            case Kind::u64: u64(e.section, e.key); break;
            case Kind::flag: flag(e.section, e.key); break;
            case Kind::reals: reals(e.section, e.key); break;
            case Kind::counts: counts(e.section, e.key); break;
            case Kind::words: break;
        }
    }
}

std::string ExperimentConfig::to_ini() const {
    std::ostringstream out;
    std::string section;
    for (const auto& e : defaults()) {
        if (section != e.section) {
            if (!section.empty()) out << '\n';
            section = e.section;
            out << '[' << section << "]\n";
        }
        out << e.key << " = " << values_.at(e.section).at(e.key) << '\n';
    }
    return out.str();
}

void ExperimentConfig::write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << to_ini();
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace skiptune
