#pragma once

// Experiment configuration: INI text with [section] headers and key = value
// lines (full-line comments start with # or ;). Every key has a default; an
// unknown section or key is a ConfigError so typos never pass silently. List
// values are separated by spaces or commas.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace skiptune {

class ExperimentConfig {
public:
    ExperimentConfig();

    static ExperimentConfig parse(const std::string& text);
    static ExperimentConfig load(const std::string& path);

    void set(const std::string& section, const std::string& key, const std::string& value);
    const std::string& get(const std::string& section, const std::string& key) const;

    double real(const std::string& section, const std::string& key) const;
    std::size_t count(const std::string& section, const std::string& key) const;
    std::uint64_t u64(const std::string& section, const std::string& key) const;
    bool flag(const std::string& section, const std::string& key) const;
    std::vector<double> reals(const std::string& section, const std::string& key) const;
    std::vector<std::size_t> counts(const std::string& section, const std::string& key) const;
    std::vector<std::string> words(const std::string& section, const std::string& key) const;

    // Parses every typed value once so bad input fails before any work starts.
    void validate() const;

    // Fully resolved configuration, every key present, in a stable order.
    std::string to_ini() const;
    void write(const std::string& path) const;

    const std::map<std::string, std::map<std::string, std::string>>& values() const { return values_; }

private:
    std::map<std::string, std::map<std::string, std::string>> values_;
};

}  // namespace skiptune
