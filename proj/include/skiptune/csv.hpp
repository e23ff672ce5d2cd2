#pragma once

// Versioned CSV tables: a "# schema: <name> v<version>" line, a header row,
// then data rows. Reals are written with %.17g so they round-trip exactly.

#include <string>
#include <vector>

namespace skiptune {

std::string format_double(double v);

struct CsvTable {
    std::string schema;
    int version = 1;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Index of a header column; ConfigError if absent.
    std::size_t column(const std::string& name) const;
};

void write_csv(const std::string& path, const CsvTable& table);
// Reads a file written by write_csv. Fields never contain commas or quotes.
CsvTable read_csv(const std::string& path);

}  // namespace skiptune
