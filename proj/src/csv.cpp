#include "skiptune/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "skiptune/errors.hpp"

namespace skiptune {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::size_t CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw ConfigError("csv '" + schema + "' has no column " + name);
}

namespace {

void write_row(std::ostream& out, const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
        if (row[i].find_first_of(",\n\"") != std::string::npos)
            throw ConfigError("csv field contains a separator: " + row[i]);
        out << (i ? "," : "") << row[i];
    }
    out << '\n';
}

std::vector<std::string> split_row(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

void write_csv(const std::string& path, const CsvTable& table) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "# schema: " << table.schema << " v" << table.version << '\n';
    write_row(out, table.header);
    for (const auto& row : table.rows) {
        if (row.size() != table.header.size())
            throw DimensionError("csv row has " + std::to_string(row.size()) + " fields, header has " +
                                 std::to_string(table.header.size()));
        write_row(out, row);
    }
    if (!out) throw IoError("failed writing " + path);
}

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    CsvTable table;
    std::string line;
    if (!std::getline(in, line) || line.rfind("# schema: ", 0) != 0) throw IoError(path + ": missing schema line");
    const std::string tag = line.substr(10);
    const auto v = tag.rfind(" v");
    if (v == std::string::npos) throw IoError(path + ": malformed schema line");
    table.schema = tag.substr(0, v);
    table.version = std::stoi(tag.substr(v + 2));
    if (!std::getline(in, line)) throw IoError(path + ": missing header");
    table.header = split_row(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto row = split_row(line);
        if (row.size() != table.header.size()) throw IoError(path + ": ragged row");
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace skiptune
