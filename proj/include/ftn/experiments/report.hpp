#pragma once

// Run directory layout shared by every experiment:
//   resolved_config.json  full configuration after defaults and overrides
//   metrics.csv           per-evaluation rows (deterministic given config)
//   timing.csv            wall-clock seconds per metrics row
//   summary.json          headline results and the build identifier
// plus experiment-specific CSVs and checkpoints.

#include "ftn/error.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <variant>
#include <vector>

#ifndef FTN_BUILD_ID
#define FTN_BUILD_ID "unknown"
#endif

namespace ftn::exp {

inline constexpr int kCsvSchemaVersion = 1;

inline std::string build_id() { return FTN_BUILD_ID; }

/// Floats use 9 significant digits, enough to round-trip a float.
inline std::string format_real(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

using Cell = std::variant<std::int64_t, double, std::string>;

inline std::string format_cell(const Cell& c) {
    if (const auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
    if (const auto* d = std::get_if<double>(&c)) return format_real(*d);
    return std::get<std::string>(c);
}

/// Minimal CSV writer; cells never contain separators so no quoting.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : path_(path), out_(path) {
        if (!out_) throw IoError(path.string() + ": cannot open for writing");
        columns_ = header.size();
        write_line(header);
    }

    void row(const std::vector<Cell>& cells) {
        if (cells.size() != columns_) {
            throw Error(ErrorCategory::generic, path_.string() + ": row has " + std::to_string(cells.size()) +
                                                    " cells, header has " + std::to_string(columns_));
        }
        std::vector<std::string> text;
        text.reserve(cells.size());
        for (const auto& c : cells) text.push_back(format_cell(c));
        write_line(text);
    }

    void flush() { out_.flush(); }

private:
    void write_line(const std::vector<std::string>& cells) {
        for (std::size_t k = 0; k < cells.size(); ++k) out_ << (k ? "," : "") << cells[k];
        out_ << '\n';
        if (!out_) throw IoError(path_.string() + ": write failed");
    }

    std::filesystem::path path_;
    std::ofstream out_;
    std::size_t columns_ = 0;
};

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw IoError(path.string() + ": cannot open for writing");
    f << j.dump(2) << '\n';
    if (!f) throw IoError(path.string() + ": write failed");
}

inline std::filesystem::path prepare_run_dir(const std::filesystem::path& dir, const nlohmann::json& resolved) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError(dir.string() + ": cannot create output directory: " + ec.message());
    write_json(dir / "resolved_config.json", resolved);
    return dir;
}

inline nlohmann::json summary_header(const nlohmann::json& resolved) {
    return {{"experiment", resolved.at("experiment")},
            {"seed", resolved.at("seed")},
            {"build_id", build_id()},
            {"csv_schema_version", kCsvSchemaVersion}};
}

/// Seconds since construction.
class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

} // namespace ftn::exp
