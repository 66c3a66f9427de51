#pragma once

// Minimal numeric CSV ingestion: comma-separated, optional non-numeric
// header row, blank lines ignored.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mpa/error.hpp"
#include "mpa/labelstats.hpp"
#include "mpa/tinynet.hpp"

namespace mpa::csv {

namespace detail {
inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <typename T>
std::optional<T> parse(std::string_view s) {
    T value{};
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc{} || ptr != end || s.empty()) return std::nullopt;
    return value;
}
}  // namespace detail

/// Rows of numbers with a fixed column count. The first non-blank line may
/// be a header; any other unparsable field raises CsvError with its line.
template <typename T>
std::vector<std::vector<T>> read_rows(std::istream& in, std::size_t expected_columns = 0) {
    std::vector<std::vector<T>> rows;
    std::string line;
    std::size_t line_no = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++line_no;
        const auto trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        const auto cols = detail::fields(trimmed);
        std::vector<T> row;
        bool ok = true;
        for (auto f : cols) {
            auto v = detail::parse<T>(f);
            if (!v) {
                ok = false;
                break;
            }
            row.push_back(*v);
        }
        const bool header = first && !ok && std::any_of(cols.begin(), cols.end(), [](std::string_view f) {
            return std::any_of(f.begin(), f.end(), [](char ch) { return std::isalpha(static_cast<unsigned char>(ch)); });
        });
        first = false;
        if (header) {
            if (expected_columns == 0) expected_columns = cols.size();
            continue;
        }
        if (!ok) throw CsvError("unparsable field", line_no);
        if (expected_columns == 0) expected_columns = row.size();
        if (row.size() != expected_columns) {
            throw CsvError("expected " + std::to_string(expected_columns) + " columns, found " +
                               std::to_string(row.size()),
                           line_no);
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw CsvError("no data rows", line_no == 0 ? 1 : line_no);
    return rows;
}

inline std::ifstream open(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path);
    return in;
}

/// `source_label,target_label` pairs. Zero overrides mean "infer as max + 1".
inline PairedLabelDataset read_label_pairs(std::istream& in, std::size_t num_source = 0, std::size_t num_target = 0) {
    const auto rows = read_rows<std::size_t>(in, 2);
    std::vector<LabelPair> pairs;
    for (const auto& r : rows) pairs.push_back({r[0], r[1]});
    auto inferred = PairedLabelDataset::from_pairs(pairs);
    return {std::move(pairs), num_source ? num_source : inferred.num_source(),
            num_target ? num_target : inferred.num_target()};
}

inline std::vector<Label> read_labels(std::istream& in) {
    std::vector<Label> out;
    for (const auto& r : read_rows<std::size_t>(in, 1)) out.push_back(r[0]);
    return out;
}

inline std::vector<Vector> read_vectors(std::istream& in) {
    std::vector<Vector> out;
    for (const auto& r : read_rows<double>(in)) out.push_back(Eigen::Map<const Vector>(r.data(), Eigen::Index(r.size())));
    return out;
}

/// Shortest decimal representation that round-trips exactly.
inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

inline void write_vectors(std::ostream& out, std::span<const Vector> xs) {
    for (const auto& x : xs) {
        for (Eigen::Index j = 0; j < x.size(); ++j) out << (j ? "," : "") << format_double(x(j));
        out << '\n';
    }
}

inline void write_labels(std::ostream& out, std::span<const Label> labels, std::string_view header = "label") {
    out << header << '\n';
    for (auto l : labels) out << l << '\n';
}

inline void write_label_pairs(std::ostream& out, const PairedLabelDataset& data) {
    out << "source_label,target_label\n";
    for (const auto& p : data.pairs()) out << p.source << ',' << p.target << '\n';
}

}  // namespace mpa::csv
