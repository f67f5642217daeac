#include "bstnn/csv.hpp"

#include "bstnn/errors.hpp"

#include <charconv>
#include <cmath>

namespace bstnn {

namespace {

void split(std::string_view line, std::vector<std::string_view>& out) {
    out.clear();
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        std::string_view field = line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                                   : comma - start);
        while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.remove_suffix(1);
        while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
        out.push_back(field);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
}

} // namespace

CsvReader::CsvReader(const std::filesystem::path& path) : path_(path), in_(path) {
    if (!in_) throw DataError("cannot open " + path.string());
    if (!std::getline(in_, buffer_)) fail("missing header row");
    line_ = 1;
    std::vector<std::string_view> cols;
    split(buffer_, cols);
    for (auto c : cols) header_.emplace_back(c);
}

std::size_t CsvReader::column(std::string_view name) const {
    for (std::size_t i = 0; i < header_.size(); ++i) {
        if (header_[i] == name) return i;
    }
    throw DataError(path_.string() + ": missing column '" + std::string(name) + "'");
}

bool CsvReader::next() {
    while (std::getline(in_, buffer_)) {
        ++line_;
        if (buffer_.empty() || buffer_ == "\r") continue;
        split(buffer_, fields_);
        if (fields_.size() != header_.size()) {
            fail("expected " + std::to_string(header_.size()) + " fields, got " +
                 std::to_string(fields_.size()));
        }
        return true;
    }
    return false;
}

double CsvReader::number(std::size_t col) const {
    const std::string_view f = fields_.at(col);
    if (f == "nan" || f == "NaN" || f.empty()) return std::nan("");
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
    if (ec != std::errc() || ptr != f.data() + f.size()) {
        fail("column '" + header_[col] + "': '" + std::string(f) + "' is not a number");
    }
    return v;
}

long long CsvReader::integer(std::size_t col) const {
    const std::string_view f = fields_.at(col);
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
    if (ec != std::errc() || ptr != f.data() + f.size()) {
        fail("column '" + header_[col] + "': '" + std::string(f) + "' is not an integer");
    }
    return v;
}

std::string CsvReader::text(std::size_t col) const { return std::string(fields_.at(col)); }

bool CsvReader::boolean(std::size_t col) const {
    const std::string_view f = fields_.at(col);
    if (f == "1" || f == "true") return true;
    if (f == "0" || f == "false") return false;
    fail("column '" + header_[col] + "': '" + std::string(f) + "' is not a boolean");
}

void CsvReader::fail(const std::string& what) const {
    throw DataError(path_.string() + ":" + std::to_string(line_) + ": " + what);
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

void ensure_directory(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
        throw DataError("cannot create output directory " + dir.string());
    }
}

std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

} // namespace bstnn
