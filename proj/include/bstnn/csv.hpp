#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace bstnn {

// Minimal reader for comma-separated files with a header row. No quoting.
class CsvReader {
public:
    explicit CsvReader(const std::filesystem::path& path);

    const std::vector<std::string>& header() const { return header_; }
    // Index of a header column; throws DataError when absent.
    std::size_t column(std::string_view name) const;

    // Reads the next record; false at end of file. Blank lines are skipped.
    bool next();
    std::size_t line() const { return line_; }
    const std::vector<std::string_view>& fields() const { return fields_; }

    double number(std::size_t col) const;
    long long integer(std::size_t col) const;
    std::string text(std::size_t col) const;
    bool boolean(std::size_t col) const;

private:
    [[noreturn]] void fail(const std::string& what) const;

    std::filesystem::path path_;
    std::ifstream in_;
    std::string buffer_;
    std::vector<std::string> header_;
    std::vector<std::string_view> fields_;
    std::size_t line_ = 0;
};

// Shortest representation that round-trips exactly; "nan" for NaN.
std::string format_double(double v);

void ensure_directory(const std::filesystem::path& dir);
std::ofstream open_output(const std::filesystem::path& path);

} // namespace bstnn
