#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cnl::csv {

// Plain comma-separated text: no quoting, fields never contain commas.
using Row = std::vector<std::string>;

std::vector<std::string> split(std::string_view line);

// Rows after the header. Throws FormatError if the header differs from
// `header` (a comma-joined column list).
std::vector<Row> read(const std::filesystem::path& path, std::string_view header);

// Writes header + lines atomically; each line is already comma-joined.
void write(const std::filesystem::path& path, std::string_view header, const std::vector<std::string>& lines);

double to_double(const std::string& field);
long long to_int(const std::string& field);
unsigned long long to_uint(const std::string& field);

}  // namespace cnl::csv
