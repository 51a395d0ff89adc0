#include "cactusnet/csv.hpp"

#include <charconv>
#include <fstream>

#include "cactusnet/binary_io.hpp"
#include "cactusnet/error.hpp"

namespace cnl::csv {

std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<Row> read(const std::filesystem::path& path, std::string_view header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw FormatError(FormatError::Kind::Corrupt,
                      path.string() + ": expected header '" + std::string(header) + "', got '" + line + "'");
  }
  const std::size_t width = split(header).size();
  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto row = split(line);
    if (row.size() != width) {
      throw FormatError(FormatError::Kind::Corrupt, path.string() + ":" + std::to_string(lineno) + ": expected " +
                                                        std::to_string(width) + " fields");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write(const std::filesystem::path& path, std::string_view header, const std::vector<std::string>& lines) {
  std::string out(header);
  out += '\n';
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  io::write_file_atomic(path, out);
}

namespace {

template <typename T>
T parse(const std::string& field) {
  T v{};
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw FormatError(FormatError::Kind::Corrupt, "malformed CSV number '" + field + "'");
  }
  return v;
}

}  // namespace

double to_double(const std::string& field) { return parse<double>(field); }
long long to_int(const std::string& field) { return parse<long long>(field); }
unsigned long long to_uint(const std::string& field) { return parse<unsigned long long>(field); }

}  // namespace cnl::csv
