#include <cmath>
#include <string>

#include "cactusnet/binary_io.hpp"
#include "cactusnet/data.hpp"
#include "cactusnet/error.hpp"

namespace cnl::data {
namespace {

std::uint32_t be32(const std::vector<char>& b, std::size_t off) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 3]));
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

std::string hex(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int sh = 28; sh >= 0; sh -= 4) s.push_back(digits[(v >> sh) & 0xf]);
  return s;
}

void check_magic(const std::vector<char>& b, std::uint32_t expected, const std::filesystem::path& path) {
  if (b.size() < 4) throw FormatError(FormatError::Kind::Truncated, path.string() + ": too short for an IDX header");
  const auto magic = be32(b, 0);
  if (magic != expected) {
    throw FormatError(FormatError::Kind::Magic,
                      path.string() + ": IDX magic " + hex(magic) + ", expected " + hex(expected));
  }
}

}  // namespace

Tensor load_idx_images(const std::filesystem::path& path) {
  const auto b = io::read_file(path);
  check_magic(b, kIdxImagesMagic, path);
  if (b.size() < 16) throw FormatError(FormatError::Kind::Truncated, path.string() + ": truncated IDX header");
  const std::size_t n = be32(b, 4), rows = be32(b, 8), cols = be32(b, 12);
  const std::size_t need = n * rows * cols;
  if (b.size() - 16 < need) {
    throw FormatError(FormatError::Kind::Truncated,
                      path.string() + ": header declares " + std::to_string(n) + " images of " +
                          std::to_string(rows) + "x" + std::to_string(cols) + " but payload holds " +
                          std::to_string(rows * cols > 0 ? (b.size() - 16) / (rows * cols) : 0));
  }
  Tensor t({n, rows, cols, 1});
  for (std::size_t i = 0; i < need; ++i) {
    t[i] = static_cast<float>(static_cast<unsigned char>(b[16 + i])) / 255.0f;
  }
  return t;
}

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  const auto b = io::read_file(path);
  check_magic(b, kIdxLabelsMagic, path);
  if (b.size() < 8) throw FormatError(FormatError::Kind::Truncated, path.string() + ": truncated IDX header");
  const std::size_t n = be32(b, 4);
  if (b.size() - 8 < n) {
    throw FormatError(FormatError::Kind::Truncated, path.string() + ": header declares " + std::to_string(n) +
                                                        " labels but payload holds " + std::to_string(b.size() - 8));
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<unsigned char>(b[8 + i]);
  return labels;
}

LabeledBatch load_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels) {
  LabeledBatch out{load_idx_images(images), {}};
  if (labels) {
    out.labels = load_idx_labels(*labels);
    if (out.labels.size() != out.images.rows()) {
      throw DataError(labels->string() + ": " + std::to_string(out.labels.size()) + " labels for " +
                      std::to_string(out.images.rows()) + " images");
    }
  }
  return out;
}

void write_idx_images(const std::filesystem::path& path, const Tensor& images) {
  if (images.rank() != 4 || images.dim(3) != 1) {
    throw ShapeError("IDX images must be [n,rows,cols,1], got " + shape_str(images.shape()));
  }
  std::string out;
  put_be32(out, kIdxImagesMagic);
  put_be32(out, static_cast<std::uint32_t>(images.dim(0)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(1)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(2)));
  for (float v : images.values()) {
    const long q = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
    out.push_back(static_cast<char>(q));
  }
  io::write_file_atomic(path, out);
}

void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels) {
  std::string out;
  put_be32(out, kIdxLabelsMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw DataError("IDX labels must fit in a byte, got " + std::to_string(l));
    out.push_back(static_cast<char>(l));
  }
  io::write_file_atomic(path, out);
}

}  // namespace cnl::data
