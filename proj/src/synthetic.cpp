#include <algorithm>
#include <cmath>
#include <numbers>

#include "cactusnet/binary_io.hpp"
#include "cactusnet/data.hpp"
#include "cactusnet/error.hpp"
#include "cactusnet/rng.hpp"

namespace cnl::data {
namespace {

struct Blob {
  double cx, cy, sigma, amp;
};

struct Motif {
  int type;  // 0 stripes, 1 grid, 2 frame
  double angle, period, period2;
  double x0, y0, x1, y1;
};

std::vector<Blob> organic_params(std::size_t cls, std::uint64_t seed, double side) {
  Rng rng(mix_seed({seed, 0, cls}));
  std::vector<Blob> blobs(1 + rng.below(3));
  for (auto& b : blobs) {
    b.cx = rng.uniform(0.2, 0.8) * side;
    b.cy = rng.uniform(0.2, 0.8) * side;
    b.sigma = rng.uniform(0.07, 0.18) * side;
    b.amp = rng.uniform(0.6, 1.0);
  }
  return blobs;
}

Motif manufactured_params(std::size_t cls, std::uint64_t seed, double side) {
  Rng rng(mix_seed({seed, 1, cls}));
  Motif m{};
  m.type = static_cast<int>(cls % 3);
  // spread orientations of same-type classes by the golden ratio
  const double slot = std::fmod(static_cast<double>(cls / 3) * 0.6180339887, 1.0);
  m.angle = std::numbers::pi * std::fmod(slot + rng.uniform(0.0, 0.15), 1.0);
  m.period = rng.uniform(3.0, 7.0);
  m.period2 = rng.uniform(4.0, 9.0);
  const double a = rng.uniform(0.1, 0.35), b = rng.uniform(0.1, 0.35);
  m.x0 = a * side;
  m.y0 = b * side;
  m.x1 = (1.0 - rng.uniform(0.1, 0.35)) * side;
  m.y1 = (1.0 - rng.uniform(0.1, 0.35)) * side;
  return m;
}

void render_organic(const std::vector<Blob>& blobs, Rng& rng, std::size_t side, float* px) {
  const double dx = rng.uniform(-1.5, 1.5), dy = rng.uniform(-1.5, 1.5), gain = rng.uniform(0.85, 1.15);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      double v = 0.0;
      for (const auto& b : blobs) {
        const double ex = (static_cast<double>(x) - b.cx - dx) / b.sigma;
        const double ey = (static_cast<double>(y) - b.cy - dy) / b.sigma;
        v += b.amp * std::exp(-0.5 * (ex * ex + ey * ey));
      }
      v = gain * v + 0.05 * rng.normal();
      px[y * side + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

void render_manufactured(const Motif& m, Rng& rng, std::size_t side, float* px) {
  const double phase = rng.uniform(0.0, m.period), shift = rng.uniform(-1.0, 1.0);
  const double c = std::cos(m.angle), s = std::sin(m.angle);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double v = 0.0;
      if (m.type == 0) {
        const double u = fx * c + fy * s + phase;
        v = std::fmod(u, m.period) < m.period * 0.5 ? 0.9 : 0.1;
      } else if (m.type == 1) {
        const bool on_x = std::fmod(fx + phase, m.period) < 1.0;
        const bool on_y = std::fmod(fy + phase, m.period2) < 1.0;
        v = (on_x || on_y) ? 0.9 : 0.05;
      } else {
        const double x0 = m.x0 + shift, x1 = m.x1 + shift, y0 = m.y0 - shift, y1 = m.y1 - shift;
        const bool inside = fx >= x0 && fx <= x1 && fy >= y0 && fy <= y1;
        const bool edge = inside && (fx < x0 + 2 || fx > x1 - 2 || fy < y0 + 2 || fy > y1 - 2);
        v = edge ? 0.95 : (inside ? 0.3 : 0.0);
      }
      v += 0.05 * rng.normal();
      px[y * side + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

}  // namespace

SyntheticDataset generate_synthetic(std::size_t classes_per_family, std::size_t per_class, std::size_t image_side,
                                    std::uint64_t seed) {
  if (classes_per_family < 1 || per_class < 1) throw DataError("synthetic counts must be >= 1");
  if (image_side < 8) throw DataError("synthetic image side " + std::to_string(image_side) + " is too small (< 8)");
  SyntheticDataset ds;
  const std::size_t classes = 2 * classes_per_family;
  const std::size_t px = image_side * image_side;
  ds.images = Tensor({classes * per_class, image_side, image_side, 1});
  const auto side = static_cast<double>(image_side);
  for (std::size_t cls = 0; cls < classes; ++cls) {
    const bool organic = cls < classes_per_family;
    const std::size_t local = organic ? cls : cls - classes_per_family;
    ds.families.push_back(organic ? Family::Organic : Family::Manufactured);
    ds.class_names.push_back((organic ? "organic-" : "manufactured-") + std::to_string(local));
    const auto blobs = organic ? organic_params(local, seed, side) : std::vector<Blob>{};
    const auto motif = organic ? Motif{} : manufactured_params(local, seed, side);
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = cls * per_class + i;
      Rng rng(mix_seed({seed, 2, cls, i}));
      float* dst = ds.images.data() + row * px;
      if (organic) {
        render_organic(blobs, rng, image_side, dst);
      } else {
        render_manufactured(motif, rng, image_side, dst);
      }
      ds.labels.push_back(static_cast<int>(cls));
    }
  }
  return ds;
}

void save_synthetic(const std::filesystem::path& path, const SyntheticDataset& ds) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["shape"] = ds.images.shape();
  header["labels"] = ds.labels;
  header["class_names"] = ds.class_names;
  std::vector<std::string> fam;
  for (auto f : ds.families) fam.push_back(f == Family::Organic ? "organic" : "manufactured");
  header["families"] = fam;
  const std::string text = header.dump();
  std::string out(kDatasetMagic);
  io::put_u64_le(out, text.size());
  out += text;
  io::put_f32_le(out, ds.images.values());
  io::write_file_atomic(path, out);
}

SyntheticDataset load_synthetic(const std::filesystem::path& path) {
  using K = FormatError::Kind;
  const auto b = io::read_file(path);
  if (b.size() < 16 || std::string_view(b.data(), 8) != kDatasetMagic) {
    throw FormatError(K::Magic, path.string() + ": not a CNLDATA1 dataset cache");
  }
  const auto len = io::get_u64_le(b.data() + 8);
  if (len > b.size() - 16) throw FormatError(K::Truncated, path.string() + ": truncated header");
  SyntheticDataset ds;
  try {
    const auto header = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    if (header.value("format_version", -1) != 1) throw FormatError(K::Version, path.string() + ": unknown version");
    ds.images = Tensor(header.at("shape").get<Shape>());
    ds.labels = header.at("labels").get<std::vector<int>>();
    ds.class_names = header.at("class_names").get<std::vector<std::string>>();
    for (const auto& f : header.at("families")) {
      ds.families.push_back(f.get<std::string>() == "organic" ? Family::Organic : Family::Manufactured);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::Corrupt, path.string() + ": " + e.what());
  }
  const std::size_t pos = 16 + len;
  if (b.size() - pos != ds.images.size() * 4 || ds.labels.size() != ds.images.rows()) {
    throw FormatError(K::Truncated, path.string() + ": payload does not match header");
  }
  io::get_f32_le(b.data() + pos, ds.images.values());
  return ds;
}

}  // namespace cnl::data
