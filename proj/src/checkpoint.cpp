#include "cactusnet/checkpoint.hpp"

#include "cactusnet/binary_io.hpp"
#include "cactusnet/error.hpp"

namespace cnl {

nlohmann::json architecture_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    nlohmann::json j;
    j["kind"] = std::string(to_string(l.kind));
    switch (l.kind) {
      case LayerKind::Conv2D:
        j["filters"] = l.units;
        j["kernel"] = {l.kernel_h, l.kernel_w};
        j["stride"] = l.stride;
        break;
      case LayerKind::MaxPool2D:
        j["kernel"] = {l.kernel_h, l.kernel_w};
        j["stride"] = l.stride;
        break;
      case LayerKind::Dense:
        j["outputs"] = l.units;
        break;
      default:
        break;
    }
    if (l.has_params()) j["frozen"] = l.frozen;
    layers.push_back(std::move(j));
  }
  return {{"input_shape", net.input_shape()}, {"layers", std::move(layers)}};
}

Network network_from_architecture(const nlohmann::json& arch) {
  try {
    std::vector<LayerSpec> layers;
    for (const auto& j : arch.at("layers")) {
      LayerSpec l;
      l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
      if (l.kind == LayerKind::Conv2D) l.units = j.at("filters").get<std::size_t>();
      if (l.kind == LayerKind::Dense) l.units = j.at("outputs").get<std::size_t>();
      if (l.kind == LayerKind::Conv2D || l.kind == LayerKind::MaxPool2D) {
        const auto& k = j.at("kernel");
        if (k.is_array()) {
          l.kernel_h = k.at(0).get<std::size_t>();
          l.kernel_w = k.at(1).get<std::size_t>();
        } else {
          l.kernel_h = l.kernel_w = k.get<std::size_t>();
        }
        l.stride = j.value("stride", std::size_t{1});
      }
      l.frozen = j.value("frozen", false);
      layers.push_back(l);
    }
    return Network(arch.at("input_shape").get<Shape>(), std::move(layers));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed architecture description: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Network& net, const nlohmann::json& extra,
                     std::string_view magic) {
  nlohmann::json header = architecture_json(net);
  header["format_version"] = kCheckpointVersion;
  if (!extra.is_null()) header["extra"] = extra;
  const std::string text = header.dump();

  std::string out(magic);
  io::put_u64_le(out, text.size());
  out += text;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const auto& p = net.params(i);
    io::put_f32_le(out, p.weights.values());
    io::put_f32_le(out, p.bias.values());
  }
  io::write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view magic) {
  using K = FormatError::Kind;
  const auto bytes = io::read_file(path);
  const std::string where = path.string();
  if (bytes.size() < magic.size() || std::string_view(bytes.data(), magic.size()) != magic) {
    const auto n = std::min(bytes.size(), magic.size());
    throw FormatError(K::Magic, where + ": magic mismatch, expected '" + std::string(magic) + "' found '" +
                                    std::string(bytes.data(), n) + "'");
  }
  std::size_t pos = magic.size();
  if (bytes.size() < pos + 8) throw FormatError(K::Truncated, where + ": truncated before header length");
  const std::uint64_t len = io::get_u64_le(bytes.data() + pos);
  pos += 8;
  if (len > bytes.size() - pos) throw FormatError(K::Truncated, where + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::Corrupt, where + ": unreadable header: " + e.what());
  }
  pos += len;
  const int version = header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw FormatError(K::Version, where + ": unsupported format version " + std::to_string(version) + " (expected " +
                                      std::to_string(kCheckpointVersion) + ")");
  }

  Checkpoint ck;
  try {
    ck.net = network_from_architecture(header);
  } catch (const Error& e) {
    throw FormatError(K::Corrupt, where + ": " + e.what());
  }
  const std::size_t floats = ck.net.parameter_count();
  if (bytes.size() - pos < floats * 4) throw FormatError(K::Truncated, where + ": truncated parameter payload");
  if (bytes.size() - pos > floats * 4) throw FormatError(K::Corrupt, where + ": trailing bytes after parameters");
  for (std::size_t i = 0; i < ck.net.layer_count(); ++i) {
    auto& p = ck.net.params(i);
    io::get_f32_le(bytes.data() + pos, p.weights.values());
    pos += p.weights.size() * 4;
    io::get_f32_le(bytes.data() + pos, p.bias.values());
    pos += p.bias.size() * 4;
  }
  ck.extra = header.value("extra", nlohmann::json());
  return ck;
}

}  // namespace cnl
