#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "cactusnet/data.hpp"
#include "cactusnet/error.hpp"
#include "cactusnet/rng.hpp"

namespace cnl::data {

using nlohmann::json;

std::string_view to_string(SubsetLabel s) {
  switch (s) {
    case SubsetLabel::ObjectiveKnown: return "objective_known";
    case SubsetLabel::ObjectiveUnknown: return "objective_unknown";
    case SubsetLabel::NonobjectiveUnknown: return "nonobjective_unknown";
  }
  return "?";
}

SubsetLabel subset_from_string(std::string_view s) {
  for (auto v : kAllSubsets) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown subset label '" + std::string(s) + "'");
}

void DatasetManifest::validate() const {
  if (classes.empty()) throw ConfigError("manifest lists no classes");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0,1), got " + std::to_string(train_fraction));
  }
  std::set<int> ids;
  for (const auto& c : classes) {
    if (!ids.insert(c.id).second) throw ConfigError("duplicate class id " + std::to_string(c.id));
    if (c.id < 0) throw ConfigError("class ids must be nonnegative, got " + std::to_string(c.id));
    if (c.name.find_first_of(",\n\r") != std::string::npos) {
      throw ConfigError("class name '" + c.name + "' contains a comma or line break");
    }
    if (!sources.count(c.source)) {
      throw ConfigError("class " + std::to_string(c.id) + " names unknown source '" + c.source + "'");
    }
  }
  if (ids_with(SubsetLabel::ObjectiveKnown).empty()) throw ConfigError("manifest has no objective_known class");
  std::set<int> probes;
  for (int p : probe_set) {
    if (!ids.count(p)) throw ConfigError("probe class " + std::to_string(p) + " is not in the manifest");
    if (cls(p).subset == SubsetLabel::ObjectiveKnown) {
      throw ConfigError("probe class " + std::to_string(p) + " is objective_known");
    }
    if (!probes.insert(p).second) throw ConfigError("probe class " + std::to_string(p) + " listed twice");
  }
  if (!probe_set.empty() && probe_set.size() != k) {
    throw ConfigError("probe_set has " + std::to_string(probe_set.size()) + " classes but k = " + std::to_string(k));
  }
  for (const auto& [name, src] : sources) {
    if (src.kind == SourceSpec::Kind::Synthetic && (src.classes_per_family == 0 || src.per_class == 0)) {
      throw ConfigError("synthetic source '" + name + "' needs classes_per_family and per_class");
    }
  }
}

const ManifestClass& DatasetManifest::cls(int id) const {
  for (const auto& c : classes) {
    if (c.id == id) return c;
  }
  throw ConfigError("no class with id " + std::to_string(id));
}

bool DatasetManifest::has_class(int id) const {
  return std::any_of(classes.begin(), classes.end(), [id](const auto& c) { return c.id == id; });
}

std::vector<int> DatasetManifest::ids_with(SubsetLabel subset) const {
  std::vector<int> out;
  for (const auto& c : classes) {
    if (c.subset == subset) out.push_back(c.id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::map<int, SubsetLabel> DatasetManifest::subset_labels() const {
  std::map<int, SubsetLabel> out;
  for (const auto& c : classes) out[c.id] = c.subset;
  return out;
}

DatasetManifest DatasetManifest::from_json(const json& j, const std::filesystem::path& base_dir) {
  auto resolve = [&](const std::string& p) -> std::filesystem::path {
    if (p.empty()) return {};
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  DatasetManifest m;
  try {
    m.objective_name = j.value("objective_name", "");
    m.k = j.value("k", std::size_t{6});
    m.train_fraction = j.value("train_fraction", 2.0 / 3.0);
    m.max_per_class = j.value("max_per_class", std::size_t{300});
    m.seed = j.value("seed", std::uint64_t{0});
    for (const auto& [name, s] : j.at("sources").items()) {
      SourceSpec spec;
      const std::string kind = s.value("kind", "idx");
      if (kind == "idx") {
        spec.kind = SourceSpec::Kind::Idx;
        spec.images = resolve(s.at("images").get<std::string>());
        spec.labels = resolve(s.at("labels").get<std::string>());
      } else if (kind == "synthetic") {
        spec.kind = SourceSpec::Kind::Synthetic;
        spec.classes_per_family = s.at("classes_per_family").get<std::size_t>();
        spec.per_class = s.at("per_class").get<std::size_t>();
        spec.image_side = s.value("image_side", std::size_t{28});
        spec.seed = s.value("seed", std::uint64_t{0});
        spec.cache = resolve(s.value("cache", ""));
      } else {
        throw ConfigError("source '" + name + "' has unknown kind '" + kind + "'");
      }
      m.sources[name] = spec;
    }
    for (const auto& c : j.at("classes")) {
      ManifestClass mc;
      mc.id = c.at("id").get<int>();
      mc.name = c.value("name", "class-" + std::to_string(mc.id));
      mc.subset = subset_from_string(c.at("subset").get<std::string>());
      mc.source = c.at("source").get<std::string>();
      mc.label = c.value("label", mc.id);
      m.classes.push_back(mc);
    }
    if (j.contains("probe_set")) m.probe_set = j.at("probe_set").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  m.validate();
  return m;
}

json DatasetManifest::to_json() const {
  json j;
  j["objective_name"] = objective_name;
  j["k"] = k;
  j["train_fraction"] = train_fraction;
  j["max_per_class"] = max_per_class;
  j["seed"] = seed;
  j["sources"] = json::object();
  for (const auto& [name, s] : sources) {
    json o;
    if (s.kind == SourceSpec::Kind::Idx) {
      o["kind"] = "idx";
      o["images"] = s.images.string();
      o["labels"] = s.labels.string();
    } else {
      o["kind"] = "synthetic";
      o["classes_per_family"] = s.classes_per_family;
      o["per_class"] = s.per_class;
      o["image_side"] = s.image_side;
      o["seed"] = s.seed;
      if (!s.cache.empty()) o["cache"] = s.cache.string();
    }
    j["sources"][name] = o;
  }
  j["classes"] = json::array();
  for (const auto& c : classes) {
    j["classes"].push_back(
        {{"id", c.id}, {"name", c.name}, {"subset", to_string(c.subset)}, {"source", c.source}, {"label", c.label}});
  }
  j["probe_set"] = probe_set;
  return j;
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

SourceLibrary SourceLibrary::load(const DatasetManifest& manifest) {
  SourceLibrary lib;
  for (const auto& [name, spec] : manifest.sources) {
    if (spec.kind == SourceSpec::Kind::Idx) {
      lib.add(name, load_idx(spec.images, spec.labels));
      continue;
    }
    SyntheticDataset ds;
    if (!spec.cache.empty() && std::filesystem::exists(spec.cache)) {
      ds = load_synthetic(spec.cache);
    } else {
      ds = generate_synthetic(spec.classes_per_family, spec.per_class, spec.image_side, spec.seed);
      if (!spec.cache.empty()) save_synthetic(spec.cache, ds);
    }
    lib.add(name, LabeledBatch{std::move(ds.images), std::move(ds.labels)});
  }
  return lib;
}

void SourceLibrary::add(std::string name, LabeledBatch batch) { sources_[std::move(name)] = std::move(batch); }

const LabeledBatch* SourceLibrary::find(const std::string& name) const {
  auto it = sources_.find(name);
  return it == sources_.end() ? nullptr : &it->second;
}

namespace {

LabeledImage image_at(const ClassSplit& s, const Tensor& t, std::size_t i) {
  if (i >= t.rows()) throw RangeError("image index " + std::to_string(i) + " out of range for class " + s.name);
  return {t.row(i).reshaped(t.sample_shape()), s.class_id, s.name};
}

SplitStore::Pool make_pool(const std::map<int, ClassSplit>& splits, bool train) {
  SplitStore::Pool pool;
  for (const auto& [id, s] : splits) {
    if (s.subset == SubsetLabel::ObjectiveKnown) pool.known_ids.push_back(id);
  }
  for (std::size_t pos = 0; pos < pool.known_ids.size(); ++pos) {
    const Tensor& t = train ? splits.at(pool.known_ids[pos]).train : splits.at(pool.known_ids[pos]).test;
    pool.images = pool.images.empty() ? t : Tensor::concat(pool.images, t);
    pool.labels.insert(pool.labels.end(), t.rows(), static_cast<int>(pos));
  }
  return pool;
}

}  // namespace

LabeledImage ClassSplit::train_image(std::size_t i) const { return image_at(*this, train, i); }
LabeledImage ClassSplit::test_image(std::size_t i) const { return image_at(*this, test, i); }

const ClassSplit& SplitStore::at(int class_id) const {
  auto it = splits_.find(class_id);
  if (it == splits_.end()) throw DataError("no split for class " + std::to_string(class_id));
  return it->second;
}

std::vector<int> SplitStore::ids_with(SubsetLabel subset) const {
  std::vector<int> out;
  for (const auto& [id, s] : splits_) {
    if (s.subset == subset) out.push_back(id);
  }
  return out;
}

SplitStore::Pool SplitStore::base_training_pool() const { return make_pool(splits_, true); }
SplitStore::Pool SplitStore::base_test_pool() const { return make_pool(splits_, false); }

SplitStore build_splits(const DatasetManifest& manifest, const SourceLibrary& sources) {
  manifest.validate();
  std::map<int, ClassSplit> splits;
  std::vector<int> missing;
  for (const auto& c : manifest.classes) {
    const LabeledBatch* src = sources.find(c.source);
    if (!src) throw DataError("source '" + c.source + "' is not loaded");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < src->labels.size(); ++i) {
      if (src->labels[i] == c.label) idx.push_back(i);
    }
    if (idx.size() < 2) {
      missing.push_back(c.id);
      continue;
    }
    Rng rng(mix_seed({manifest.seed, static_cast<std::uint64_t>(c.id)}));
    rng.shuffle(std::span<std::size_t>(idx));
    if (manifest.max_per_class > 0 && idx.size() > manifest.max_per_class) idx.resize(manifest.max_per_class);
    auto n_train = static_cast<std::size_t>(std::lround(static_cast<double>(idx.size()) * manifest.train_fraction));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    ClassSplit s;
    s.class_id = c.id;
    s.name = c.name;
    s.subset = c.subset;
    s.train = src->images.gather(std::span<const std::size_t>(idx.data(), n_train));
    s.test = src->images.gather(std::span<const std::size_t>(idx.data() + n_train, idx.size() - n_train));
    splits.emplace(c.id, std::move(s));
  }
  if (!missing.empty()) {
    std::string list;
    for (int id : missing) list += (list.empty() ? "" : ", ") + std::to_string(id);
    throw DataError("classes with fewer than two images in their source: " + list);
  }
  return SplitStore(std::move(splits));
}

std::vector<int> sample_probe_set(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed) {
  const std::size_t want_ou = (k + 1) / 2, want_nu = k / 2;
  auto ou = manifest.ids_with(SubsetLabel::ObjectiveUnknown);
  auto nu = manifest.ids_with(SubsetLabel::NonobjectiveUnknown);
  if (ou.size() < want_ou || nu.size() < want_nu) {
    throw ConfigError("probe set of size " + std::to_string(k) + " needs " + std::to_string(want_ou) +
                      " objective_unknown and " + std::to_string(want_nu) + " nonobjective_unknown classes, have " +
                      std::to_string(ou.size()) + " and " + std::to_string(nu.size()));
  }
  Rng rng(mix_seed({seed, 0x70726f6265ULL}));
  rng.shuffle(std::span<int>(ou));
  rng.shuffle(std::span<int>(nu));
  std::vector<int> out(ou.begin(), ou.begin() + static_cast<std::ptrdiff_t>(want_ou));
  out.insert(out.end(), nu.begin(), nu.begin() + static_cast<std::ptrdiff_t>(want_nu));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace cnl::data
