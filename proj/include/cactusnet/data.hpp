#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cactusnet/tensor.hpp"

namespace cnl::data {

// ---------------------------------------------------------------------------
// IDX files (big-endian; 0x00000803 for u8 image cubes, 0x00000801 for u8 labels)

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Images scaled to [0,1], shape [n, rows, cols, 1].
Tensor load_idx_images(const std::filesystem::path& path);
std::vector<int> load_idx_labels(const std::filesystem::path& path);

struct LabeledBatch {
  Tensor images;
  std::vector<int> labels;
};

LabeledBatch load_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels = {});

// Pixels are quantized with round(v * 255).
void write_idx_images(const std::filesystem::path& path, const Tensor& images);
void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Synthetic two-family corpus

enum class Family { Organic, Manufactured };

struct SyntheticDataset {
  Tensor images;            // [n, side, side, 1]
  std::vector<int> labels;  // organic classes first, then manufactured
  std::vector<std::string> class_names;
  std::vector<Family> families;  // per class
};

// Organic classes are smooth blob textures, manufactured classes are
// stripe/grid/frame motifs. Every class draws its own generator parameters.
SyntheticDataset generate_synthetic(std::size_t classes_per_family, std::size_t per_class, std::size_t image_side,
                                    std::uint64_t seed);

inline constexpr std::string_view kDatasetMagic = "CNLDATA1";
void save_synthetic(const std::filesystem::path& path, const SyntheticDataset& ds);
SyntheticDataset load_synthetic(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Manifest and splits

enum class SubsetLabel { ObjectiveKnown, ObjectiveUnknown, NonobjectiveUnknown };

std::string_view to_string(SubsetLabel s);
SubsetLabel subset_from_string(std::string_view s);
inline constexpr SubsetLabel kAllSubsets[] = {SubsetLabel::ObjectiveKnown, SubsetLabel::ObjectiveUnknown,
                                              SubsetLabel::NonobjectiveUnknown};

struct SourceSpec {
  enum class Kind { Idx, Synthetic };
  Kind kind = Kind::Idx;
  std::filesystem::path images;
  std::filesystem::path labels;
  // synthetic generator parameters
  std::size_t classes_per_family = 0;
  std::size_t per_class = 0;
  std::size_t image_side = 0;
  std::uint64_t seed = 0;
  std::filesystem::path cache;  // optional CNLDATA1 file
};

struct ManifestClass {
  int id = 0;
  std::string name;
  SubsetLabel subset = SubsetLabel::ObjectiveKnown;
  std::string source;
  int label = 0;  // label value inside the source
};

struct DatasetManifest {
  std::string objective_name;
  std::map<std::string, SourceSpec> sources;
  std::vector<ManifestClass> classes;
  std::vector<int> probe_set;
  std::size_t k = 6;
  double train_fraction = 2.0 / 3.0;
  std::size_t max_per_class = 300;  // 0 keeps everything
  std::uint64_t seed = 0;

  // Throws ConfigError on any broken invariant.
  void validate() const;

  const ManifestClass& cls(int id) const;
  bool has_class(int id) const;
  std::vector<int> ids_with(SubsetLabel subset) const;
  std::map<int, SubsetLabel> subset_labels() const;

  // Relative source paths are resolved against base_dir.
  static DatasetManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
  static DatasetManifest load(const std::filesystem::path& path);
};

struct LabeledImage {
  Tensor pixels;  // [h,w,c]
  int class_id = 0;
  std::string class_name;
};

// Loaded source corpora, keyed by the manifest's source names.
class SourceLibrary {
 public:
  static SourceLibrary load(const DatasetManifest& manifest);
  void add(std::string name, LabeledBatch batch);
  const LabeledBatch* find(const std::string& name) const;

 private:
  std::map<std::string, LabeledBatch> sources_;
};

struct ClassSplit {
  int class_id = 0;
  std::string name;
  SubsetLabel subset = SubsetLabel::ObjectiveKnown;
  Tensor train;  // [n, h, w, c]
  Tensor test;

  LabeledImage train_image(std::size_t i) const;
  LabeledImage test_image(std::size_t i) const;
};

// Read-only after construction.
class SplitStore {
 public:
  SplitStore() = default;
  explicit SplitStore(std::map<int, ClassSplit> splits) : splits_(std::move(splits)) {}

  const ClassSplit& at(int class_id) const;
  bool contains(int class_id) const { return splits_.count(class_id) != 0; }
  const std::map<int, ClassSplit>& all() const { return splits_; }
  std::vector<int> ids_with(SubsetLabel subset) const;

  // Known-class images with labels remapped to positions in known_ids.
  struct Pool {
    Tensor images;
    std::vector<int> labels;
    std::vector<int> known_ids;
  };
  Pool base_training_pool() const;
  Pool base_test_pool() const;

 private:
  std::map<int, ClassSplit> splits_;
};

SplitStore build_splits(const DatasetManifest& manifest, const SourceLibrary& sources);

// Balanced draw: ceil(k/2) objective-unknown and floor(k/2) nonobjective-unknown
// classes, sorted by id.
std::vector<int> sample_probe_set(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed);

}  // namespace cnl::data
