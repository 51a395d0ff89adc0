#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cactusnet/data.hpp"
#include "cactusnet/nn.hpp"

namespace cnl::app {

struct SeparabilityRecord {
  int x = 0;
  int probe = 0;
  std::size_t layer = 0;
  double xi = 0.0;
  std::uint64_t seed = 0;

  bool self_control() const { return x == probe; }
  friend bool operator==(const SeparabilityRecord&, const SeparabilityRecord&) = default;
};

// Per-job seed, a pure function of (master, x, probe, layer).
std::uint64_t job_seed(std::uint64_t master, int x, int probe, std::size_t layer);

// Train/test images of the two sides of a 1-vs-1 job, already passed through
// the frozen prefix (layers 0..layer).
struct PairFeatures {
  Tensor train_x, train_probe, test_x, test_probe;
};

// Fine-tunes the layers after `layer` with a fresh 2-way head on balanced
// batches and returns the test accuracy. cfg.seed is the job seed.
double separability_from_features(const Network& net, std::size_t layer, const PairFeatures& features,
                                  const TrainConfig& cfg);

inline constexpr std::size_t kSelfControlRepeats = 5;

// Chance-level control: the class's train and test splits are each halved at
// random into two pseudo-classes; the result is the mean accuracy over
// kSelfControlRepeats independent re-draws.
double self_separability(const Network& net, std::size_t layer, const Tensor& train, const Tensor& test,
                         const TrainConfig& cfg);

// Freezes layers 0..layer of a copy of net, replaces the head with a 2-way
// output and fine-tunes on the balanced x/probe train splits. x == probe runs
// the self control.
SeparabilityRecord pair_separability(const Network& net, std::size_t layer, int x, int probe,
                                     const data::SplitStore& splits, const TrainConfig& cfg);

// Mean of the records' xi. All records must share (x, layer) and name
// distinct probes; expected_k, when given, fixes the record count.
double class_applicability(std::span<const SeparabilityRecord> records,
                           std::optional<std::size_t> expected_k = std::nullopt);

struct TableEntry {
  int class_id = 0;
  std::size_t layer = 0;
  double app = 0.0;
  std::vector<SeparabilityRecord> records;
};

class ApplicabilityTable {
 public:
  ApplicabilityTable() = default;
  ApplicabilityTable(std::vector<int> probe_set, std::size_t k) : probe_set_(std::move(probe_set)), k_(k) {}

  const std::vector<int>& probe_set() const { return probe_set_; }
  std::size_t k() const { return k_; }

  // Recomputes App from the records.
  void set_entry(int class_id, std::size_t layer, std::vector<SeparabilityRecord> records);
  void set_app(int class_id, std::size_t layer, double app);

  std::optional<double> app(int class_id, std::size_t layer) const;
  const TableEntry* entry(int class_id, std::size_t layer) const;
  const std::map<std::pair<int, std::size_t>, TableEntry>& entries() const { return entries_; }
  std::vector<int> class_ids() const;
  std::vector<std::size_t> layers() const;

 private:
  std::vector<int> probe_set_;
  std::size_t k_ = 0;
  std::map<std::pair<int, std::size_t>, TableEntry> entries_;
};

struct SweepConfig {
  TrainConfig train{0.03, 10, 32, 0};
  std::uint64_t master_seed = 0;
  std::size_t workers = 1;
  // A class paired with itself is skipped when it is also a probe.
  bool skip_self_pairs = true;
};

struct JobFailure {
  int x = 0;
  int probe = 0;
  std::size_t layer = 0;
  std::string message;
};

struct SweepResult {
  ApplicabilityTable table;
  std::vector<SeparabilityRecord> records;  // sorted by (layer, x, probe)
  std::vector<JobFailure> failures;
  std::size_t jobs_run = 0;
};

struct SweepJob {
  int x = 0;
  int probe = 0;
  std::size_t layer = 0;
};

std::vector<SweepJob> plan_sweep(std::span<const int> classes, std::span<const int> probes,
                                 std::span<const std::size_t> layers, bool skip_self_pairs);

// Runs every (class, probe, layer) job not already present in `completed`.
// Failed jobs leave their (class, layer) cell absent. on_record is called
// from the aggregating thread, in completion order.
SweepResult layer_sweep(const Network& net, std::span<const int> classes, std::span<const int> probes,
                        std::span<const std::size_t> layers, const data::SplitStore& splits, const SweepConfig& cfg,
                        std::span<const SeparabilityRecord> completed = {},
                        const std::function<void(const SeparabilityRecord&)>& on_record = {});

// Builds a table from records; cells with fewer than the expected record
// count are left out.
ApplicabilityTable table_from_records(std::span<const SeparabilityRecord> records, std::span<const int> probes,
                                      bool skip_self_pairs = true);

// subset -> layer -> mean App over the subset's classes
using SubsetCurves = std::map<data::SubsetLabel, std::map<std::size_t, double>>;
SubsetCurves subset_average(const ApplicabilityTable& table, const std::map<int, data::SubsetLabel>& labels);

// CSV files
void write_table_csv(const std::filesystem::path& path, const ApplicabilityTable& table,
                     const data::DatasetManifest& manifest);
ApplicabilityTable read_table_csv(const std::filesystem::path& path);
void write_records_csv(const std::filesystem::path& path, std::span<const SeparabilityRecord> records);
std::vector<SeparabilityRecord> read_records_csv(const std::filesystem::path& path);
void append_record_csv(const std::filesystem::path& path, const SeparabilityRecord& record);
void write_curves_csv(const std::filesystem::path& path, const SubsetCurves& curves);

}  // namespace cnl::app
