#include "cactusnet/applicability.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "cactusnet/csv.hpp"
#include "cactusnet/error.hpp"
#include "cactusnet/rng.hpp"

namespace cnl::app {

std::uint64_t job_seed(std::uint64_t master, int x, int probe, std::size_t layer) {
  return mix_seed({master, static_cast<std::uint64_t>(x), static_cast<std::uint64_t>(probe), layer});
}

namespace {

std::string job_name(int x, int probe, std::size_t layer) {
  return fmt::format("job (x={}, probe={}, layer={})", x, probe, layer);
}

void check_layer(const Network& net, std::size_t layer) {
  const auto head = net.last_dense();
  if (!head || layer >= *head) {
    throw ConfigError(fmt::format("layer {} leaves no trainable head (final Dense is layer {})", layer,
                                  head ? static_cast<long long>(*head) : -1LL));
  }
}

// Splits a class's rows at random into two equal halves.
std::pair<Tensor, Tensor> halves(const Tensor& t, std::uint64_t seed) {
  std::vector<std::size_t> idx(t.rows());
  std::iota(idx.begin(), idx.end(), 0);
  Rng(seed).shuffle(std::span(idx));
  const std::size_t h = idx.size() / 2;
  return {t.gather(std::span<const std::size_t>(idx.data(), h)),
          t.gather(std::span<const std::size_t>(idx.data() + h, h))};
}


std::pair<Tensor, std::vector<int>> balanced_union(const Tensor& a, const Tensor& b, const char* what) {
  const std::size_t n = std::min(a.rows(), b.rows());
  if (n == 0) throw DataError(std::string("empty ") + what + " split");
  std::vector<int> labels(2 * n, 0);
  std::fill(labels.begin() + static_cast<std::ptrdiff_t>(n), labels.end(), 1);
  return {Tensor::concat(a.rows(0, n), b.rows(0, n)), std::move(labels)};
}

}  // namespace

double separability_from_features(const Network& net, std::size_t layer, const PairFeatures& f,
                                  const TrainConfig& cfg) {
  check_layer(net, layer);
  auto [train, train_labels] = balanced_union(f.train_x, f.train_probe, "train");
  auto [test, test_labels] = balanced_union(f.test_x, f.test_probe, "test");

  Network suffix = net.slice(layer + 1, net.layer_count());
  suffix.unfreeze_all();
  replace_head(suffix, 2, mix_seed({cfg.seed, 1}));

  // Interleave the two classes so every minibatch is balanced.
  const std::size_t n = train.rows() / 2;
  const EpochOrder order = [&](std::size_t epoch, std::size_t) {
    std::vector<std::size_t> a(n), b(n), out;
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), n);
    Rng rng(mix_seed({cfg.seed, epoch, 7}));
    rng.shuffle(std::span(a));
    rng.shuffle(std::span(b));
    out.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(a[i]);
      out.push_back(b[i]);
    }
    return out;
  };
  fit(suffix, train, one_hot(train_labels, 2), LossKind::CrossEntropy, cfg, order);
  return accuracy(suffix, test, test_labels);
}

double self_separability(const Network& net, std::size_t layer, const Tensor& train, const Tensor& test,
                         const TrainConfig& cfg) {
  double sum = 0.0;
  for (std::size_t r = 0; r < kSelfControlRepeats; ++r) {
    TrainConfig rc = cfg;
    rc.seed = mix_seed({cfg.seed, 0x5e1f, r});
    auto [a, b] = halves(train, mix_seed({rc.seed, 2}));
    auto [c, d] = halves(test, mix_seed({rc.seed, 3}));
    sum += separability_from_features(net, layer, {std::move(a), std::move(b), std::move(c), std::move(d)}, rc);
  }
  return sum / static_cast<double>(kSelfControlRepeats);
}

SeparabilityRecord pair_separability(const Network& net, std::size_t layer, int x, int probe,
                                     const data::SplitStore& splits, const TrainConfig& cfg) {
  check_layer(net, layer);
  const auto& xs = splits.at(x);
  const auto& ps = splits.at(probe);
  auto prefix = [&](const Tensor& t) { return forward_range(net, t, 0, layer + 1); };
  SeparabilityRecord rec{x, probe, layer, 0.0, cfg.seed};
  try {
    rec.xi = x == probe ? self_separability(net, layer, prefix(xs.train), prefix(xs.test), cfg)
                        : separability_from_features(
                              net, layer, {prefix(xs.train), prefix(ps.train), prefix(xs.test), prefix(ps.test)}, cfg);
  } catch (const NumericError& e) {
    throw NumericError(job_name(x, probe, layer) + ": " + e.what(), e.layer());
  } catch (const DataError& e) {
    throw DataError(job_name(x, probe, layer) + ": " + e.what());
  }
  return rec;
}

double class_applicability(std::span<const SeparabilityRecord> records, std::optional<std::size_t> expected_k) {
  if (records.empty()) throw AggregationError("no records to aggregate");
  if (expected_k && records.size() != *expected_k) {
    throw AggregationError(fmt::format("expected {} records, got {}", *expected_k, records.size()));
  }
  std::set<int> probes;
  double sum = 0.0;
  for (const auto& r : records) {
    if (r.x != records[0].x || r.layer != records[0].layer) {
      throw AggregationError(fmt::format("records mix (x={}, layer={}) with (x={}, layer={})", records[0].x,
                                         records[0].layer, r.x, r.layer));
    }
    if (!probes.insert(r.probe).second) throw AggregationError(fmt::format("duplicate probe {}", r.probe));
    if (!(r.xi >= 0.0 && r.xi <= 1.0)) throw RangeError(fmt::format("separability {} outside [0,1]", r.xi));
    sum += r.xi;
  }
  return sum / static_cast<double>(records.size());
}

void ApplicabilityTable::set_entry(int class_id, std::size_t layer, std::vector<SeparabilityRecord> records) {
  const double app = class_applicability(records);
  if (records[0].x != class_id || records[0].layer != layer) {
    throw AggregationError(fmt::format("records for (x={}, layer={}) filed under (x={}, layer={})", records[0].x,
                                       records[0].layer, class_id, layer));
  }
  entries_[{class_id, layer}] = TableEntry{class_id, layer, app, std::move(records)};
}

void ApplicabilityTable::set_app(int class_id, std::size_t layer, double app) {
  if (!(app >= 0.0 && app <= 1.0)) throw RangeError(fmt::format("applicability {} outside [0,1]", app));
  entries_[{class_id, layer}] = TableEntry{class_id, layer, app, {}};
}

std::optional<double> ApplicabilityTable::app(int class_id, std::size_t layer) const {
  auto it = entries_.find({class_id, layer});
  if (it == entries_.end()) return std::nullopt;
  return it->second.app;
}

const TableEntry* ApplicabilityTable::entry(int class_id, std::size_t layer) const {
  auto it = entries_.find({class_id, layer});
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<int> ApplicabilityTable::class_ids() const {
  std::set<int> ids;
  for (const auto& [key, e] : entries_) ids.insert(key.first);
  return {ids.begin(), ids.end()};
}

std::vector<std::size_t> ApplicabilityTable::layers() const {
  std::set<std::size_t> ls;
  for (const auto& [key, e] : entries_) ls.insert(key.second);
  return {ls.begin(), ls.end()};
}

std::vector<SweepJob> plan_sweep(std::span<const int> classes, std::span<const int> probes,
                                 std::span<const std::size_t> layers, bool skip_self_pairs) {
  if (classes.empty() || probes.empty() || layers.empty()) {
    throw ConfigError("sweep needs at least one class, probe and layer");
  }
  std::vector<std::size_t> ls(layers.begin(), layers.end());
  std::sort(ls.begin(), ls.end());
  std::vector<SweepJob> jobs;
  for (std::size_t layer : ls)
    for (int x : classes)
      for (int p : probes) {
        if (skip_self_pairs && x == p) continue;
        jobs.push_back({x, p, layer});
      }
  return jobs;
}

SweepResult layer_sweep(const Network& net, std::span<const int> classes, std::span<const int> probes,
                        std::span<const std::size_t> layers, const data::SplitStore& splits, const SweepConfig& cfg,
                        std::span<const SeparabilityRecord> completed,
                        const std::function<void(const SeparabilityRecord&)>& on_record) {
  cfg.train.validate();
  for (std::size_t l : layers) check_layer(net, l);
  for (int p : probes) {
    if (splits.contains(p) && splits.at(p).subset == data::SubsetLabel::ObjectiveKnown) {
      throw ConfigError(fmt::format("probe class {} was part of base training", p));
    }
  }
  const auto jobs = plan_sweep(classes, probes, layers, cfg.skip_self_pairs);

  std::map<std::tuple<int, int, std::size_t>, SeparabilityRecord> done;
  for (const auto& r : completed) done[{r.x, r.probe, r.layer}] = r;

  SweepResult result;
  std::vector<std::size_t> ls(layers.begin(), layers.end());
  std::sort(ls.begin(), ls.end());
  ls.erase(std::unique(ls.begin(), ls.end()), ls.end());

  std::set<int> involved(classes.begin(), classes.end());
  involved.insert(probes.begin(), probes.end());

  struct Features {
    Tensor train, test;
  };
  std::map<int, Features> feats;
  std::map<int, std::string> missing;
  for (int id : involved) {
    if (splits.contains(id)) {
      feats[id] = {splits.at(id).train, splits.at(id).test};
    } else {
      missing[id] = fmt::format("no split for class {}", id);
    }
  }

  std::mutex mu;
  std::size_t current = 0;  // layers [0, current) already applied to feats
  for (std::size_t layer : ls) {
    std::vector<SweepJob> pending;
    for (const auto& j : jobs) {
      if (j.layer == layer && !done.count({j.x, j.probe, j.layer})) pending.push_back(j);
    }
    if (pending.empty()) continue;
    for (auto it = feats.begin(); it != feats.end();) {
      try {
        it->second.train = forward_range(net, it->second.train, current, layer + 1);
        it->second.test = forward_range(net, it->second.test, current, layer + 1);
        ++it;
      } catch (const Error& e) {
        missing[it->first] = fmt::format("class {}: {}", it->first, e.what());
        it = feats.erase(it);
      }
    }
    current = layer + 1;

    std::vector<std::optional<SeparabilityRecord>> out(pending.size());
    std::vector<std::string> errors(pending.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i; (i = next.fetch_add(1)) < pending.size();) {
        const auto& j = pending[i];
        const std::uint64_t seed = job_seed(cfg.master_seed, j.x, j.probe, j.layer);
        try {
          for (int id : {j.x, j.probe}) {
            if (missing.count(id)) throw DataError(missing.at(id));
          }
          const auto& fx = feats.at(j.x);
          const auto& fp = feats.at(j.probe);
          TrainConfig tc = cfg.train;
          tc.seed = seed;
          const double xi = j.x == j.probe
                                ? self_separability(net, j.layer, fx.train, fx.test, tc)
                                : separability_from_features(net, j.layer, {fx.train, fp.train, fx.test, fp.test}, tc);
          SeparabilityRecord rec{j.x, j.probe, j.layer, xi, seed};
          out[i] = rec;
          if (on_record) {
            std::lock_guard lock(mu);
            on_record(rec);
          }
        } catch (const Error& e) {
          errors[i] = job_name(j.x, j.probe, j.layer) + ": " + e.what();
        }
      }
    };
    const std::size_t n_workers = std::clamp<std::size_t>(cfg.workers, 1, pending.size());
    std::vector<std::thread> threads;
    for (std::size_t w = 1; w < n_workers; ++w) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();

    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (out[i]) {
        done[{pending[i].x, pending[i].probe, pending[i].layer}] = *out[i];
      } else {
        result.failures.push_back({pending[i].x, pending[i].probe, pending[i].layer, errors[i]});
      }
    }
    result.jobs_run += pending.size();
  }

  for (const auto& j : jobs) {
    auto it = done.find({j.x, j.probe, j.layer});
    if (it != done.end()) result.records.push_back(it->second);
  }
  result.table = table_from_records(result.records, probes, cfg.skip_self_pairs);
  return result;
}

ApplicabilityTable table_from_records(std::span<const SeparabilityRecord> records, std::span<const int> probes,
                                      bool skip_self_pairs) {
  const std::set<int> probe_set(probes.begin(), probes.end());
  std::map<std::pair<int, std::size_t>, std::vector<SeparabilityRecord>> groups;
  for (const auto& r : records) {
    if (!probe_set.count(r.probe) && !r.self_control()) {
      throw AggregationError(fmt::format("record probe {} is not in the probe set", r.probe));
    }
    if (r.self_control() && skip_self_pairs) continue;
    groups[{r.x, r.layer}].push_back(r);
  }
  ApplicabilityTable table(std::vector<int>(probe_set.begin(), probe_set.end()), probe_set.size());
  for (auto& [key, recs] : groups) {
    const std::size_t expected = probe_set.size() - (skip_self_pairs && probe_set.count(key.first) ? 1 : 0);
    if (recs.size() != expected) continue;
    std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.probe < b.probe; });
    table.set_entry(key.first, key.second, std::move(recs));
  }
  return table;
}

SubsetCurves subset_average(const ApplicabilityTable& table, const std::map<int, data::SubsetLabel>& labels) {
  std::map<data::SubsetLabel, std::map<std::size_t, std::pair<double, std::size_t>>> acc;
  for (const auto& [key, e] : table.entries()) {
    auto it = labels.find(key.first);
    if (it == labels.end()) throw AggregationError(fmt::format("class {} has no subset label", key.first));
    auto& slot = acc[it->second][key.second];
    slot.first += e.app;
    ++slot.second;
  }
  SubsetCurves curves;
  for (const auto& [subset, by_layer] : acc)
    for (const auto& [layer, s] : by_layer) curves[subset][layer] = s.first / static_cast<double>(s.second);
  return curves;
}

void write_table_csv(const std::filesystem::path& path, const ApplicabilityTable& table,
                     const data::DatasetManifest& manifest) {
  std::vector<std::string> lines;
  for (const auto& [key, e] : table.entries()) {
    const auto& c = manifest.cls(key.first);
    lines.push_back(fmt::format("{},{},{},{},{},{},{}", c.id, c.name, data::to_string(c.subset), key.second, e.app,
                                table.k(), e.records.size()));
  }
  csv::write(path, "class_id,class_name,subset,layer,app,k,n_records", lines);
}

ApplicabilityTable read_table_csv(const std::filesystem::path& path) {
  const auto rows = csv::read(path, "class_id,class_name,subset,layer,app,k,n_records");
  std::size_t k = rows.empty() ? 0 : csv::to_uint(rows[0][5]);
  ApplicabilityTable table({}, k);
  for (const auto& r : rows) {
    table.set_app(static_cast<int>(csv::to_int(r[0])), csv::to_uint(r[3]), csv::to_double(r[4]));
  }
  return table;
}

namespace {

std::string record_line(const SeparabilityRecord& r) {
  return fmt::format("{},{},{},{},{}", r.x, r.probe, r.layer, r.xi, r.seed);
}

constexpr std::string_view kRecordHeader = "x,un_j,layer,xi,seed";

}  // namespace

void write_records_csv(const std::filesystem::path& path, std::span<const SeparabilityRecord> records) {
  std::vector<std::string> lines;
  for (const auto& r : records) lines.push_back(record_line(r));
  csv::write(path, kRecordHeader, lines);
}

std::vector<SeparabilityRecord> read_records_csv(const std::filesystem::path& path) {
  std::vector<SeparabilityRecord> out;
  for (const auto& r : csv::read(path, kRecordHeader)) {
    out.push_back({static_cast<int>(csv::to_int(r[0])), static_cast<int>(csv::to_int(r[1])), csv::to_uint(r[2]),
                   csv::to_double(r[3]), csv::to_uint(r[4])});
  }
  return out;
}

void append_record_csv(const std::filesystem::path& path, const SeparabilityRecord& record) {
  const bool fresh = !std::filesystem::exists(path);
  if (fresh && path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::FILE* f = std::fopen(path.c_str(), "a");
  if (!f) throw DataError("cannot append to " + path.string());
  if (fresh) fmt::print(f, "{}\n", kRecordHeader);
  fmt::print(f, "{}\n", record_line(record));
  std::fclose(f);
}

void write_curves_csv(const std::filesystem::path& path, const SubsetCurves& curves) {
  std::vector<std::string> lines;
  for (const auto& [subset, by_layer] : curves)
    for (const auto& [layer, mean] : by_layer) lines.push_back(fmt::format("{},{},{}", data::to_string(subset), layer, mean));
  csv::write(path, "subset,layer,mean_app", lines);
}

}  // namespace cnl::app
