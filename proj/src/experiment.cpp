#include "cactusnet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cactusnet/applicability.hpp"
#include "cactusnet/binary_io.hpp"
#include "cactusnet/checkpoint.hpp"
#include "cactusnet/csv.hpp"
#include "cactusnet/data.hpp"
#include "cactusnet/predictor.hpp"
#include "cactusnet/rng.hpp"

extern char** environ;

namespace cnl::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using data::SubsetLabel;

namespace {

// Seed streams derived from the master seed, one per phase.
enum : std::uint64_t { kBaseStream = 1, kPairStream = 2, kPredictorStream = 3, kPermutationStream = 4, kGrowthStream = 5 };

json train_json(double lr, std::size_t epochs, std::size_t batch) {
  return {{"learning_rate", lr}, {"epochs", epochs}, {"batch_size", batch}};
}

TrainConfig train_from_json(const json& j, const std::string& where) {
  TrainConfig t;
  try {
    t.learning_rate = j.at("learning_rate").get<double>();
    t.epochs = j.at("epochs").get<std::size_t>();
    t.batch_size = j.at("batch_size").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  t.validate();
  return t;
}

void merge_into(json& target, const json& patch, const std::string& path) {
  for (const auto& [key, value] : patch.items()) {
    const std::string at = path.empty() ? key : path + "." + key;
    if (!target.contains(key)) throw ConfigError("unknown config field '" + at + "'");
    if (target[key].is_object() && value.is_object()) {
      merge_into(target[key], value, at);
    } else {
      target[key] = value;
    }
  }
}

void flatten(const json& j, const json::json_pointer& ptr, const std::string& name,
             std::map<std::string, json::json_pointer>& out) {
  if (!name.empty()) out.emplace(name, ptr);
  if (j.is_object()) {
    for (const auto& [key, value] : j.items()) {
      std::string upper = key;
      std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
      flatten(value, ptr / key, name.empty() ? upper : name + "_" + upper, out);
    }
  }
}

json parse_env_value(const std::string& text, const json& current) {
  if (current.is_string()) return text;
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

std::vector<int> int_list(const json& j, const std::string& where) {
  try {
    return j.is_null() ? std::vector<int>{} : j.get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, path.string() + ": " + e.what());
  }
}

std::string file_hash(const fs::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : io::read_file(path)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return fmt::format("fnv1a64:{:016x}", h);
}

void require_files(const std::vector<fs::path>& files, std::string_view phase) {
  std::vector<std::string> missing;
  for (const auto& f : files) {
    if (!fs::exists(f)) missing.push_back(f.string());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += "\n  " + m;
    throw ConfigError(fmt::format("{} needs outputs that are missing:{}", phase, list));
  }
}

void log(const std::string& msg) { fmt::print(stderr, "{}\n", msg); }

struct Corpus {
  data::DatasetManifest manifest;
  data::SplitStore splits;
  std::string manifest_hash;
};

Corpus load_corpus(const ExperimentConfig& cfg) {
  if (!fs::exists(cfg.manifest)) throw ConfigError("manifest not found: " + cfg.manifest.string());
  Corpus c;
  c.manifest = data::DatasetManifest::load(cfg.manifest);
  c.manifest.validate();
  c.manifest_hash = file_hash(cfg.manifest);
  c.splits = data::build_splits(c.manifest, data::SourceLibrary::load(c.manifest));
  return c;
}

std::vector<int> measured_classes(const ExperimentConfig& cfg, const data::DatasetManifest& m) {
  if (!cfg.measure_classes.empty()) {
    for (int id : cfg.measure_classes) {
      if (!m.has_class(id)) throw ConfigError(fmt::format("measure.classes lists unknown class {}", id));
    }
    std::vector<int> out = cfg.measure_classes;
    std::sort(out.begin(), out.end());
    return out;
  }
  std::vector<int> out;
  for (const auto& c : m.classes) out.push_back(c.id);
  std::sort(out.begin(), out.end());
  return out;
}

struct Base {
  Network net;
  std::vector<int> known_ids;
  std::vector<std::string> labels;
};

Base load_base(const ExperimentConfig& cfg) {
  const auto ck = load_checkpoint(cfg.out / "base.ckpt");
  Base b{ck.net, {}, {}};
  b.known_ids = ck.extra.at("known_ids").get<std::vector<int>>();
  b.labels = ck.extra.at("labels").get<std::vector<std::string>>();
  return b;
}

void check_taps(const ExperimentConfig& cfg, const Network& net) {
  const auto head = net.last_dense();
  if (cfg.taps.empty()) throw ConfigError("taps must list at least one layer");
  for (std::size_t i = 0; i < cfg.taps.size(); ++i) {
    if (!head || cfg.taps[i] >= *head || (i > 0 && cfg.taps[i] <= cfg.taps[i - 1])) {
      throw ConfigError("taps must be increasing layer indices before the final Dense layer");
    }
  }
}

std::string fmt_double(double v) { return fmt::format("{}", v); }

fs::path predictor_path(const ExperimentConfig& cfg, std::size_t layer) {
  return cfg.out / "predictors" / fmt::format("layer_{}.ckpt", layer);
}

fs::path eval_path(const ExperimentConfig& cfg, std::size_t layer) {
  return cfg.out / "predictors" / fmt::format("layer_{}_eval.csv", layer);
}

constexpr std::string_view kEvalHeader = "class,subset,actual_app,mean_predicted,abs_err";

std::vector<std::string> eval_lines(const pred::EvalReport& ev) {
  std::vector<std::string> lines;
  for (const auto& c : ev.classes) {
    lines.push_back(fmt::format("{},{},{},{},{}", c.class_id, data::to_string(c.subset), fmt_double(c.actual_app),
                                fmt_double(c.mean_predicted), fmt_double(c.abs_err)));
  }
  return lines;
}

std::size_t decision_depth(const ExperimentConfig& cfg) {
  return cfg.decision_depth ? cfg.decision_depth : cfg.taps.size() / 2;
}

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& body) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(std::max<std::size_t>(workers, 1), n); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

json default_config() {
  return {{"manifest", nullptr},
          {"seed", nullptr},
          {"workers", 1},
          {"out", "out"},
          {"base", {{"architecture", nullptr}, {"train", train_json(0.05, 10, 32)}, {"lr_decay", 1.0}}},
          {"taps", nullptr},
          {"measure", {{"classes", nullptr}, {"train", train_json(0.03, 10, 32)}, {"skip_self_pairs", true}}},
          {"predictor",
           {{"train", train_json(0.03, 30, 32)},
            {"held_out", nullptr},
            {"train_classes", nullptr},
            {"permutation_control", true}}},
          {"cactus",
           {{"decision_depth", nullptr},
            {"window", 25},
            {"max_branches_per_node", 8},
            {"thresholds", nullptr},
            {"stream", nullptr}}}};
}

std::map<std::string, std::string> cnl_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    std::string_view kv(*e);
    if (kv.substr(0, 4) != "CNL_") continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    out.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return out;
}

ExperimentConfig resolve_config(const json& file, const fs::path& base_dir, const std::map<std::string, std::string>& env,
                                const Overrides& overrides) {
  if (!file.is_object()) throw ConfigError("config must be a JSON object");
  json j = default_config();
  merge_into(j, file, "");

  std::map<std::string, json::json_pointer> fields;
  flatten(j, json::json_pointer(), "", fields);
  for (const auto& [name, value] : env) {
    if (name.rfind("CNL_", 0) != 0) continue;
    auto it = fields.find(name.substr(4));
    if (it == fields.end()) throw ConfigError("environment override " + name + " matches no config field");
    j[it->second] = parse_env_value(value, j[it->second]);
  }
  if (overrides.out) j["out"] = overrides.out->string();
  if (overrides.seed) j["seed"] = *overrides.seed;
  if (overrides.workers) j["workers"] = *overrides.workers;
  if (overrides.stream) j["cactus"]["stream"] = overrides.stream->string();

  auto resolve = [&](const fs::path& p) { return p.is_absolute() || base_dir.empty() ? p : base_dir / p; };
  ExperimentConfig cfg;
  try {
    if (j["manifest"].is_null()) throw ConfigError("config field 'manifest' is required");
    if (j["seed"].is_null()) throw ConfigError("config field 'seed' is required");
    if (j["base"]["architecture"].is_null()) throw ConfigError("config field 'base.architecture' is required");
    if (j["taps"].is_null()) throw ConfigError("config field 'taps' is required");
    cfg.manifest = resolve(j["manifest"].get<std::string>());
    cfg.out = j["out"].get<std::string>();
    cfg.seed = j["seed"].get<std::uint64_t>();
    cfg.workers = j["workers"].get<std::size_t>();
    cfg.base_architecture = j["base"]["architecture"];
    cfg.base_train = train_from_json(j["base"]["train"], "base.train");
    cfg.base_lr_decay = j["base"]["lr_decay"].get<double>();
    cfg.taps = j["taps"].get<std::vector<std::size_t>>();
    cfg.measure_classes = int_list(j["measure"]["classes"], "measure.classes");
    cfg.pair_train = train_from_json(j["measure"]["train"], "measure.train");
    cfg.skip_self_pairs = j["measure"]["skip_self_pairs"].get<bool>();
    cfg.predictor_train = train_from_json(j["predictor"]["train"], "predictor.train");
    cfg.held_out = int_list(j["predictor"]["held_out"], "predictor.held_out");
    if (!j["predictor"]["train_classes"].is_null()) {
      cfg.train_classes = int_list(j["predictor"]["train_classes"], "predictor.train_classes");
    }
    cfg.permutation_control = j["predictor"]["permutation_control"].get<bool>();
    const auto& c = j["cactus"];
    cfg.decision_depth = c["decision_depth"].is_null() ? 0 : c["decision_depth"].get<std::size_t>();
    cfg.window = c["window"].get<std::size_t>();
    cfg.max_branches_per_node = c["max_branches_per_node"].get<std::size_t>();
    if (!c["thresholds"].is_null()) {
      const auto& t = c["thresholds"];
      cfg.thresholds = cactus::Baselines{t.at("q").get<double>(), t.at("y1").get<double>(), t.at("y2").get<double>()};
      cactus::compute_thresholds(cfg.thresholds->q, cfg.thresholds->y1, cfg.thresholds->y2);
    }
    if (!c["stream"].is_null()) cfg.stream = resolve(c["stream"].get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const RangeError& e) {
    throw ConfigError(std::string("config cactus.thresholds: ") + e.what());
  }
  if (cfg.workers == 0) throw ConfigError("workers must be >= 1");
  if (!(cfg.base_lr_decay > 0.0 && cfg.base_lr_decay <= 1.0)) throw ConfigError("base.lr_decay must lie in (0, 1]");
  if (cfg.window == 0) throw ConfigError("cactus.window must be >= 1");
  if (cfg.taps.size() >= 2) {
    const auto d = decision_depth(cfg);
    if (d < 1 || d >= cfg.taps.size()) {
      throw ConfigError(fmt::format("cactus.decision_depth must lie in [1, {}]", cfg.taps.size() - 1));
    }
  }
  cfg.resolved = j;
  cfg.resolved.erase("out");
  cfg.resolved.erase("workers");
  cfg.resolved["manifest"] = cfg.manifest.string();
  if (!cfg.stream.empty()) cfg.resolved["cactus"]["stream"] = cfg.stream.string();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path, const Overrides& overrides) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  json file;
  try {
    std::ifstream in(path);
    file = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return resolve_config(file, path.parent_path(), cnl_environment(), overrides);
}

void cmd_train_base(const ExperimentConfig& cfg) {
  const auto corpus = load_corpus(cfg);
  const auto train = corpus.splits.base_training_pool();
  const auto test = corpus.splits.base_test_pool();
  Network net = network_from_architecture(cfg.base_architecture);
  if (net.layer_count() == 0 || net.layers().back().kind != LayerKind::Softmax) {
    throw ConfigError("base architecture must end in Softmax");
  }
  if (net.output_shape() != Shape{train.known_ids.size()}) {
    throw ConfigError(fmt::format("base architecture outputs {} but the manifest has {} known classes",
                                  shape_str(net.output_shape()), train.known_ids.size()));
  }
  if (net.input_shape() != train.images.sample_shape()) {
    throw ConfigError(fmt::format("base architecture expects {} but images are {}", shape_str(net.input_shape()),
                                  shape_str(train.images.sample_shape())));
  }
  check_taps(cfg, net);
  net.initialize(mix_seed({cfg.seed, kBaseStream}));

  const Tensor targets = one_hot(train.labels, train.known_ids.size());
  std::vector<std::string> rows;
  double test_acc = 0.0;
  for (std::size_t e = 0; e < cfg.base_train.epochs; ++e) {
    TrainConfig step = cfg.base_train;
    step.epochs = 1;
    step.learning_rate = cfg.base_train.learning_rate * std::pow(cfg.base_lr_decay, static_cast<double>(e));
    step.seed = mix_seed({cfg.seed, kBaseStream, e});
    const auto rep = fit(net, train.images, targets, LossKind::CrossEntropy, step);
    const double train_acc = accuracy(net, train.images, train.labels);
    test_acc = accuracy(net, test.images, test.labels);
    rows.push_back(fmt::format("{},{},{},{}", e + 1, fmt_double(rep.epoch_loss.at(0)), fmt_double(train_acc),
                               fmt_double(test_acc)));
    log(fmt::format("epoch {}: loss {:.4f} train {:.4f} test {:.4f}", e + 1, rep.epoch_loss.at(0), train_acc, test_acc));
  }

  std::vector<std::string> labels;
  for (int id : train.known_ids) labels.push_back(corpus.manifest.cls(id).name);
  fs::create_directories(cfg.out);
  save_checkpoint(cfg.out / "base.ckpt", net,
                  {{"known_ids", train.known_ids}, {"labels", labels}, {"manifest_hash", corpus.manifest_hash}});
  csv::write(cfg.out / "base_metrics.csv", "epoch,loss,train_accuracy,test_accuracy", rows);
  write_json(cfg.out / "base_summary.json", {{"known_ids", train.known_ids},
                                             {"labels", labels},
                                             {"manifest_hash", corpus.manifest_hash},
                                             {"test_accuracy", test_acc},
                                             {"train_images", train.labels.size()},
                                             {"test_images", test.labels.size()},
                                             {"config", cfg.resolved}});
}

void cmd_measure(const ExperimentConfig& cfg) {
  require_files({cfg.out / "base.ckpt"}, "measure");
  const auto corpus = load_corpus(cfg);
  const auto base = load_base(cfg);
  check_taps(cfg, base.net);
  const auto classes = measured_classes(cfg, corpus.manifest);
  const auto& probes = corpus.manifest.probe_set;
  if (probes.empty()) throw ConfigError("manifest has no probe_set");

  app::SweepConfig sc;
  sc.train = cfg.pair_train;
  sc.master_seed = mix_seed({cfg.seed, kPairStream});
  sc.workers = cfg.workers;
  sc.skip_self_pairs = cfg.skip_self_pairs;

  const auto records_path = cfg.out / "records.csv";
  std::vector<app::SeparabilityRecord> completed;
  if (fs::exists(records_path)) {
    const auto plan = app::plan_sweep(classes, probes, cfg.taps, cfg.skip_self_pairs);
    std::set<std::tuple<int, int, std::size_t>> planned;
    for (const auto& j : plan) planned.insert({j.x, j.probe, j.layer});
    for (const auto& r : app::read_records_csv(records_path)) {
      if (planned.count({r.x, r.probe, r.layer}) && r.seed == app::job_seed(sc.master_seed, r.x, r.probe, r.layer)) {
        completed.push_back(r);
      }
    }
    log(fmt::format("resuming: {} completed jobs found", completed.size()));
  }
  app::write_records_csv(records_path, completed);

  std::size_t done = 0;
  const auto result = app::layer_sweep(base.net, classes, probes, cfg.taps, corpus.splits, sc, completed,
                                       [&](const app::SeparabilityRecord& r) {
                                         app::append_record_csv(records_path, r);
                                         if (++done % 50 == 0) log(fmt::format("{} jobs done", done));
                                       });
  app::write_records_csv(records_path, result.records);
  app::write_table_csv(cfg.out / "applicability.csv", result.table, corpus.manifest);
  const auto curves = app::subset_average(result.table, corpus.manifest.subset_labels());
  app::write_curves_csv(cfg.out / "subset_curves.csv", curves);

  json failures = json::array();
  for (const auto& f : result.failures) {
    failures.push_back({{"x", f.x}, {"probe", f.probe}, {"layer", f.layer}, {"message", f.message}});
  }
  write_json(cfg.out / "measure_summary.json", {{"classes", classes},
                                                {"probes", probes},
                                                {"layers", cfg.taps},
                                                {"records", result.records.size()},
                                                {"failures", failures},
                                                {"manifest_hash", corpus.manifest_hash}});
  if (!result.failures.empty()) {
    throw NumericError(fmt::format("{} separability jobs failed; first: {}", result.failures.size(),
                                   result.failures.front().message),
                       -1);
  }
}

void cmd_train_predictors(const ExperimentConfig& cfg) {
  require_files({cfg.out / "base.ckpt", cfg.out / "applicability.csv"}, "train-predictors");
  const auto corpus = load_corpus(cfg);
  const auto base = load_base(cfg);
  check_taps(cfg, base.net);
  const auto table = app::read_table_csv(cfg.out / "applicability.csv");
  const auto& m = corpus.manifest;

  std::vector<int> measured;
  for (int id : table.class_ids()) {
    if (m.has_class(id)) measured.push_back(id);
  }
  std::vector<int> held = cfg.held_out;
  if (held.empty()) {
    for (auto s : data::kAllSubsets) {
      std::optional<int> last;
      for (int id : measured) {
        if (m.cls(id).subset == s) last = id;
      }
      if (last) held.push_back(*last);
    }
  }
  for (int id : held) {
    if (std::find(measured.begin(), measured.end(), id) == measured.end()) {
      throw ConfigError(fmt::format("held-out class {} has no measured applicability", id));
    }
  }
  std::set<int> training;
  if (cfg.train_classes) {
    training.insert(cfg.train_classes->begin(), cfg.train_classes->end());
  } else {
    for (int id : measured) {
      if (std::find(held.begin(), held.end(), id) == held.end()) training.insert(id);
    }
  }
  for (int id : held) {
    if (training.count(id)) throw DataError(fmt::format("leakage: held-out class {} is also a training class", id));
  }
  if (training.empty()) throw ConfigError("no classes left to train the predictors on");
  for (std::size_t layer : cfg.taps) {
    for (int id : training) {
      if (!table.app(id, layer)) throw DataError(fmt::format("no applicability for class {} at layer {}", id, layer));
    }
    for (int id : held) {
      if (!table.app(id, layer)) throw DataError(fmt::format("no applicability for class {} at layer {}", id, layer));
    }
  }

  struct LayerResult {
    pred::PredictorModel model;
    pred::EvalReport eval;
    std::optional<double> perm_mse, baseline, mean_baseline;
  };
  std::vector<LayerResult> results(cfg.taps.size());
  parallel_for(cfg.taps.size(), cfg.workers, [&](std::size_t i) {
    const std::size_t layer = cfg.taps[i];
    pred::SampleSet samples;
    std::vector<Tensor> parts;
    for (int id : training) {
      parts.push_back(forward_range(base.net, corpus.splits.at(id).train, 0, layer + 1));
      samples.targets.insert(samples.targets.end(), parts.back().rows(), *table.app(id, layer));
    }
    samples.activations = Tensor::concat(parts);
    std::vector<pred::HeldOutClass> ho;
    for (int id : held) {
      ho.push_back({id, m.cls(id).subset, *table.app(id, layer),
                    forward_range(base.net, corpus.splits.at(id).test, 0, layer + 1)});
    }
    const auto spec = pred::build_predictor(pred::tap_shape(base.net, layer));
    TrainConfig tc = cfg.predictor_train;
    tc.seed = mix_seed({cfg.seed, kPredictorStream, layer});
    auto& r = results[i];
    r.model = pred::train_predictor(spec, samples, tc, layer);
    r.eval = pred::evaluate_predictor(r.model, ho, training);
    r.model.report.heldout_mse = r.eval.overall_mse;
    if (cfg.permutation_control) {
      auto shuffled = samples;
      Rng rng(mix_seed({cfg.seed, kPermutationStream, layer}));
      rng.shuffle(std::span(shuffled.targets));
      const auto pm = pred::train_predictor(spec, shuffled, tc, layer);
      r.perm_mse = pred::evaluate_predictor(pm, ho, training).overall_mse;
      double train_mean = 0.0;
      for (double t : samples.targets) train_mean += t;
      train_mean /= static_cast<double>(samples.targets.size());
      double sum = 0.0, weight = 0.0;
      for (const auto& h : ho) {
        sum += static_cast<double>(h.activations.rows()) * h.actual_app;
        weight += static_cast<double>(h.activations.rows());
      }
      const double heldout_mean = sum / weight;
      double var = 0.0, drift = 0.0;
      for (const auto& h : ho) {
        const double rows = static_cast<double>(h.activations.rows());
        var += rows * (h.actual_app - heldout_mean) * (h.actual_app - heldout_mean);
        drift += rows * (h.actual_app - train_mean) * (h.actual_app - train_mean);
      }
      r.baseline = var / weight;
      r.mean_baseline = drift / weight;
    }
    log(fmt::format("layer {}: {} plan, train mse {:.6f}, held-out mse {:.6f}", layer, pred::to_string(spec.plan),
                    r.model.report.final_train_mse, r.eval.overall_mse));
  });

  fs::create_directories(cfg.out / "predictors");
  json layers = json::array();
  for (std::size_t i = 0; i < cfg.taps.size(); ++i) {
    const auto& r = results[i];
    const std::size_t layer = cfg.taps[i];
    pred::save_predictor(predictor_path(cfg, layer), r.model);
    csv::write(eval_path(cfg, layer), kEvalHeader, eval_lines(r.eval));
    json entry = {{"layer", layer},
                  {"plan", pred::to_string(r.model.spec.plan)},
                  {"train_mse", r.model.report.final_train_mse},
                  {"heldout_mse", r.eval.overall_mse},
                  {"initial_mse", r.model.report.initial_mse},
                  {"n_train", r.model.report.n},
                  {"max_abs_err", 0.0},
                  {"warnings", r.model.report.warnings}};
    double worst = 0.0;
    for (const auto& c : r.eval.classes) worst = std::max(worst, c.abs_err);
    entry["max_abs_err"] = worst;
    if (r.perm_mse) {
      entry["permutation"] = {{"heldout_mse", *r.perm_mse},
                              {"baseline_mse", *r.baseline},
                              {"train_mean_mse", *r.mean_baseline},
                              {"ratio", *r.baseline > 0 ? *r.perm_mse / *r.baseline : 0.0}};
    }
    layers.push_back(entry);
  }
  write_json(cfg.out / "predictor_summary.json", {{"layers", layers},
                                                  {"held_out", held},
                                                  {"train_classes", std::vector<int>(training.begin(), training.end())},
                                                  {"manifest_hash", corpus.manifest_hash}});
}

void cmd_cactus_run(const ExperimentConfig& cfg) {
  require_files({cfg.out / "base.ckpt"}, "cactus-run");
  if (!cfg.thresholds) require_files({cfg.out / "applicability.csv"}, "cactus-run");
  if (cfg.stream.empty()) throw ConfigError("cactus-run needs a stream (cactus.stream or --stream)");
  if (!fs::exists(cfg.stream)) throw ConfigError("stream file not found: " + cfg.stream.string());
  const auto corpus = load_corpus(cfg);
  const auto base = load_base(cfg);
  check_taps(cfg, base.net);
  if (cfg.taps.size() < 2) throw ConfigError("cactus-run needs at least two taps");
  const std::size_t depth = decision_depth(cfg);

  struct Item {
    int class_id = 0;
    std::size_t index = 0;
    std::optional<double> mock;
  };
  std::vector<Item> items;
  {
    std::ifstream in(cfg.stream);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = json::parse(line);
        Item it{j.at("class_id").get<int>(), j.at("index").get<std::size_t>(), std::nullopt};
        if (j.contains("mock_app") && !j["mock_app"].is_null()) it.mock = j["mock_app"].get<double>();
        items.push_back(it);
      } catch (const json::exception& e) {
        throw ConfigError(fmt::format("{}:{}: {}", cfg.stream.string(), n, e.what()));
      }
    }
  }

  auto tree = cactus::CactusTree::from_trunk(base.net, cfg.taps, base.labels, depth);
  std::optional<app::ApplicabilityTable> table;
  if (!cfg.thresholds) table = app::read_table_csv(cfg.out / "applicability.csv");
  json thresholds = json::array();
  bool all_predictors = true;
  for (std::size_t d = 1; d < cfg.taps.size(); ++d) {
    const std::size_t layer = cfg.taps[d];
    const auto b = cfg.thresholds ? *cfg.thresholds
                                  : cactus::baseline_from_tables(*table, corpus.manifest.subset_labels(), layer,
                                                                 cfg.taps.back());
    const auto t = cactus::compute_thresholds(b.q, b.y1, b.y2);
    tree.set_thresholds(tree.trunk_node(d), t);
    thresholds.push_back({{"depth", d}, {"layer", layer}, {"q", t.q}, {"y1", t.y1}, {"y2", t.y2},
                          {"tau1", t.tau1}, {"tau2", t.tau2}});
    const auto p = predictor_path(cfg, layer);
    if (fs::exists(p)) {
      tree.set_estimator(tree.trunk_node(d), std::make_shared<cactus::PredictorEstimator>(pred::load_predictor(p)),
                         fs::relative(p, cfg.out).generic_string());
    } else {
      all_predictors = false;
    }
  }

  std::vector<cactus::StreamItem> stream;
  for (const auto& it : items) {
    if (!corpus.splits.contains(it.class_id)) throw ConfigError(fmt::format("stream names unknown class {}", it.class_id));
    const auto& split = corpus.splits.at(it.class_id);
    if (it.index >= split.test.rows()) {
      throw ConfigError(fmt::format("stream index {} exceeds the {} test images of class {}", it.index,
                                    split.test.rows(), it.class_id));
    }
    if (!it.mock && !all_predictors) {
      throw UntrainedPredictorError("a routing depth has no trained predictor; run train-predictors or give mock_app");
    }
    cactus::AppOverride ov;
    if (it.mock) ov = [v = *it.mock](const cactus::CactusNode&) { return std::optional<double>(v); };
    stream.push_back({split.test_image(it.index).pixels, ov});
  }

  cactus::GrowthConfig gc;
  gc.window = cfg.window;
  gc.max_branches_per_node = cfg.max_branches_per_node;
  gc.seed = mix_seed({cfg.seed, kGrowthStream});
  const auto initial = tree.topology();
  cactus::GrowthLog growth;
  try {
    growth = cactus::grow(tree, stream, gc);
  } catch (const ConfigError& e) {
    throw UntrainedPredictorError(e.what());
  }

  auto rebuilt = cactus::CactusTree::from_trunk(base.net, cfg.taps, base.labels, depth);
  for (std::size_t d = 1; d < cfg.taps.size(); ++d) {
    rebuilt.set_thresholds(rebuilt.trunk_node(d), *tree.node(tree.trunk_node(d)).thresholds);
    rebuilt.node(rebuilt.trunk_node(d)).predictor_ref = tree.node(tree.trunk_node(d)).predictor_ref;
  }
  cactus::replay(rebuilt, growth);
  const bool replay_matches = rebuilt.topology() == tree.topology();

  std::map<SubsetLabel, std::map<std::string, std::size_t>> hist;
  for (auto s : data::kAllSubsets) {
    for (auto v : {"known", "objective_unknown", "nonobjective_unknown", "unrouted"}) hist[s][v] = 0;
  }
  std::map<std::string, std::size_t> totals;
  for (const auto& d : growth.decisions) {
    const auto subset = corpus.manifest.cls(items[d.index].class_id).subset;
    ++hist[subset][std::string(cactus::to_string(d.verdict))];
    ++totals[std::string(cactus::to_string(d.verdict))];
    if (d.unrouted) ++hist[subset]["unrouted"];
  }
  std::vector<std::string> rows;
  for (auto s : data::kAllSubsets) {
    auto& h = hist[s];
    rows.push_back(fmt::format("{},{},{},{},{}", data::to_string(s), h["known"], h["objective_unknown"],
                               h["nonobjective_unknown"], h["unrouted"]));
  }

  const auto dir = cfg.out / "cactus";
  fs::remove_all(dir / "tree");
  fs::create_directories(dir / "tree");
  cactus::write_growth_log(dir / "growth_log.jsonl", growth);
  tree.save(dir / "tree");
  csv::write(dir / "verdict_histogram.csv", "subset,known,objective_unknown,nonobjective_unknown,unrouted", rows);
  write_json(dir / "cactus_summary.json", {{"decision_depth", depth},
                                           {"decision_layer", cfg.taps[depth]},
                                           {"thresholds", thresholds},
                                           {"inputs", growth.decisions.size()},
                                           {"verdicts", totals},
                                           {"branches_created", growth.branches_created},
                                           {"unrouted", growth.unrouted},
                                           {"tree_changed", initial != tree.topology()},
                                           {"replay_matches", replay_matches}});
  if (!replay_matches) throw DataError("growth log replay did not reproduce the tree");
}

void cmd_report(const ExperimentConfig& cfg) {
  if (cfg.taps.size() < 2) throw ConfigError("report needs at least two taps");
  const std::size_t layer = cfg.taps[decision_depth(cfg)];
  std::vector<fs::path> needed{cfg.out / "subset_curves.csv", cfg.out / "applicability.csv",
                               cfg.out / "predictor_summary.json", cfg.out / "cactus" / "cactus_summary.json",
                               cfg.out / "cactus" / "verdict_histogram.csv"};
  for (std::size_t l : cfg.taps) needed.push_back(eval_path(cfg, l));
  require_files(needed, "report");

  const auto dir = cfg.out / "report";
  fs::create_directories(dir);
  auto copy = [&](const fs::path& from, const std::string& name) {
    const auto bytes = io::read_file(from);
    io::write_file_atomic(dir / name, std::string_view(bytes.data(), bytes.size()));
  };
  copy(cfg.out / "subset_curves.csv", "subset_curves.csv");
  copy(eval_path(cfg, layer), "fidelity.csv");
  copy(cfg.out / "cactus" / "verdict_histogram.csv", "verdict_histogram.csv");

  std::vector<std::string> by_layer;
  for (std::size_t l : cfg.taps) {
    for (const auto& row : csv::read(eval_path(cfg, l), kEvalHeader)) {
      std::string line = std::to_string(l);
      for (const auto& f : row) line += "," + f;
      by_layer.push_back(line);
    }
  }
  csv::write(dir / "fidelity_by_layer.csv", "layer," + std::string(kEvalHeader), by_layer);

  const auto summary = read_json(cfg.out / "predictor_summary.json");
  std::vector<std::string> mse_rows;
  for (const auto& e : summary.at("layers")) {
    mse_rows.push_back(fmt::format("{},{},{}", e.at("layer").get<std::size_t>(),
                                   fmt_double(e.at("train_mse").get<double>()),
                                   fmt_double(e.at("heldout_mse").get<double>())));
  }
  csv::write(dir / "predictor_mse.csv", "layer,train_mse,heldout_mse", mse_rows);

  const auto growth = read_json(cfg.out / "cactus" / "cactus_summary.json");
  write_json(dir / "growth_summary.json", growth);
  write_json(dir / "report.json", {{"fidelity_layer", layer},
                                   {"held_out", summary.at("held_out")},
                                   {"files",
                                    {"subset_curves.csv", "fidelity.csv", "fidelity_by_layer.csv", "predictor_mse.csv",
                                     "verdict_histogram.csv", "growth_summary.json"}}});
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const UntrainedPredictorError*>(&e)) return 3;
  if (dynamic_cast<const Error*>(&e) || dynamic_cast<const CLI::Error*>(&e)) return 2;
  return 1;
}

int run(int argc, const char* const* argv) {
  CLI::App app{"CactusNet experiment runner"};
  app.require_subcommand(1);
  std::string config_path, out, stream;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  auto* config_opt = app.add_option("--config", config_path, "experiment config (JSON)")->required();
  auto* out_opt = app.add_option("--out", out, "output directory");
  auto* seed_opt = app.add_option("--seed", seed, "master seed");
  auto* workers_opt = app.add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  (void)config_opt;

  using Command = void (*)(const ExperimentConfig&);
  const std::vector<std::tuple<std::string, std::string, Command>> verbs{
      {"train-base", "train the base classifier on the known classes", cmd_train_base},
      {"measure", "run the 1-vs-1 applicability sweep", cmd_measure},
      {"train-predictors", "train one applicability predictor per tapped layer", cmd_train_predictors},
      {"cactus-run", "route a stream through the CactusNet and grow branches", cmd_cactus_run},
      {"report", "collect plot-ready outputs into <out>/report", cmd_report}};
  std::map<CLI::App*, Command> handlers;
  CLI::Option* stream_opt = nullptr;
  for (const auto& [name, help, fn] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    if (name == "cactus-run") stream_opt = sub->add_option("--stream", stream, "input stream (JSON lines)");
    handlers[sub] = fn;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Overrides ov;
    if (*out_opt) ov.out = out;
    if (*seed_opt) ov.seed = seed;
    if (*workers_opt) ov.workers = workers;
    if (stream_opt && *stream_opt) ov.stream = fs::absolute(stream);
    const auto cfg = load_config(config_path, ov);
    for (const auto& [sub, fn] : handlers) {
      if (sub->parsed()) fn(cfg);
    }
    return 0;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return exit_code_for(e);
  }
}

}  // namespace cnl::cli
