#include "cactusnet/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "cactusnet/checkpoint.hpp"
#include "cactusnet/error.hpp"

namespace cnl::pred {

std::string_view to_string(Plan plan) { return plan == Plan::Conv ? "conv" : "dense"; }

PredictorSpec build_predictor(const Shape& tap) {
  if (tap.size() != 3 || tap[0] == 0 || tap[1] == 0 || tap[2] == 0) {
    throw ShapeError("predictor tap shape must be (h, w, maps) with positive extents, got " + shape_str(tap));
  }
  PredictorSpec spec;
  spec.input_shape = tap;
  std::size_t extent = std::min(tap[0], tap[1]);
  if (extent >= 4) {
    spec.plan = Plan::Conv;
    for (std::size_t filters : {32u, 64u}) {
      const std::size_t need_after = filters == 32 ? 2 : 1;
      const std::size_t k = extent >= 4 + 2 * need_after ? 3 : 1;
      spec.layers.push_back(LayerSpec::conv2d(filters, k));
      spec.layers.push_back(LayerSpec::relu());
      spec.layers.push_back(LayerSpec::conv2d(filters, k));
      spec.layers.push_back(LayerSpec::relu());
      spec.layers.push_back(LayerSpec::max_pool(2, 2));
      extent = (extent - 2 * (k - 1)) / 2;
    }
    spec.layers.push_back(LayerSpec::flatten());
    spec.layers.push_back(LayerSpec::dense(1));
  } else {
    spec.plan = Plan::Dense;
    spec.layers = {LayerSpec::flatten(), LayerSpec::dense(64), LayerSpec::relu(),
                   LayerSpec::dense(32), LayerSpec::relu(),    LayerSpec::dense(1)};
  }
  return spec;
}

Shape tap_shape(const Network& net, std::size_t layer) {
  const Shape& s = net.output_shape(layer);
  if (s.size() == 1) return {1, 1, s[0]};
  if (s.size() == 3) return s;
  throw ShapeError(fmt::format("layer {} output {} cannot be read as (h, w, maps)", layer, shape_str(s)));
}

namespace {

// Accepts [n, h, w, c] matching the spec, or flat [n, outputs] for (1, 1, outputs).
Tensor conform(const PredictorSpec& spec, const Tensor& activations) {
  const Shape sample = activations.sample_shape();
  if (sample == spec.input_shape) return activations;
  if (sample.size() == 1 && spec.input_shape[0] == 1 && spec.input_shape[1] == 1 && sample[0] == spec.input_shape[2]) {
    Shape s{activations.rows()};
    s.insert(s.end(), spec.input_shape.begin(), spec.input_shape.end());
    return activations.reshaped(s);
  }
  throw ShapeError("activation shape " + shape_str(sample) + " does not match predictor input " +
                   shape_str(spec.input_shape));
}

Tensor scaled(const PredictorModel& model, const Tensor& activations) {
  Tensor x = conform(model.spec, activations);
  for (auto& v : x.values()) v *= model.input_scale;
  return x;
}

std::vector<double> outputs(const PredictorModel& model, const Tensor& x) {
  const Tensor y = predict(model.net, x);
  std::vector<double> out(y.rows());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(static_cast<double>(y[i]), 0.0, 1.0);
  return out;
}

nlohmann::json report_json(const TrainingReport& r) {
  nlohmann::json j;
  j["epoch_mse"] = r.epoch_mse;
  j["initial_mse"] = r.initial_mse;
  j["final_train_mse"] = r.final_train_mse;
  j["heldout_mse"] = r.heldout_mse ? nlohmann::json(*r.heldout_mse) : nlohmann::json(nullptr);
  j["n"] = r.n;
  j["warnings"] = r.warnings;
  return j;
}

TrainingReport report_from_json(const nlohmann::json& j) {
  TrainingReport r;
  r.epoch_mse = j.at("epoch_mse").get<std::vector<double>>();
  r.initial_mse = j.at("initial_mse").get<double>();
  r.final_train_mse = j.at("final_train_mse").get<double>();
  if (!j.at("heldout_mse").is_null()) r.heldout_mse = j.at("heldout_mse").get<double>();
  r.n = j.at("n").get<std::size_t>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

}  // namespace

double mse(std::span<const double> predicted, std::span<const double> targets) {
  if (predicted.size() != targets.size() || predicted.empty()) {
    throw ShapeError(fmt::format("mse over {} predictions and {} targets", predicted.size(), targets.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) s += (predicted[i] - targets[i]) * (predicted[i] - targets[i]);
  return s / static_cast<double>(predicted.size());
}

PredictorModel train_predictor(const PredictorSpec& spec, const SampleSet& samples, const TrainConfig& cfg,
                               std::size_t layer_index) {
  cfg.validate();
  const std::size_t n = samples.targets.size();
  if (n == 0) throw DataError("predictor training needs at least one sample");
  if (samples.activations.rows() != n) {
    throw ShapeError(fmt::format("{} activations for {} targets", samples.activations.rows(), n));
  }
  for (double t : samples.targets) {
    if (!(t >= 0.0 && t <= 1.0)) throw RangeError(fmt::format("target {} outside [0,1]", t));
  }
  PredictorModel model;
  model.spec = spec;
  model.layer_index = layer_index;
  const Tensor raw = conform(spec, samples.activations);

  double sq = 0.0;
  for (float v : raw.values()) sq += static_cast<double>(v) * v;
  const double rms = std::sqrt(sq / static_cast<double>(std::max<std::size_t>(raw.size(), 1)));
  model.input_scale = rms > 0.0 ? static_cast<float>(1.0 / rms) : 1.0f;

  double mean = 0.0, var = 0.0;
  for (double t : samples.targets) mean += t;
  mean /= static_cast<double>(n);
  for (double t : samples.targets) var += (t - mean) * (t - mean);
  var /= static_cast<double>(n);
  const double scale = var > 1e-18 ? std::sqrt(var) : 1.0;
  const auto [lo, hi] = std::minmax_element(samples.targets.begin(), samples.targets.end());
  if (*lo == *hi) {
    model.report.warnings.push_back(fmt::format("degenerate targets: all {} samples have target {}", n, *lo));
  }

  model.net = Network::create(spec.input_shape, spec.layers, cfg.seed);
  const std::size_t head = *model.net.last_dense();
  auto& hp = model.net.params(head);
  std::fill(hp.weights.values().begin(), hp.weights.values().end(), 0.0f);
  hp.bias[0] = 0.0f;

  const Tensor x = scaled(model, raw);
  Tensor z({n, 1});
  for (std::size_t i = 0; i < n; ++i) z[i] = static_cast<float>((samples.targets[i] - mean) / scale);

  model.report.n = n;
  model.report.initial_mse = var;
  for (double loss : fit(model.net, x, z, LossKind::MSE, cfg).epoch_loss) {
    model.report.epoch_mse.push_back(loss * scale * scale);
  }
  // Fold the target standardization into the output layer.
  auto& out = model.net.params(head);
  for (auto& w : out.weights.values()) w = static_cast<float>(w * scale);
  out.bias[0] = static_cast<float>(mean + scale * out.bias[0]);
  model.report.final_train_mse = mse(outputs(model, x), samples.targets);
  return model;
}

double predict_applicability(const PredictorModel& model, const Tensor& activation) {
  Shape s{1};
  const Shape& in = activation.shape();
  s.insert(s.end(), in.begin(), in.end());
  return predict_batch(model, activation.reshaped(s)).at(0);
}

std::vector<double> predict_batch(const PredictorModel& model, const Tensor& activations) {
  return outputs(model, scaled(model, activations));
}

EvalReport evaluate_predictor(const PredictorModel& model, std::span<const HeldOutClass> held_out,
                              const std::set<int>& training_classes) {
  for (const auto& h : held_out) {
    if (training_classes.count(h.class_id)) {
      throw DataError(fmt::format("leakage: held-out class {} was used to train the predictor", h.class_id));
    }
  }
  EvalReport report;
  std::map<data::SubsetLabel, SubsetEval> subsets;
  double total_sq = 0.0;
  std::size_t total_n = 0;
  for (const auto& h : held_out) {
    const auto preds = predict_batch(model, h.activations);
    if (preds.empty()) throw DataError(fmt::format("held-out class {} has no samples", h.class_id));
    ClassEval row{h.class_id, h.subset, h.actual_app, 0.0, 0.0, 0.0, preds.size()};
    double sq = 0.0;
    for (double p : preds) {
      row.mean_predicted += p;
      sq += (p - h.actual_app) * (p - h.actual_app);
    }
    row.mean_predicted /= static_cast<double>(preds.size());
    row.abs_err = std::abs(row.mean_predicted - h.actual_app);
    row.mse = sq / static_cast<double>(preds.size());
    total_sq += sq;
    total_n += preds.size();
    auto& s = subsets[h.subset];
    s.subset = h.subset;
    s.mean_abs_err += row.abs_err;
    s.mse += sq;
    s.n += preds.size();
    report.classes.push_back(row);
  }
  for (auto& [label, s] : subsets) {
    const auto classes = std::count_if(report.classes.begin(), report.classes.end(),
                                       [&](const ClassEval& c) { return c.subset == label; });
    s.mean_abs_err /= static_cast<double>(classes);
    s.mse /= static_cast<double>(s.n);
    report.subsets.push_back(s);
  }
  report.overall_mse = total_n ? total_sq / static_cast<double>(total_n) : 0.0;
  return report;
}

void save_predictor(const std::filesystem::path& path, const PredictorModel& model) {
  nlohmann::json extra;
  extra["layer_index"] = model.layer_index;
  extra["tap_shape"] = model.spec.input_shape;
  extra["plan"] = to_string(model.spec.plan);
  extra["input_scale"] = model.input_scale;
  extra["report"] = report_json(model.report);
  save_checkpoint(path, model.net, extra, kPredictorMagic);
}

PredictorModel load_predictor(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path, kPredictorMagic);
  PredictorModel model;
  try {
    model.spec = build_predictor(ck.extra.at("tap_shape").get<Shape>());
    model.layer_index = ck.extra.at("layer_index").get<std::size_t>();
    model.input_scale = ck.extra.at("input_scale").get<float>();
    model.report = report_from_json(ck.extra.at("report"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Corrupt, path.string() + ": " + e.what());
  }
  if (ck.net.layers() != model.spec.layers || ck.net.input_shape() != model.spec.input_shape) {
    throw FormatError(FormatError::Kind::Corrupt, path.string() + ": network does not match the predictor plan");
  }
  model.net = std::move(ck.net);
  return model;
}

}  // namespace cnl::pred
