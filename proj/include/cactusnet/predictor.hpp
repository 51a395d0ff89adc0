#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cactusnet/data.hpp"
#include "cactusnet/nn.hpp"

namespace cnl::pred {

enum class Plan { Conv, Dense };

std::string_view to_string(Plan plan);

struct PredictorSpec {
  Shape input_shape;  // (h, w, maps); dense taps are (1, 1, outputs)
  Plan plan = Plan::Dense;
  std::vector<LayerSpec> layers;
};

// Conv plan (min(h, w) >= 4): two blocks of [conv, ReLU, conv, ReLU, 2x2 pool]
// with 32 then 64 filters, flatten, dense-1. A block uses 3x3 kernels when two
// valid 3x3 convolutions still leave room for this and any later pooling,
// otherwise 1x1. Dense plan: flatten, dense 64, ReLU, dense 32, ReLU, dense-1.
PredictorSpec build_predictor(const Shape& tap_shape);

// Per-sample activation shape of `layer` as the predictor sees it.
Shape tap_shape(const Network& net, std::size_t layer);

struct TrainingReport {
  std::vector<double> epoch_mse;  // mean minibatch MSE per epoch
  double initial_mse = 0.0;       // whole training set, before the first step (target variance)
  double final_train_mse = 0.0;   // whole training set, after the last step
  std::optional<double> heldout_mse;
  std::size_t n = 0;
  std::vector<std::string> warnings;
};

struct PredictorModel {
  PredictorSpec spec;
  Network net;
  std::size_t layer_index = 0;
  // Activations are multiplied by this before entering the network.
  float input_scale = 1.0f;
  TrainingReport report;
};

// One row per image: activations [n, ...] reshaped to the spec input shape,
// targets in [0,1].
struct SampleSet {
  Tensor activations;
  std::vector<double> targets;
};

inline const TrainConfig kPredictorTraining{0.03, 30, 32, 0};

// Minimizes MSE with plain SGD on standardized targets, starting from a zero
// output layer; the target mean and scale are folded back into the output
// layer afterwards, so the network emits App directly. The input scale is
// the reciprocal RMS of the training activations.
PredictorModel train_predictor(const PredictorSpec& spec, const SampleSet& samples, const TrainConfig& cfg,
                               std::size_t layer_index = 0);

// Raw regression output clamped to [0,1].
double predict_applicability(const PredictorModel& model, const Tensor& activation);
std::vector<double> predict_batch(const PredictorModel& model, const Tensor& activations);

double mse(std::span<const double> predicted, std::span<const double> targets);

struct HeldOutClass {
  int class_id = 0;
  data::SubsetLabel subset = data::SubsetLabel::ObjectiveKnown;
  double actual_app = 0.0;
  Tensor activations;
};

struct ClassEval {
  int class_id = 0;
  data::SubsetLabel subset = data::SubsetLabel::ObjectiveKnown;
  double actual_app = 0.0;
  double mean_predicted = 0.0;
  double abs_err = 0.0;
  double mse = 0.0;
  std::size_t n = 0;
};

struct SubsetEval {
  data::SubsetLabel subset = data::SubsetLabel::ObjectiveKnown;
  double mean_abs_err = 0.0;
  double mse = 0.0;
  std::size_t n = 0;
};

struct EvalReport {
  std::vector<ClassEval> classes;
  std::vector<SubsetEval> subsets;
  double overall_mse = 0.0;
};

// Throws DataError if a held-out class is among training_classes.
EvalReport evaluate_predictor(const PredictorModel& model, std::span<const HeldOutClass> held_out,
                              const std::set<int>& training_classes);

inline constexpr std::string_view kPredictorMagic = "CNLPRED1";
void save_predictor(const std::filesystem::path& path, const PredictorModel& model);
PredictorModel load_predictor(const std::filesystem::path& path);

}  // namespace cnl::pred
