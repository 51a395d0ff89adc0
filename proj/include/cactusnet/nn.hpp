#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cactusnet/tensor.hpp"

namespace cnl {

enum class LayerKind { Conv2D, MaxPool2D, Dense, ReLU, Softmax, Flatten };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t units = 0;  // Conv2D filter count or Dense output width
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  bool frozen = false;

  static LayerSpec conv2d(std::size_t filters, std::size_t kernel, std::size_t stride = 1);
  static LayerSpec conv2d(std::size_t filters, std::size_t kernel_h, std::size_t kernel_w, std::size_t stride);
  static LayerSpec max_pool(std::size_t kernel, std::size_t stride);
  static LayerSpec dense(std::size_t outputs);
  static LayerSpec relu();
  static LayerSpec softmax();
  static LayerSpec flatten();

  bool has_params() const { return kind == LayerKind::Conv2D || kind == LayerKind::Dense; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Conv2D: weights [kh,kw,c_in,c_out], bias [c_out].
// Dense:  weights [in,out], bias [out].
struct LayerParams {
  Tensor weights;
  Tensor bias;

  bool empty() const { return weights.empty() && bias.empty(); }
};

// An ordered layer stack with a fixed per-sample input shape. Shapes are
// inferred and checked on construction, so a conforming batch always runs.
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::vector<LayerSpec> layers);

  // Builds and initializes in one go.
  static Network create(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed);

  // Uniform Glorot init of every parameterized layer; layer i draws from a
  // stream seeded by (seed, i).
  void initialize(std::uint64_t seed);
  void initialize_layer(std::size_t index, std::uint64_t seed);

  const Shape& input_shape() const { return input_shape_; }
  std::size_t layer_count() const { return layers_.size(); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }

  const LayerParams& params(std::size_t i) const { return params_.at(i); }
  LayerParams& params(std::size_t i) { return params_.at(i); }

  // Per-sample output shape of layer i.
  const Shape& output_shape(std::size_t i) const { return shapes_.at(i); }
  const Shape& output_shape() const { return shapes_.empty() ? input_shape_ : shapes_.back(); }
  const Shape& layer_input_shape(std::size_t i) const { return i == 0 ? input_shape_ : shapes_.at(i - 1); }

  void set_frozen(std::size_t i, bool frozen);
  // Freezes layers 0..last (inclusive).
  void freeze_through(std::size_t last);
  void unfreeze_all();

  // Layers [begin, end) as a standalone network. Parameters and freeze flags
  // are copied.
  Network slice(std::size_t begin, std::size_t end) const;

  // Index of the last Dense layer, if any.
  std::optional<std::size_t> last_dense() const;

  std::size_t parameter_count() const;

  // Replaces a Dense layer's width; only valid for the final Dense layer
  // since nothing downstream may depend on it except Softmax.
  void resize_dense(std::size_t index, std::size_t outputs);

 private:
  void infer_shapes();

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<LayerParams> params_;
  std::vector<Shape> shapes_;
};

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ActivationTrace {
  std::vector<Tensor> outputs;  // one per layer, final output last

  const Tensor& final_output() const { return outputs.back(); }
};

enum class LossKind { CrossEntropy, MSE };

struct Gradients {
  std::vector<LayerParams> layers;  // empty entries for frozen / unparameterized layers
  Tensor input;                     // d loss / d batch, only when requested
  double loss = 0.0;
};

struct BackwardOptions {
  bool input_gradient = false;
  // Compute gradients for frozen layers as well (used by gradient checks).
  bool include_frozen = false;
};

// Output of the forward pass for every layer.
ActivationTrace forward(const Network& net, const Tensor& batch);

// Final output only; evaluates in chunks to bound memory.
Tensor predict(const Network& net, const Tensor& batch, std::size_t chunk = 256);

// Applies layers [begin, end) to an input that conforms to layer `begin`.
Tensor forward_range(const Network& net, const Tensor& input, std::size_t begin, std::size_t end,
                     std::size_t chunk = 256);

double loss_value(const Tensor& output, const Tensor& targets, LossKind kind);

// Loss and parameter gradients, averaged over the batch.
// CrossEntropy requires a Softmax final layer and one-hot (or soft) targets.
Gradients backward(const Network& net, const Tensor& batch, const Tensor& targets, LossKind kind,
                   const BackwardOptions& options = {});

// param <- param - lr * grad for unfrozen parameterized layers.
void sgd_step(Network& net, const Gradients& grads, const TrainConfig& cfg);

// Swaps the final Dense layer for a freshly initialized one of width
// num_outputs. Earlier layers are untouched.
void replace_head(Network& net, std::size_t num_outputs, std::uint64_t seed);

Tensor one_hot(std::span<const int> labels, std::size_t classes);
std::vector<int> argmax_rows(const Tensor& output);
double accuracy(const Network& net, const Tensor& inputs, std::span<const int> labels);

// Produces the sample order for one epoch.
using EpochOrder = std::function<std::vector<std::size_t>(std::size_t epoch, std::size_t count)>;

struct FitReport {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

// Minibatch SGD. Without an explicit order each epoch is a seeded shuffle.
FitReport fit(Network& net, const Tensor& inputs, const Tensor& targets, LossKind kind, const TrainConfig& cfg,
              const EpochOrder& order = {});

}  // namespace cnl
