#include "cactusnet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cactusnet/error.hpp"
#include "cactusnet/ops.hpp"
#include "cactusnet/rng.hpp"

namespace cnl {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::MaxPool2D: return "MaxPool2D";
    case LayerKind::Dense: return "Dense";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Softmax: return "Softmax";
    case LayerKind::Flatten: return "Flatten";
  }
  return "?";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (auto k : {LayerKind::Conv2D, LayerKind::MaxPool2D, LayerKind::Dense, LayerKind::ReLU, LayerKind::Softmax,
                 LayerKind::Flatten}) {
    if (to_string(k) == name) return k;
  }
  throw UnsupportedArchitecture("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::conv2d(std::size_t filters, std::size_t kernel, std::size_t stride) {
  return conv2d(filters, kernel, kernel, stride);
}

LayerSpec LayerSpec::conv2d(std::size_t filters, std::size_t kernel_h, std::size_t kernel_w, std::size_t stride) {
  return {LayerKind::Conv2D, filters, kernel_h, kernel_w, stride, false};
}

LayerSpec LayerSpec::max_pool(std::size_t kernel, std::size_t stride) {
  return {LayerKind::MaxPool2D, 0, kernel, kernel, stride, false};
}

LayerSpec LayerSpec::dense(std::size_t outputs) { return {LayerKind::Dense, outputs, 1, 1, 1, false}; }
LayerSpec LayerSpec::relu() { return {LayerKind::ReLU}; }
LayerSpec LayerSpec::softmax() { return {LayerKind::Softmax}; }
LayerSpec LayerSpec::flatten() { return {LayerKind::Flatten}; }

// ---------------------------------------------------------------------------
// Network

Network::Network(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) {
    throw ShapeError("network input shape " + shape_str(input_shape_) + " must have positive extents");
  }
  infer_shapes();
  params_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const auto& in = layer_input_shape(i);
    if (l.kind == LayerKind::Conv2D) {
      params_[i].weights = Tensor({l.kernel_h, l.kernel_w, in[2], l.units});
      params_[i].bias = Tensor({l.units});
    } else if (l.kind == LayerKind::Dense) {
      params_[i].weights = Tensor({in[0], l.units});
      params_[i].bias = Tensor({l.units});
    }
  }
}

Network Network::create(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed) {
  Network net(std::move(input_shape), std::move(layers));
  net.initialize(seed);
  return net;
}

void Network::infer_shapes() {
  shapes_.clear();
  Shape cur = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const auto fail = [&](const std::string& why) {
      throw ShapeError("layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) + ") cannot accept " +
                       shape_str(cur) + ": " + why);
    };
    switch (l.kind) {
      case LayerKind::Conv2D:
      case LayerKind::MaxPool2D: {
        if (cur.size() != 3) fail("expects an [h,w,c] input");
        if (l.kernel_h == 0 || l.kernel_w == 0 || l.stride == 0) fail("kernel and stride must be >= 1");
        if (l.kind == LayerKind::Conv2D && l.units == 0) fail("filter count must be >= 1");
        if (l.kernel_h > cur[0] || l.kernel_w > cur[1]) fail("kernel larger than input");
        const std::size_t h = (cur[0] - l.kernel_h) / l.stride + 1;
        const std::size_t w = (cur[1] - l.kernel_w) / l.stride + 1;
        cur = {h, w, l.kind == LayerKind::Conv2D ? l.units : cur[2]};
        break;
      }
      case LayerKind::Dense:
        if (cur.size() != 1) fail("expects a flat input; insert Flatten first");
        if (l.units == 0) fail("output width must be >= 1");
        cur = {l.units};
        break;
      case LayerKind::Flatten:
        cur = {shape_size(cur)};
        break;
      case LayerKind::ReLU:
      case LayerKind::Softmax:
        break;
    }
    shapes_.push_back(cur);
  }
}

void Network::initialize(std::uint64_t seed) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].has_params()) initialize_layer(i, seed);
}

void Network::initialize_layer(std::size_t index, std::uint64_t seed) {
  const auto& l = layers_.at(index);
  if (!l.has_params()) return;
  auto& p = params_[index];
  std::size_t fan_in, fan_out;
  if (l.kind == LayerKind::Conv2D) {
    const std::size_t area = l.kernel_h * l.kernel_w;
    fan_in = area * p.weights.dim(2);
    fan_out = area * l.units;
  } else {
    fan_in = p.weights.dim(0);
    fan_out = l.units;
  }
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Rng rng(mix_seed({seed, index}));
  for (auto& w : p.weights.values()) w = static_cast<float>(rng.uniform(-s, s));
  std::fill(p.bias.values().begin(), p.bias.values().end(), 0.0f);
}

void Network::set_frozen(std::size_t i, bool frozen) { layers_.at(i).frozen = frozen; }

void Network::freeze_through(std::size_t last) {
  for (std::size_t i = 0; i <= last && i < layers_.size(); ++i) layers_[i].frozen = true;
}

void Network::unfreeze_all() {
  for (auto& l : layers_) l.frozen = false;
}

Network Network::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > layers_.size()) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") outside a " +
                     std::to_string(layers_.size()) + "-layer network");
  }
  Network out(layer_input_shape(begin),
              std::vector<LayerSpec>(layers_.begin() + static_cast<std::ptrdiff_t>(begin),
                                     layers_.begin() + static_cast<std::ptrdiff_t>(end)));
  for (std::size_t i = begin; i < end; ++i) out.params_[i - begin] = params_[i];
  return out;
}

std::optional<std::size_t> Network::last_dense() const {
  for (std::size_t i = layers_.size(); i-- > 0;)
    if (layers_[i].kind == LayerKind::Dense) return i;
  return std::nullopt;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.weights.size() + p.bias.size();
  return n;
}

void Network::resize_dense(std::size_t index, std::size_t outputs) {
  auto& l = layers_.at(index);
  if (l.kind != LayerKind::Dense) throw UnsupportedArchitecture("layer " + std::to_string(index) + " is not Dense");
  for (std::size_t i = index + 1; i < layers_.size(); ++i) {
    if (layers_[i].kind != LayerKind::Softmax && layers_[i].kind != LayerKind::ReLU) {
      throw UnsupportedArchitecture("only Softmax/ReLU may follow a resized Dense layer");
    }
  }
  l.units = outputs;
  infer_shapes();
  params_[index].weights = Tensor({layer_input_shape(index)[0], outputs});
  params_[index].bias = Tensor({outputs});
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

Shape batched(std::size_t n, const Shape& sample) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

void check_batch(const Network& net, const Tensor& batch, std::size_t first_layer) {
  const Shape& expected = net.layer_input_shape(first_layer);
  if (batch.rank() != expected.size() + 1 || batch.sample_shape() != expected) {
    throw ShapeError("batch " + shape_str(batch.shape()) + " does not conform to layer " +
                     std::to_string(first_layer) + " input " + shape_str(batched(0, expected)).replace(1, 1, "n"));
  }
}

Tensor apply_layer(const Network& net, std::size_t i, const Tensor& x) {
  const auto& l = net.layer(i);
  const auto& p = net.params(i);
  Tensor y;
  switch (l.kind) {
    case LayerKind::Conv2D: y = ops::conv2d(x, p.weights, l.stride, p.bias); break;
    case LayerKind::MaxPool2D: y = ops::max_pool2d(x, l.kernel_h, l.kernel_w, l.stride); break;
    case LayerKind::Dense: y = ops::dense(x, p.weights, p.bias); break;
    case LayerKind::ReLU: y = ops::relu(x); break;
    case LayerKind::Softmax: y = ops::softmax(x); break;
    case LayerKind::Flatten: y = x.reshaped({x.rows(), x.sample_size()}); break;
  }
  if (!y.all_finite()) {
    throw NumericError("non-finite activation at layer " + std::to_string(i) + " (" +
                           std::string(to_string(l.kind)) + ")",
                       static_cast<int>(i));
  }
  return y;
}

}  // namespace

ActivationTrace forward(const Network& net, const Tensor& batch) {
  check_batch(net, batch, 0);
  ActivationTrace trace;
  trace.outputs.reserve(net.layer_count());
  const Tensor* cur = &batch;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    trace.outputs.push_back(apply_layer(net, i, *cur));
    cur = &trace.outputs.back();
  }
  return trace;
}

Tensor forward_range(const Network& net, const Tensor& input, std::size_t begin, std::size_t end,
                     std::size_t chunk) {
  if (begin > end || end > net.layer_count()) throw ShapeError("forward_range outside the network");
  if (begin == end) return input;
  check_batch(net, input, begin);
  chunk = std::max<std::size_t>(chunk, 1);
  Tensor result;
  for (std::size_t r = 0; r < input.rows(); r += chunk) {
    Tensor cur = input.rows(r, std::min(input.rows(), r + chunk));
    for (std::size_t i = begin; i < end; ++i) cur = apply_layer(net, i, cur);
    result = Tensor::concat(result, cur);
  }
  if (input.rows() == 0) return Tensor(batched(0, net.output_shape(end - 1)));
  return result;
}

Tensor predict(const Network& net, const Tensor& batch, std::size_t chunk) {
  return forward_range(net, batch, 0, net.layer_count(), chunk);
}

double loss_value(const Tensor& output, const Tensor& targets, LossKind kind) {
  if (output.shape() != targets.shape()) {
    throw ShapeError("loss: output " + shape_str(output.shape()) + " vs targets " + shape_str(targets.shape()));
  }
  double sum = 0.0;
  if (kind == LossKind::MSE) {
    for (std::size_t i = 0; i < output.size(); ++i) {
      const double d = static_cast<double>(output[i]) - targets[i];
      sum += d * d;
    }
    return output.size() ? sum / static_cast<double>(output.size()) : 0.0;
  }
  for (std::size_t i = 0; i < output.size(); ++i) {
    if (targets[i] != 0.0f) sum -= targets[i] * std::log(std::max(static_cast<double>(output[i]), 1e-12));
  }
  return output.rows() ? sum / static_cast<double>(output.rows()) : 0.0;
}

Gradients backward(const Network& net, const Tensor& batch, const Tensor& targets, LossKind kind,
                   const BackwardOptions& options) {
  if (net.layer_count() == 0) throw ShapeError("backward on an empty network");
  const auto trace = forward(net, batch);
  const Tensor& out = trace.final_output();
  if (targets.shape() != out.shape()) {
    throw ShapeError("targets " + shape_str(targets.shape()) + " do not match network output " +
                     shape_str(out.shape()));
  }
  const std::size_t last = net.layer_count() - 1;
  const bool fused_softmax = kind == LossKind::CrossEntropy;
  if (fused_softmax && net.layer(last).kind != LayerKind::Softmax) {
    throw UnsupportedArchitecture("cross-entropy loss requires a final Softmax layer");
  }

  Gradients g;
  g.layers.resize(net.layer_count());
  g.loss = loss_value(out, targets, kind);
  if (!std::isfinite(g.loss)) throw NumericError("non-finite loss", static_cast<int>(last));

  const auto needs_params = [&](std::size_t i) {
    return net.layer(i).has_params() && (options.include_frozen || !net.layer(i).frozen);
  };
  std::size_t lowest = net.layer_count();
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    if (needs_params(i)) {
      lowest = i;
      break;
    }
  }
  if (options.input_gradient) lowest = 0;
  if (lowest == net.layer_count()) return g;  // everything frozen

  // Gradient w.r.t. the output of layer `i` while walking down.
  Tensor grad(out.shape());
  std::size_t i = last;
  if (fused_softmax) {
    // d/dz of -sum t log softmax(z), averaged over rows
    const std::size_t width = out.shape().back();
    const std::size_t rows = out.size() / width;
    const float inv_n = 1.0f / static_cast<float>(batch.rows());
    for (std::size_t r = 0; r < rows; ++r) {
      float tsum = 0.0f;
      for (std::size_t c = 0; c < width; ++c) tsum += targets[r * width + c];
      for (std::size_t c = 0; c < width; ++c) {
        const std::size_t k = r * width + c;
        grad[k] = (out[k] * tsum - targets[k]) * inv_n;
      }
    }
    if (last == 0) {
      if (options.input_gradient) g.input = std::move(grad);
      return g;
    }
    i = last - 1;  // grad is now w.r.t. the Softmax input, i.e. output of layer last-1
  } else {
    const float scale = 2.0f / static_cast<float>(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) grad[k] = (out[k] - targets[k]) * scale;
  }

  for (;; --i) {
    const auto& l = net.layer(i);
    const Tensor& x = i == 0 ? batch : trace.outputs[i - 1];
    const bool want_input = i > lowest;
    const bool want_params = needs_params(i);
    Tensor gin;
    switch (l.kind) {
      case LayerKind::Conv2D: {
        auto cg = ops::conv2d_backward(x, net.params(i).weights, l.stride, grad, want_input || (i == 0 && options.input_gradient), want_params);
        if (want_params) g.layers[i] = {std::move(cg.kernels), std::move(cg.bias)};
        gin = std::move(cg.input);
        break;
      }
      case LayerKind::Dense: {
        auto dg = ops::dense_backward(x, net.params(i).weights, grad, want_input || (i == 0 && options.input_gradient), want_params);
        if (want_params) g.layers[i] = {std::move(dg.weights), std::move(dg.bias)};
        gin = std::move(dg.input);
        break;
      }
      case LayerKind::MaxPool2D: gin = ops::max_pool2d_backward(x, l.kernel_h, l.kernel_w, l.stride, grad); break;
      case LayerKind::ReLU: gin = ops::relu_backward(x, grad); break;
      case LayerKind::Softmax: gin = ops::softmax_backward(trace.outputs[i], grad); break;
      case LayerKind::Flatten: gin = grad.reshaped(x.shape()); break;
    }
    if (want_params && !(g.layers[i].weights.all_finite() && g.layers[i].bias.all_finite())) {
      throw NumericError("non-finite gradient at layer " + std::to_string(i), static_cast<int>(i));
    }
    if (!gin.empty() && !gin.all_finite()) {
      throw NumericError("non-finite gradient at layer " + std::to_string(i), static_cast<int>(i));
    }
    if (i == lowest) {
      if (options.input_gradient) g.input = std::move(gin);
      break;
    }
    grad = std::move(gin);
  }
  return g;
}

void sgd_step(Network& net, const Gradients& grads, const TrainConfig& cfg) {
  if (grads.layers.size() != net.layer_count()) {
    throw ShapeError("gradients for " + std::to_string(grads.layers.size()) + " layers applied to a " +
                     std::to_string(net.layer_count()) + "-layer network");
  }
  const auto lr = static_cast<float>(cfg.learning_rate);
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const auto& l = net.layer(i);
    if (!l.has_params() || l.frozen) continue;
    auto& p = net.params(i);
    const auto& gp = grads.layers[i];
    if (gp.weights.shape() != p.weights.shape() || gp.bias.shape() != p.bias.shape()) {
      throw ShapeError("gradient shape " + shape_str(gp.weights.shape()) + " does not match parameter " +
                       shape_str(p.weights.shape()) + " at layer " + std::to_string(i));
    }
    for (std::size_t k = 0; k < p.weights.size(); ++k) p.weights[k] -= lr * gp.weights[k];
    for (std::size_t k = 0; k < p.bias.size(); ++k) p.bias[k] -= lr * gp.bias[k];
  }
}

void replace_head(Network& net, std::size_t num_outputs, std::uint64_t seed) {
  const auto head = net.last_dense();
  if (!head) throw UnsupportedArchitecture("network has no Dense output block");
  for (std::size_t i = *head + 1; i < net.layer_count(); ++i) {
    if (net.layer(i).kind != LayerKind::Softmax) {
      throw UnsupportedArchitecture("final Dense layer is followed by " + std::string(to_string(net.layer(i).kind)));
    }
  }
  if (num_outputs == 0) throw ShapeError("head width must be >= 1");
  net.resize_dense(*head, num_outputs);
  net.initialize_layer(*head, seed);
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ShapeError("label " + std::to_string(labels[i]) + " outside " + std::to_string(classes) + " classes");
    }
    t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0f;
  }
  return t;
}

std::vector<int> argmax_rows(const Tensor& output) {
  const std::size_t width = output.sample_size();
  std::vector<int> out(output.rows());
  for (std::size_t r = 0; r < out.size(); ++r) {
    const float* p = output.data() + r * width;
    out[r] = static_cast<int>(std::max_element(p, p + width) - p);
  }
  return out;
}

double accuracy(const Network& net, const Tensor& inputs, std::span<const int> labels) {
  if (labels.size() != inputs.rows()) throw ShapeError("label count does not match batch size");
  if (labels.empty()) throw DataError("accuracy over an empty set");
  const auto pred = argmax_rows(predict(net, inputs));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

FitReport fit(Network& net, const Tensor& inputs, const Tensor& targets, LossKind kind, const TrainConfig& cfg,
              const EpochOrder& order) {
  cfg.validate();
  if (inputs.rows() != targets.rows()) throw ShapeError("inputs and targets differ in sample count");
  if (inputs.rows() == 0) throw DataError("cannot fit on an empty set");
  FitReport report;
  const std::size_t n = inputs.rows();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> idx;
    if (order) {
      idx = order(epoch, n);
    } else {
      idx.resize(n);
      std::iota(idx.begin(), idx.end(), 0);
      Rng rng(mix_seed({cfg.seed, epoch}));
      rng.shuffle(std::span(idx));
    }
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < idx.size(); b += cfg.batch_size) {
      const std::span<const std::size_t> part(idx.data() + b, std::min(cfg.batch_size, idx.size() - b));
      const auto grads = backward(net, inputs.gather(part), targets.gather(part), kind);
      sgd_step(net, grads, cfg);
      total += grads.loss;
      ++batches;
    }
    report.epoch_loss.push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  return report;
}

}  // namespace cnl
