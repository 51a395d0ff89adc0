#pragma once

// Double-precision direct-loop reference implementations used as test oracles.
// Nothing here calls into the library's kernels; it only reads the network's
// layer specs and parameter values.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cactusnet/nn.hpp"

namespace ref {

using Vec = std::vector<double>;

inline Vec to_vec(const cnl::Tensor& t) { return Vec(t.values().begin(), t.values().end()); }
inline std::vector<float> to_fvec(const cnl::Tensor& t) { return {t.values().begin(), t.values().end()}; }

// input [h,w,ci], kernels [kh,kw,ci,co] -> [oh,ow,co]; quadruple loop per output element
template <typename T>
std::vector<T> conv2d(const std::vector<T>& x, std::size_t h, std::size_t w, std::size_t ci, const std::vector<T>& k,
                      std::size_t kh, std::size_t kw, std::size_t co, std::size_t stride,
                      const std::vector<T>& bias, std::size_t& oh, std::size_t& ow) {
  oh = (h - kh) / stride + 1;
  ow = (w - kw) / stride + 1;
  std::vector<T> y(oh * ow * co, T(0));
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t o = 0; o < co; ++o) {
        T s = bias.empty() ? T(0) : bias[o];
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx)
            for (std::size_t c = 0; c < ci; ++c)
              s += x[((oy * stride + ky) * w + ox * stride + kx) * ci + c] * k[((ky * kw + kx) * ci + c) * co + o];
        y[(oy * ow + ox) * co + o] = s;
      }
  return y;
}

// Mirror of a cnl::Network in doubles, with parameters exposed for perturbation.
struct RefNet {
  cnl::Shape input_shape;
  std::vector<cnl::LayerSpec> layers;
  std::vector<Vec> weights, biases;

  explicit RefNet(const cnl::Network& net) : input_shape(net.input_shape()), layers(net.layers()) {
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
      weights.push_back(to_vec(net.params(i).weights));
      biases.push_back(to_vec(net.params(i).bias));
    }
  }

  // Forward for one sample; shape tracked alongside.
  Vec forward_sample(Vec x) const {
    cnl::Shape s = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      switch (l.kind) {
        case cnl::LayerKind::Conv2D: {
          std::size_t oh, ow;
          x = conv2d(x, s[0], s[1], s[2], weights[i], l.kernel_h, l.kernel_w, l.units, l.stride, biases[i], oh, ow);
          s = {oh, ow, l.units};
          break;
        }
        case cnl::LayerKind::MaxPool2D: {
          const std::size_t oh = (s[0] - l.kernel_h) / l.stride + 1, ow = (s[1] - l.kernel_w) / l.stride + 1;
          Vec y(oh * ow * s[2], -std::numeric_limits<double>::infinity());
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
              for (std::size_t c = 0; c < s[2]; ++c)
                for (std::size_t ky = 0; ky < l.kernel_h; ++ky)
                  for (std::size_t kx = 0; kx < l.kernel_w; ++kx) {
                    auto& o = y[(oy * ow + ox) * s[2] + c];
                    o = std::max(o, x[((oy * l.stride + ky) * s[1] + ox * l.stride + kx) * s[2] + c]);
                  }
          x = std::move(y);
          s = {oh, ow, s[2]};
          break;
        }
        case cnl::LayerKind::Dense: {
          const std::size_t ni = s[0], no = l.units;
          Vec y(no);
          for (std::size_t o = 0; o < no; ++o) {
            double acc = biases[i][o];
            for (std::size_t k = 0; k < ni; ++k) acc += x[k] * weights[i][k * no + o];
            y[o] = acc;
          }
          x = std::move(y);
          s = {no};
          break;
        }
        case cnl::LayerKind::ReLU:
          for (auto& v : x) v = v > 0 ? v : 0;
          break;
        case cnl::LayerKind::Softmax: {
          const std::size_t width = s.back();
          for (std::size_t r = 0; r < x.size() / width; ++r) {
            double m = -std::numeric_limits<double>::infinity(), z = 0;
            for (std::size_t c = 0; c < width; ++c) m = std::max(m, x[r * width + c]);
            for (std::size_t c = 0; c < width; ++c) z += std::exp(x[r * width + c] - m);
            for (std::size_t c = 0; c < width; ++c) x[r * width + c] = std::exp(x[r * width + c] - m) / z;
          }
          break;
        }
        case cnl::LayerKind::Flatten:
          s = {x.size()};
          break;
      }
    }
    return x;
  }

  // Batch loss with the same conventions as cnl::loss_value.
  double loss(const Vec& batch, std::size_t n, const Vec& targets, cnl::LossKind kind) const {
    const std::size_t in = batch.size() / n;
    double total = 0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const Vec y = forward_sample(Vec(batch.begin() + r * in, batch.begin() + (r + 1) * in));
      for (std::size_t c = 0; c < y.size(); ++c) {
        const double t = targets[r * y.size() + c];
        if (kind == cnl::LossKind::MSE) {
          total += (y[c] - t) * (y[c] - t);
        } else if (t != 0) {
          total -= t * std::log(std::max(y[c], 1e-12));
        }
        ++count;
      }
    }
    return kind == cnl::LossKind::MSE ? total / count : total / n;
  }
};

}  // namespace ref
