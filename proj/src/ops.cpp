#include "cactusnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cactusnet/error.hpp"

namespace cnl::ops {
namespace {

struct ImageDims {
  std::size_t n, h, w, c;
  bool batched;
};

ImageDims image_dims(const Tensor& t, const char* what) {
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
  throw ShapeError(std::string(what) + " expects [h,w,c] or [n,h,w,c], got " + shape_str(t.shape()));
}

Shape image_shape(const ImageDims& d, std::size_t h, std::size_t w, std::size_t c) {
  if (d.batched) return {d.n, h, w, c};
  return {h, w, c};
}

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t stride) { return (in - k) / stride + 1; }

void check_conv(const ImageDims& in, const Tensor& kernels, std::size_t stride, const Tensor& input) {
  if (kernels.rank() != 4 || kernels.dim(2) != in.c || kernels.dim(0) > in.h || kernels.dim(1) > in.w ||
      stride == 0 || kernels.dim(0) == 0 || kernels.dim(1) == 0) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with kernels " +
                     shape_str(kernels.shape()) + " at stride " + std::to_string(stride));
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, const Tensor& bias) {
  const auto in = image_dims(input, "conv2d");
  check_conv(in, kernels, stride, input);
  const std::size_t kh = kernels.dim(0), kw = kernels.dim(1), co = kernels.dim(3);
  if (!bias.empty() && bias.size() != co) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(co) +
                     " filters");
  }
  const std::size_t oh = out_extent(in.h, kh, stride), ow = out_extent(in.w, kw, stride);
  Tensor out(image_shape(in, oh, ow, co));
  const float* x = input.data();
  const float* k = kernels.data();
  float* y = out.data();
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        float* acc = y + ((n * oh + oy) * ow + ox) * co;
        if (!bias.empty()) std::copy_n(bias.data(), co, acc);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const float* px = x + ((n * in.h + oy * stride + ky) * in.w + ox * stride + kx) * in.c;
            const float* kr = k + (ky * kw + kx) * in.c * co;
            for (std::size_t ci = 0; ci < in.c; ++ci) {
              const float v = px[ci];
              const float* kc = kr + ci * co;
              for (std::size_t o = 0; o < co; ++o) acc[o] += v * kc[o];
            }
          }
        }
      }
    }
  }
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernels, std::size_t stride, const Tensor& grad_out,
                          bool want_input, bool want_params) {
  const auto in = image_dims(input, "conv2d_backward");
  check_conv(in, kernels, stride, input);
  const std::size_t kh = kernels.dim(0), kw = kernels.dim(1), co = kernels.dim(3);
  const std::size_t oh = out_extent(in.h, kh, stride), ow = out_extent(in.w, kw, stride);
  if (grad_out.shape() != image_shape(in, oh, ow, co)) {
    throw ShapeError("conv2d_backward: gradient " + shape_str(grad_out.shape()) + " does not match output " +
                     shape_str(image_shape(in, oh, ow, co)));
  }
  ConvGrads g;
  if (want_input) g.input = Tensor(input.shape());
  if (want_params) {
    g.kernels = Tensor(kernels.shape());
    g.bias = Tensor({co});
  }
  const float* x = input.data();
  const float* k = kernels.data();
  const float* dy = grad_out.data();
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const float* d = dy + ((n * oh + oy) * ow + ox) * co;
        if (want_params) {
          float* db = g.bias.data();
          for (std::size_t o = 0; o < co; ++o) db[o] += d[o];
        }
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t off = ((n * in.h + oy * stride + ky) * in.w + ox * stride + kx) * in.c;
            const std::size_t koff = (ky * kw + kx) * in.c * co;
            for (std::size_t ci = 0; ci < in.c; ++ci) {
              if (want_params) {
                const float v = x[off + ci];
                float* dk = g.kernels.data() + koff + ci * co;
                for (std::size_t o = 0; o < co; ++o) dk[o] += v * d[o];
              }
              if (want_input) {
                const float* kc = k + koff + ci * co;
                float s = 0.0f;
                for (std::size_t o = 0; o < co; ++o) s += kc[o] * d[o];
                g.input.data()[off + ci] += s;
              }
            }
          }
        }
      }
    }
  }
  return g;
}

Tensor max_pool2d(const Tensor& input, std::size_t kh, std::size_t kw, std::size_t stride) {
  const auto in = image_dims(input, "max_pool2d");
  if (kh == 0 || kw == 0 || stride == 0 || kh > in.h || kw > in.w) {
    throw ShapeError("max_pool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) + " incompatible with " +
                     shape_str(input.shape()));
  }
  const std::size_t oh = out_extent(in.h, kh, stride), ow = out_extent(in.w, kw, stride);
  Tensor out(image_shape(in, oh, ow, in.c), -std::numeric_limits<float>::infinity());
  const float* x = input.data();
  float* y = out.data();
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        float* o = y + ((n * oh + oy) * ow + ox) * in.c;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const float* p = x + ((n * in.h + oy * stride + ky) * in.w + ox * stride + kx) * in.c;
            for (std::size_t c = 0; c < in.c; ++c) o[c] = std::max(o[c], p[c]);
          }
      }
  return out;
}

Tensor max_pool2d_backward(const Tensor& input, std::size_t kh, std::size_t kw, std::size_t stride,
                           const Tensor& grad_out) {
  const auto in = image_dims(input, "max_pool2d_backward");
  const std::size_t oh = out_extent(in.h, kh, stride), ow = out_extent(in.w, kw, stride);
  if (grad_out.shape() != image_shape(in, oh, ow, in.c)) {
    throw ShapeError("max_pool2d_backward: gradient " + shape_str(grad_out.shape()) + " does not match output");
  }
  Tensor gin(input.shape());
  const float* x = input.data();
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t c = 0; c < in.c; ++c) {
          // first maximum in scan order wins
          std::size_t best = 0;
          float best_v = -std::numeric_limits<float>::infinity();
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::size_t idx = ((n * in.h + oy * stride + ky) * in.w + ox * stride + kx) * in.c + c;
              if (x[idx] > best_v) {
                best_v = x[idx];
                best = idx;
              }
            }
          gin[best] += grad_out[((n * oh + oy) * ow + ox) * in.c + c];
        }
  return gin;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 2 || weights.rank() != 2 || input.dim(1) != weights.dim(0) || bias.size() != weights.dim(1)) {
    throw ShapeError("dense: input " + shape_str(input.shape()) + " incompatible with weights " +
                     shape_str(weights.shape()) + " and bias " + shape_str(bias.shape()));
  }
  const std::size_t n = input.dim(0), ni = weights.dim(0), no = weights.dim(1);
  Tensor out({n, no});
  for (std::size_t r = 0; r < n; ++r) {
    float* y = out.data() + r * no;
    std::copy_n(bias.data(), no, y);
    const float* x = input.data() + r * ni;
    for (std::size_t i = 0; i < ni; ++i) {
      const float v = x[i];
      const float* w = weights.data() + i * no;
      for (std::size_t o = 0; o < no; ++o) y[o] += v * w[o];
    }
  }
  return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out, bool want_input,
                          bool want_params) {
  const std::size_t n = input.dim(0), ni = weights.dim(0), no = weights.dim(1);
  if (grad_out.shape() != Shape{n, no}) {
    throw ShapeError("dense_backward: gradient " + shape_str(grad_out.shape()) + " does not match output");
  }
  DenseGrads g;
  if (want_input) g.input = Tensor(input.shape());
  if (want_params) {
    g.weights = Tensor(weights.shape());
    g.bias = Tensor({no});
  }
  for (std::size_t r = 0; r < n; ++r) {
    const float* d = grad_out.data() + r * no;
    const float* x = input.data() + r * ni;
    if (want_params) {
      for (std::size_t o = 0; o < no; ++o) g.bias[o] += d[o];
      for (std::size_t i = 0; i < ni; ++i) {
        float* dw = g.weights.data() + i * no;
        const float v = x[i];
        for (std::size_t o = 0; o < no; ++o) dw[o] += v * d[o];
      }
    }
    if (want_input) {
      float* dx = g.input.data() + r * ni;
      for (std::size_t i = 0; i < ni; ++i) {
        const float* w = weights.data() + i * no;
        float s = 0.0f;
        for (std::size_t o = 0; o < no; ++o) s += w[o] * d[o];
        dx[i] = s;
      }
    }
  }
  return g;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.values()) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(input[i] > 0.0f)) g[i] = 0.0f;
  return g;
}

Tensor softmax(const Tensor& input) {
  if (input.rank() == 0) throw ShapeError("softmax of a scalar");
  const std::size_t width = input.shape().back();
  const std::size_t rows = input.size() / width;
  Tensor out(input.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = input.data() + r * width;
    float* y = out.data() + r * width;
    const float m = *std::max_element(x, x + width);
    double sum = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      y[i] = std::exp(x[i] - m);
      sum += y[i];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (std::size_t i = 0; i < width; ++i) y[i] *= inv;
  }
  return out;
}

Tensor softmax_backward(const Tensor& output, const Tensor& grad_out) {
  const std::size_t width = output.shape().back();
  const std::size_t rows = output.size() / width;
  Tensor g(output.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* y = output.data() + r * width;
    const float* d = grad_out.data() + r * width;
    float dot = 0.0f;
    for (std::size_t i = 0; i < width; ++i) dot += y[i] * d[i];
    for (std::size_t i = 0; i < width; ++i) g.data()[r * width + i] = y[i] * (d[i] - dot);
  }
  return g;
}

}  // namespace cnl::ops
