#pragma once

#include <cstddef>

#include "cactusnet/tensor.hpp"

// Batched layer kernels. Image tensors are NHWC; a rank-3 [h,w,c] input is
// treated as a batch of one and returned without the batch axis.
namespace cnl::ops {

// Valid (unpadded) convolution. kernels: [kh,kw,c_in,c_out]; bias may be empty.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, const Tensor& bias = {});

struct ConvGrads {
  Tensor input;
  Tensor kernels;
  Tensor bias;
};
// Any of the outputs can be skipped; grad_input is only computed on request.
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernels, std::size_t stride, const Tensor& grad_out,
                          bool want_input, bool want_params);

Tensor max_pool2d(const Tensor& input, std::size_t kh, std::size_t kw, std::size_t stride);
Tensor max_pool2d_backward(const Tensor& input, std::size_t kh, std::size_t kw, std::size_t stride,
                           const Tensor& grad_out);

// input [n,in], weights [in,out], bias [out]
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);
struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};
DenseGrads dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out, bool want_input,
                          bool want_params);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

// Softmax over the last axis.
Tensor softmax(const Tensor& input);
Tensor softmax_backward(const Tensor& output, const Tensor& grad_out);

}  // namespace cnl::ops
