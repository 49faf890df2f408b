#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "wcnn/tensor.hpp"

/// Raw forward/backward kernels over NCHW tensors. No tape involvement;
/// the autodiff layer wires these together.
namespace wcnn::kernels {

/// Output dims of a correlation-style convolution:
/// floor((h + 2*padding - kh) / stride) + 1.
Shape conv2d_output_shape(Shape x, Shape weight, int stride, int padding);

/// weight is (out_c, in_c, kh, kw); bias, when given, is (1, out_c, 1, 1).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride, int padding);

struct ConvGrads {
  Tensor x;
  Tensor weight;
  Tensor bias;
};

ConvGrads conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                          int stride, int padding, bool need_x, bool need_weight,
                          bool need_bias);

/// Output dims of the adjoint of conv2d: (h - 1)*stride - 2*padding + kh.
Shape conv_transpose2d_output_shape(Shape x, Shape weight, int stride, int padding);

/// Adjoint of conv2d with the same weight. weight is (x.c, out_c, kh, kw)
/// and bias, when given, is (1, out_c, 1, 1).
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride,
                        int padding);

ConvGrads conv_transpose2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                                    int stride, int padding, bool need_x, bool need_weight,
                                    bool need_bias);

/// Bilinear resize with half-pixel centers (no corner alignment); source
/// coordinates below zero clamp to the first row/column.
Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
Tensor resize_bilinear_backward(const Tensor& grad_out, Shape input_shape);

struct MaxPoolResult {
  Tensor out;
  std::vector<std::int64_t> argmax;  // flat input index per output element
};
MaxPoolResult max_pool2x2(const Tensor& x);
Tensor max_pool2x2_backward(const Tensor& grad_out, std::span<const std::int64_t> argmax,
                            Shape input_shape);

Tensor avg_pool2x2(const Tensor& x);

struct BatchNormCache {
  Tensor xhat;
  std::vector<double> inv_std;
};

/// Normalizes with batch statistics. Writes per-channel batch mean and
/// unbiased variance to the out-vectors for running-statistic updates.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        BatchNormCache& cache, std::vector<double>& batch_mean,
                        std::vector<double>& batch_var_unbiased);
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const Tensor& running_mean, const Tensor& running_var, double eps);

struct BatchNormGrads {
  Tensor x;
  Tensor gamma;
  Tensor beta;
};
BatchNormGrads batch_norm_backward(const Tensor& grad_out, const BatchNormCache& cache,
                                   const Tensor& gamma);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);

Tensor softmax_channels(const Tensor& x);
Tensor softmax_channels_backward(const Tensor& grad_out, const Tensor& y);

Tensor concat_channels(std::span<const Tensor> parts);
/// Channel slice [begin, begin + count).
Tensor slice_channels(const Tensor& x, std::int64_t begin, std::int64_t count);

Tensor add(const Tensor& a, const Tensor& b);

}  // namespace wcnn::kernels
