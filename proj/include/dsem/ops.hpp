#pragma once

#include <span>
#include <vector>

#include "dsem/tensor.hpp"

namespace dsem {

inline constexpr double kLogEpsilon = 1e-7;

// Output extent of a (dilated) convolution along one axis.
int conv_out_size(int in, int kernel, int stride, int padding, int dilation);

// weight: Cout x Cin x k x k, bias: 1 x Cout x 1 x 1 (or undefined).
// Lowered to im2col + a float64 GEMM.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int padding,
                      int dilation);

// Identity forward; backward multiplies the upstream gradient by -coeff.
template <typename T>
BasicTensor<T> grl(const BasicTensor<T>& input, double coeff);

template <typename T>
BasicTensor<T> adaptive_avg_pool(const BasicTensor<T>& input, int bins);

template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& input, int out_h,
                                int out_w);

template <typename T>
BasicTensor<T> elementwise_mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor);

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>> inputs);

// Concatenates along the height axis; N, C and W must agree.
template <typename T>
BasicTensor<T> concat_rows(std::span<const BasicTensor<T>> inputs);

// Rearranges a head map N x (A*D) x H x W into N x D x (H*W*A) x 1 so that
// row r corresponds to anchor (cell = r / A, slot = r % A), cells row-major.
template <typename T>
BasicTensor<T> anchor_major(const BasicTensor<T>& head, int anchors_per_cell);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& x);

// Sum of all elements as a 1x1x1x1 tensor.
template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x);

// Per-location softmax cross-entropy over the channel axis.
// targets has one class index per (n, h, w); weights (same length, may be
// empty meaning all ones) selects/weights locations. Result is
// sum(weight * ce) / normalizer.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const int> targets,
                                     std::span<const T> weights,
                                     double normalizer);

// Mean over all elements of the clamped binary cross-entropy against a
// single label in [0, 1].
template <typename T>
BasicTensor<T> binary_cross_entropy(const BasicTensor<T>& prob, double label);
// Same loss taken on pre-sigmoid logits, log(1 + e^z) - label * z, without
// clamping, so the gradient stays sigmoid(z) - label when saturated.
template <typename T>
BasicTensor<T> binary_cross_entropy_with_logits(const BasicTensor<T>& logits, double label);

// sum over selected locations and all channels of smooth-L1(pred - target),
// divided by normalizer. mask has one entry per (n, h, w).
template <typename T>
BasicTensor<T> smooth_l1(const BasicTensor<T>& pred, std::span<const T> target,
                         std::span<const unsigned char> mask,
                         double normalizer);

}  // namespace dsem
