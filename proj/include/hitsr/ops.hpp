#pragma once

#include <vector>

#include "hitsr/tensor.hpp"

namespace hitsr {

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// x * factor (softmax-free scaling; correlation maps stay linear in x).
Tensor scale(const Tensor& x, double factor);

// x: [N, ...rest], bias: [...rest]; bias added to every batch entry.
Tensor add_batch_bias(const Tensor& x, const Tensor& bias);

// Batched matrix product. Ranks 2 and 3 mix freely: a [B,M,K] with b [K,P],
// a [M,K] with b [B,K,P], or matching batch dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);

// Swap the last two axes (batched).
Tensor transpose(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

// Equal split along `axis` into `parts` chunks; concat is its inverse.
std::vector<Tensor> split(const Tensor& x, int axis, int parts);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor gelu(const Tensor& x);

// x: [..., in], w: [in, out], b: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// x: [C_in,H,W], w: [C_out,C_in,k,k], k odd, zero 'same' padding, stride 1,
// cross-correlation convention. b: [C_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);

// Normalization over the last axis with population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// [C*s^2,H,W] -> [C,sH,sW] sub-pixel rearrangement.
Tensor pixel_shuffle(const Tensor& x, int s);

// Inverse of pixel_shuffle: [C,sH,sW] -> [C*s^2,H,W].
Tensor pixel_unshuffle(const Tensor& x, int s);

// Extend [C,H,W] to [C,new_h,new_w] (bottom/right) by reflection; the
// reflection repeats ping-pong fashion so any target size is reachable.
Tensor pad_reflect(const Tensor& x, int new_h, int new_w);

// Top-left crop of [C,H,W] to [C,h,w].
Tensor crop2d(const Tensor& x, int h, int w);

Tensor sum_all(const Tensor& x);

// mean |a - b| over all elements (L1 loss).
Tensor mean_abs_diff(const Tensor& a, const Tensor& b);

} // namespace hitsr
