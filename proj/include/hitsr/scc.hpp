#pragma once

#include <utility>

#include "hitsr/tensor.hpp"

namespace hitsr {

// Dual feature extraction: a linear branch for channel features and a
// channel-hourglass convolutional branch (C -> C/r -> C/r -> C, 3x3 kernels,
// GELU between convolutions) for spatial features, combined elementwise.
struct DfeParams {
    Tensor linear_w; // [C, C]
    Tensor linear_b; // [C]
    Tensor conv1_w;  // [C/r, C, 3, 3]
    Tensor conv1_b;
    Tensor conv2_w;  // [C/r, C/r, 3, 3]
    Tensor conv2_b;
    Tensor conv3_w;  // [C, C/r, 3, 3]
    Tensor conv3_b;
    int reduction = 4;
};

// Two-layer map from normalized relative (dy,dx) offsets to one bias scalar
// per correlation head.
struct BiasMlp {
    Tensor w1; // [2, hidden]
    Tensor b1; // [hidden]
    Tensor w2; // [hidden, heads]
    Tensor b2; // [heads]
};

struct SccLayerParams {
    DfeParams dfe;
    Tensor s_linear_w; // [down_h*down_w, win_h*win_w], applied per window per channel
    BiasMlp bias_mlp;
    Tensor proj_w; // [C/2, C], restores the residual width after the Q/V split
    Tensor proj_b; // [C]
    Tensor ffn_w1; // [C, ffn_ratio*C]
    Tensor ffn_b1;
    Tensor ffn_w2; // [ffn_ratio*C, C]
    Tensor ffn_b2;
    Tensor ln1_g, ln1_b;
    Tensor ln2_g, ln2_b;
    int win_h = 8, win_w = 8;
    int down_h = 8, down_w = 8; // equals window below the base size, base size above
    int heads_s = 6;            // spatial correlation heads; channel correlation is single-head
    bool per_head_denominator = false; // off: D = C/2 for every head
};

// [HW,C] -> (Q,V), each [HW,C/2]: elementwise product of the two branches,
// split into halves along channels.
std::pair<Tensor, Tensor> dfe_forward(const Tensor& x, const DfeParams& p, int H, int W);

// V [N, hw, C'] summarized on the spatial axis: out[n] = w . V[n].
Tensor s_linear_downsample(const Tensor& v, const Tensor& w);

// Spatial self-correlation (Q.Vd^T / denom + bias) . Vd per head, heads
// split along channels and concatenated back; no softmax anywhere.
// bias: [heads, hw, down_hw], broadcast over windows.
Tensor spatial_correlation(const Tensor& q, const Tensor& v_down, const Tensor& bias, double denom);

// Channel self-correlation ((Q^T.V / denom) . V^T)^T per window, full
// channel interaction (single head), token-major result.
Tensor channel_correlation(const Tensor& q, const Tensor& v, double denom);

// Per-head bias from relative geometry: each value cell of the down_h x
// down_w grid is mapped uniformly onto the window, offsets between query
// pixel centers and value cell centers are scaled by half the window size
// and fed through the two-layer map. Result: [heads, hw, down_hw].
Tensor position_bias(int win_h, int win_w, int down_h, int down_w, const BiasMlp& mlp);

// Full pre-norm transformer layer on a token map of geometry H x W:
//   y   = x + proj(SCC(LN(x)))     SCC = DFE -> window split -> S-SC + C-SC
//   out = y + FFN(LN(y))
Tensor layer_forward(const Tensor& x, const SccLayerParams& p, int H, int W);

} // namespace hitsr
