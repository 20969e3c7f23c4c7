#pragma once

#include <utility>
#include <vector>

#include "hitsr/tensor.hpp"

namespace hitsr {

// Per-layer window sizes: layer i uses (ratio[i]*base_h, ratio[i]*base_w).
// Every product must land on a positive integer.
struct WindowSchedule {
    int base_h = 8;
    int base_w = 8;
    std::vector<double> ratios;
    std::vector<std::pair<int, int>> layer_windows;

    static WindowSchedule from_ratios(int base_h, int base_w, const std::vector<double>& ratios);

    int max_h() const;
    int max_w() const;
};

struct PadRecord {
    int orig_h = 0;
    int orig_w = 0;
    int padded_h = 0;
    int padded_w = 0;
    bool padded() const { return orig_h != padded_h || orig_w != padded_w; }
};

// Reflection-pad [C,H,W] on the bottom/right until both sides divide h and w.
std::pair<Tensor, PadRecord> pad_to_multiple(const Tensor& x, int h, int w);

// Undo pad_to_multiple exactly.
Tensor crop_to(const Tensor& x, const PadRecord& rec);

// [C,H,W] -> [N, h*w, C]: N non-overlapping windows in raster order, each
// flattened row-major with channels moved last.
Tensor partition(const Tensor& x, int h, int w);

// Exact inverse of partition. The 3-argument form infers the window
// rectangle, preferring the most square factorization of the token count.
Tensor merge(const Tensor& windows, int H, int W);
Tensor merge(const Tensor& windows, int H, int W, int h, int w);

// [C,H,W] <-> [H*W,C] token layout converters.
Tensor tokens_from_planar(const Tensor& x);
Tensor planar_from_tokens(const Tensor& x, int H, int W);

} // namespace hitsr
