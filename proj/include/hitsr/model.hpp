#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hitsr/scc.hpp"
#include "hitsr/tensor.hpp"
#include "hitsr/windowing.hpp"

namespace hitsr {

struct ModelConfig {
    int channels = 60;
    int blocks = 4;
    int layers_per_block = 6;
    int heads_s = 6;
    int base_window_h = 8;
    int base_window_w = 8;
    std::vector<double> ratios = {0.5, 1, 2, 4, 6, 8};
    int upscale = 2;
    int dfe_reduction = 4;
    int ffn_ratio = 2;
    int bias_hidden = 16;
    bool per_head_denominator = false;

    void validate() const; // throws ConfigError
};

// Shallow conv -> transformer blocks (layers on the hierarchical window
// schedule + conv, block residual) -> global residual -> conv + pixel
// shuffle reconstruction.
struct HitNetwork {
    ModelConfig config;
    WindowSchedule schedule;

    Tensor shallow_w, shallow_b; // 3 -> C, 3x3

    struct Block {
        std::vector<SccLayerParams> layers;
        Tensor conv_w, conv_b; // C -> C, 3x3
    };
    std::vector<Block> blocks;

    Tensor recon_w, recon_b; // C -> 3*s^2, 3x3

    // Stable construction-order enumeration of every parameter tensor.
    std::vector<std::pair<std::string, Tensor>> parameters() const;
    std::int64_t param_count() const;
    void zero_grad() const;
};

// Deterministic initialization from the seed: truncated normal (sigma 0.02,
// cut at 2 sigma) for projections and convolutions, identity or uniform
// average for the spatial summarizers, zeros for biases.
HitNetwork build(const ModelConfig& cfg, std::uint64_t seed);

// [3,H,W] in [0,1] -> [3, s*H, s*W]. Pads once to the schedule's largest
// window, crops at the end.
Tensor forward(const HitNetwork& net, const Tensor& img);

// Flat little-endian container: magic, JSON header (config + named shapes),
// then all parameter values as f64 in enumeration order.
void save_checkpoint(const HitNetwork& net, const std::string& path);
HitNetwork load_checkpoint(const std::string& path);

} // namespace hitsr
