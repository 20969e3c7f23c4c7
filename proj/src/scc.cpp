#include "hitsr/scc.hpp"

#include <string>
#include <vector>

#include "hitsr/ops.hpp"
#include "hitsr/windowing.hpp"

namespace hitsr {

std::pair<Tensor, Tensor> dfe_forward(const Tensor& x, const DfeParams& p, int H, int W) {
    if (x.rank() != 2) throw ShapeError("dfe_forward: expected [HW,C], got " + shape_str(x.shape()));
    const int C = x.dim(1);
    if (C % 2 != 0) {
        throw ConfigError("dfe_forward: channel count " + std::to_string(C) +
                          " must be even for the Q/V split");
    }
    if (x.dim(0) != H * W) {
        throw ShapeError("dfe_forward: " + std::to_string(x.dim(0)) + " tokens do not match geometry " +
                         std::to_string(H) + "x" + std::to_string(W));
    }
    Tensor x_ch = linear(x, p.linear_w, p.linear_b);

    Tensor planar = planar_from_tokens(x, H, W);
    Tensor c1 = gelu(conv2d(planar, p.conv1_w, p.conv1_b));
    Tensor c2 = gelu(conv2d(c1, p.conv2_w, p.conv2_b));
    Tensor c3 = conv2d(c2, p.conv3_w, p.conv3_b);
    Tensor x_sp = tokens_from_planar(c3);

    Tensor fused = mul(x_ch, x_sp);
    std::vector<Tensor> qv = split(fused, 1, 2);
    return {qv[0], qv[1]};
}

Tensor s_linear_downsample(const Tensor& v, const Tensor& w) {
    if (v.rank() != 3 || w.rank() != 2 || w.dim(1) != v.dim(1)) {
        throw ShapeError("s_linear_downsample: weight " + shape_str(w.shape()) +
                         " does not act on windows " + shape_str(v.shape()));
    }
    return matmul(w, v);
}

Tensor spatial_correlation(const Tensor& q, const Tensor& v_down, const Tensor& bias, double denom) {
    if (q.rank() != 3 || v_down.rank() != 3 || q.dim(0) != v_down.dim(0) || q.dim(2) != v_down.dim(2)) {
        throw ShapeError("spatial_correlation: queries " + shape_str(q.shape()) +
                         " vs values " + shape_str(v_down.shape()));
    }
    if (bias.rank() != 3 || bias.dim(1) != q.dim(1) || bias.dim(2) != v_down.dim(1)) {
        throw ShapeError("spatial_correlation: bias " + shape_str(bias.shape()) +
                         " does not match token geometry");
    }
    const int heads = bias.dim(0);
    const int channels = q.dim(2);
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError("spatial_correlation: " + std::to_string(channels) +
                          " channels not divisible into " + std::to_string(heads) + " heads");
    }
    const int hw = q.dim(1);
    const int down_hw = v_down.dim(1);
    std::vector<Tensor> q_heads = split(q, 2, heads);
    std::vector<Tensor> v_heads = split(v_down, 2, heads);
    std::vector<Tensor> b_heads = split(bias, 0, heads);
    std::vector<Tensor> out_heads;
    out_heads.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor corr = scale(matmul(q_heads[static_cast<size_t>(h)], transpose(v_heads[static_cast<size_t>(h)])),
                            1.0 / denom);
        corr = add_batch_bias(corr, reshape(b_heads[static_cast<size_t>(h)], {hw, down_hw}));
        out_heads.push_back(matmul(corr, v_heads[static_cast<size_t>(h)]));
    }
    return concat(out_heads, 2);
}

Tensor channel_correlation(const Tensor& q, const Tensor& v, double denom) {
    if (q.rank() != 3 || q.shape() != v.shape()) {
        throw ShapeError("channel_correlation: queries " + shape_str(q.shape()) + " vs values " +
                         shape_str(v.shape()));
    }
    Tensor corr = scale(matmul(transpose(q), v), 1.0 / denom); // [N, C', C']
    return matmul(v, transpose(corr));                         // ((corr . V^T)^T) token-major
}

Tensor position_bias(int win_h, int win_w, int down_h, int down_w, const BiasMlp& mlp) {
    if (win_h < 1 || win_w < 1 || down_h < 1 || down_w < 1) {
        throw ShapeError("position_bias: geometries must be positive");
    }
    const int hw = win_h * win_w;
    const int down_hw = down_h * down_w;
    const int heads = mlp.w2.dim(1);
    // Value cells tile the window uniformly; offsets between query pixel
    // centers and value cell centers, in half-window units.
    const double cell_h = static_cast<double>(win_h) / down_h;
    const double cell_w = static_cast<double>(win_w) / down_w;
    std::vector<double> coords(static_cast<size_t>(hw) * down_hw * 2);
    size_t idx = 0;
    for (int qr = 0; qr < win_h; ++qr)
        for (int qc = 0; qc < win_w; ++qc)
            for (int vr = 0; vr < down_h; ++vr)
                for (int vc = 0; vc < down_w; ++vc) {
                    const double dy = (qr + 0.5) - (vr + 0.5) * cell_h;
                    const double dx = (qc + 0.5) - (vc + 0.5) * cell_w;
                    coords[idx++] = dy / (win_h / 2.0);
                    coords[idx++] = dx / (win_w / 2.0);
                }
    Tensor rel = Tensor::from({hw * down_hw, 2}, std::move(coords));
    Tensor hidden = gelu(linear(rel, mlp.w1, mlp.b1));
    Tensor per_pair = linear(hidden, mlp.w2, mlp.b2); // [hw*down_hw, heads]
    return reshape(transpose(per_pair), {heads, hw, down_hw});
}

Tensor layer_forward(const Tensor& x, const SccLayerParams& p, int H, int W) {
    if (x.rank() != 2) throw ShapeError("layer_forward: expected [HW,C], got " + shape_str(x.shape()));
    const int C = x.dim(1);
    if (H % p.win_h != 0 || W % p.win_w != 0) {
        throw ShapeError("layer_forward: geometry " + std::to_string(H) + "x" + std::to_string(W) +
                         " not padded to windows " + std::to_string(p.win_h) + "x" +
                         std::to_string(p.win_w));
    }

    Tensor normed = layer_norm(x, p.ln1_g, p.ln1_b);
    auto [q_tokens, v_tokens] = dfe_forward(normed, p.dfe, H, W);

    Tensor q = partition(planar_from_tokens(q_tokens, H, W), p.win_h, p.win_w);
    Tensor v = partition(planar_from_tokens(v_tokens, H, W), p.win_h, p.win_w);

    Tensor v_down = s_linear_downsample(v, p.s_linear_w);
    Tensor bias = position_bias(p.win_h, p.win_w, p.down_h, p.down_w, p.bias_mlp);

    const double half = C / 2.0;
    const double denom_s = p.per_head_denominator ? half / p.heads_s : half;
    Tensor s_out = spatial_correlation(q, v_down, bias, denom_s);
    Tensor c_out = channel_correlation(q, v, static_cast<double>(p.win_h) * p.win_w);

    // The two C/2-wide branches sum; the projection restores the residual width.
    Tensor fused = add(s_out, c_out);
    Tensor tokens = tokens_from_planar(merge(fused, H, W, p.win_h, p.win_w));
    Tensor y = add(x, linear(tokens, p.proj_w, p.proj_b));

    Tensor ffn_in = layer_norm(y, p.ln2_g, p.ln2_b);
    Tensor ffn = linear(gelu(linear(ffn_in, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
    return add(y, ffn);
}

} // namespace hitsr
