#include "hitsr/windowing.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hitsr/ops.hpp"

namespace hitsr {

namespace {

// ratio*base must be integral; tolerate only float noise around the integer.
int integral_product(double ratio, int base, const char* side) {
    const double product = ratio * base;
    const double rounded = std::round(product);
    if (ratio <= 0.0 || rounded < 1.0 || std::abs(product - rounded) > 1e-9) {
        throw ConfigError("window ratio " + std::to_string(ratio) + " * base " +
                          std::to_string(base) + " (" + side + ") is not a positive integer");
    }
    return static_cast<int>(rounded);
}

} // namespace

WindowSchedule WindowSchedule::from_ratios(int base_h, int base_w, const std::vector<double>& ratios) {
    if (base_h < 1 || base_w < 1) throw ConfigError("base window must be at least 1x1");
    if (ratios.empty()) throw ConfigError("window schedule needs at least one ratio");
    WindowSchedule s;
    s.base_h = base_h;
    s.base_w = base_w;
    s.ratios = ratios;
    s.layer_windows.reserve(ratios.size());
    for (double r : ratios) {
        s.layer_windows.emplace_back(integral_product(r, base_h, "height"),
                                     integral_product(r, base_w, "width"));
    }
    return s;
}

int WindowSchedule::max_h() const {
    int m = 1;
    for (const auto& [h, w] : layer_windows) m = std::max(m, h);
    return m;
}

int WindowSchedule::max_w() const {
    int m = 1;
    for (const auto& [h, w] : layer_windows) m = std::max(m, w);
    return m;
}

std::pair<Tensor, PadRecord> pad_to_multiple(const Tensor& x, int h, int w) {
    if (x.rank() != 3) throw ShapeError("pad_to_multiple: expected [C,H,W], got " + shape_str(x.shape()));
    if (h < 1 || w < 1) throw ShapeError("pad_to_multiple: window must be at least 1x1");
    const int H = x.dim(1), W = x.dim(2);
    PadRecord rec;
    rec.orig_h = H;
    rec.orig_w = W;
    rec.padded_h = (H + h - 1) / h * h;
    rec.padded_w = (W + w - 1) / w * w;
    if (!rec.padded()) return {x, rec};
    return {pad_reflect(x, rec.padded_h, rec.padded_w), rec};
}

Tensor crop_to(const Tensor& x, const PadRecord& rec) {
    if (!rec.padded()) return x;
    return crop2d(x, rec.orig_h, rec.orig_w);
}

Tensor partition(const Tensor& x, int h, int w) {
    if (x.rank() != 3) throw ShapeError("partition: expected [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (h < 1 || w < 1 || H % h != 0 || W % w != 0) {
        throw ShapeError("partition: windows " + std::to_string(h) + "x" + std::to_string(w) +
                         " do not divide " + std::to_string(H) + "x" + std::to_string(W));
    }
    const int nh = H / h, nw = W / w;
    const int N = nh * nw;
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (int wy = 0; wy < nh; ++wy)
        for (int wx = 0; wx < nw; ++wx) {
            const int n = wy * nw + wx;
            for (int r = 0; r < h; ++r)
                for (int c0 = 0; c0 < w; ++c0) {
                    const int t = r * w + c0;
                    for (int ch = 0; ch < C; ++ch)
                        out[(static_cast<size_t>(n) * h * w + t) * C + ch] =
                            xv[(static_cast<size_t>(ch) * H + wy * h + r) * W + wx * w + c0];
                }
        }
    const bool rec = Tape::recording() && x.requires_grad();
    Tensor y = make_tensor({N, h * w, C}, std::move(out), rec);
    if (rec) {
        auto xn = x.node();
        auto yn = y.node();
        Tape::current().record([xn, yn, C, H, W, h, w, nh, nw] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (int wy = 0; wy < nh; ++wy)
                for (int wx = 0; wx < nw; ++wx) {
                    const int n = wy * nw + wx;
                    for (int r = 0; r < h; ++r)
                        for (int c0 = 0; c0 < w; ++c0) {
                            const int t = r * w + c0;
                            for (int ch = 0; ch < C; ++ch)
                                gx[(static_cast<size_t>(ch) * H + wy * h + r) * W + wx * w + c0] +=
                                    g[(static_cast<size_t>(n) * h * w + t) * C + ch];
                        }
                }
        });
    }
    return y;
}

Tensor merge(const Tensor& windows, int H, int W) {
    if (windows.rank() != 3) {
        throw ShapeError("merge: expected [N,h*w,C], got " + shape_str(windows.shape()));
    }
    const int hw = windows.dim(1);
    // Token count alone does not pin the window rectangle; prefer the most
    // square factorization that tiles the map (schedules use square windows).
    int best_h = 0, best_w = 0;
    for (int cand_h = 1; cand_h <= hw; ++cand_h) {
        if (hw % cand_h != 0) continue;
        const int cand_w = hw / cand_h;
        if (H % cand_h != 0 || W % cand_w != 0) continue;
        if ((H / cand_h) * (W / cand_w) != windows.dim(0)) continue;
        if (best_h == 0 || std::abs(cand_h - cand_w) < std::abs(best_h - best_w)) {
            best_h = cand_h;
            best_w = cand_w;
        }
    }
    if (best_h == 0) throw ShapeError("merge: no window geometry fits the given map size");
    return merge(windows, H, W, best_h, best_w);
}

Tensor merge(const Tensor& windows, int H, int W, int h, int w) {
    if (windows.rank() != 3) {
        throw ShapeError("merge: expected [N,h*w,C], got " + shape_str(windows.shape()));
    }
    const int N = windows.dim(0), hw = windows.dim(1), C = windows.dim(2);
    if (h < 1 || w < 1 || h * w != hw || H % h != 0 || W % w != 0 || (H / h) * (W / w) != N) {
        throw ShapeError("merge: " + std::to_string(N) + " windows of " + std::to_string(h) + "x" +
                         std::to_string(w) + " cannot tile " + std::to_string(H) + "x" +
                         std::to_string(W));
    }
    const int nw = W / w;
    const auto wv = windows.values();
    std::vector<double> out(wv.size());
    for (int n = 0; n < N; ++n) {
        const int wy = n / nw, wx = n % nw;
        for (int r = 0; r < h; ++r)
            for (int c0 = 0; c0 < w; ++c0) {
                const int t = r * w + c0;
                for (int ch = 0; ch < C; ++ch)
                    out[(static_cast<size_t>(ch) * H + wy * h + r) * W + wx * w + c0] =
                        wv[(static_cast<size_t>(n) * hw + t) * C + ch];
            }
    }
    const bool rec = Tape::recording() && windows.requires_grad();
    Tensor y = make_tensor({C, H, W}, std::move(out), rec);
    if (rec) {
        auto xn = windows.node();
        auto yn = y.node();
        Tape::current().record([xn, yn, N, hw, C, H, W, h, w, nw] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (int n = 0; n < N; ++n) {
                const int wy = n / nw, wx = n % nw;
                for (int r = 0; r < h; ++r)
                    for (int c0 = 0; c0 < w; ++c0) {
                        const int t = r * w + c0;
                        for (int ch = 0; ch < C; ++ch)
                            gx[(static_cast<size_t>(n) * hw + t) * C + ch] +=
                                g[(static_cast<size_t>(ch) * H + wy * h + r) * W + wx * w + c0];
                    }
            }
        });
    }
    return y;
}

Tensor tokens_from_planar(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("tokens_from_planar: expected [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    return reshape(partition(x, H, W), {H * W, C});
}

Tensor planar_from_tokens(const Tensor& x, int H, int W) {
    if (x.rank() != 2) throw ShapeError("planar_from_tokens: expected [HW,C], got " + shape_str(x.shape()));
    const int C = x.dim(1);
    if (x.dim(0) != H * W) {
        throw ShapeError("planar_from_tokens: " + std::to_string(x.dim(0)) + " tokens do not fill " +
                         std::to_string(H) + "x" + std::to_string(W));
    }
    return merge(reshape(x, {1, H * W, C}), H, W, H, W);
}

} // namespace hitsr
