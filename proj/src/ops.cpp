#include "hitsr/ops.hpp"

#include <cmath>
#include <cstring>

namespace hitsr {

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

// Triangular-wave index for ping-pong reflection, valid for any extension.
int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    int m = i % period;
    return m < n ? m : period - m;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    const bool rec = want_grad({&a, &b});
    Tensor y = make_tensor(a.shape(), std::move(out), rec);
    if (rec) {
        NodePtr an = a.node(), bn = b.node(), yn = y.node();
        Tape::current().record([an, bn, yn] {
            const auto& g = detail::grad_buf(*yn);
            if (an->requires_grad) {
                auto& ga = detail::grad_buf(*an);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = detail::grad_buf(*bn);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    const bool rec = want_grad({&a, &b});
    Tensor y = make_tensor(a.shape(), std::move(out), rec);
    if (rec) {
        NodePtr an = a.node(), bn = b.node(), yn = y.node();
        Tape::current().record([an, bn, yn] {
            const auto& g = detail::grad_buf(*yn);
            if (an->requires_grad) {
                auto& ga = detail::grad_buf(*an);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = detail::grad_buf(*bn);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const bool rec = want_grad({&a, &b});
    Tensor y = make_tensor(a.shape(), std::move(out), rec);
    if (rec) {
        NodePtr an = a.node(), bn = b.node(), yn = y.node();
        Tape::current().record([an, bn, yn] {
            const auto& g = detail::grad_buf(*yn);
            if (an->requires_grad) {
                auto& ga = detail::grad_buf(*an);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->values[i];
            }
            if (bn->requires_grad) {
                auto& gb = detail::grad_buf(*bn);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->values[i];
            }
        });
    }
    return y;
}

Tensor scale(const Tensor& x, double factor) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
    const bool rec = want_grad({&x});
    Tensor y = make_tensor(x.shape(), std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn, factor] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
        });
    }
    return y;
}

Tensor add_batch_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() < 2 ||
        Shape(x.shape().begin() + 1, x.shape().end()) != bias.shape()) {
        throw ShapeError("add_batch_bias: bias " + shape_str(bias.shape()) +
                         " does not match batch entries of " + shape_str(x.shape()));
    }
    const auto xv = x.values();
    const auto bv = bias.values();
    const size_t n = static_cast<size_t>(x.dim(0));
    const size_t stride = bv.size();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < stride; ++j) out[i * stride + j] = xv[i * stride + j] + bv[j];
    const bool rec = want_grad({&x, &bias});
    Tensor y = make_tensor(x.shape(), std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), bn = bias.node(), yn = y.node();
        Tape::current().record([xn, bn, yn, n, stride] {
            const auto& g = detail::grad_buf(*yn);
            if (xn->requires_grad) {
                auto& gx = detail::grad_buf(*xn);
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = detail::grad_buf(*bn);
                for (size_t i = 0; i < n; ++i)
                    for (size_t j = 0; j < stride; ++j) gb[j] += g[i * stride + j];
            }
        });
    }
    return y;
}

namespace {

struct MatmulDims {
    int batch;  // number of batch slices in the output
    int m, k, p;
    bool a_batched, b_batched;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
    const int ar = a.rank(), br = b.rank();
    if (ar < 2 || ar > 3 || br < 2 || br > 3) {
        throw ShapeError("matmul: ranks must be 2 or 3, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    MatmulDims d{};
    d.a_batched = ar == 3;
    d.b_batched = br == 3;
    d.m = a.dim(ar - 2);
    d.k = a.dim(ar - 1);
    if (b.dim(br - 2) != d.k) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    d.p = b.dim(br - 1);
    d.batch = d.a_batched ? a.dim(0) : (d.b_batched ? b.dim(0) : 1);
    if (d.a_batched && d.b_batched && a.dim(0) != b.dim(0)) {
        throw ShapeError("matmul: batch dimensions disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    return d;
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const MatmulDims d = matmul_dims(a, b);
    const auto av = a.values();
    const auto bv = b.values();
    const size_t a_stride = d.a_batched ? static_cast<size_t>(d.m) * d.k : 0;
    const size_t b_stride = d.b_batched ? static_cast<size_t>(d.k) * d.p : 0;
    const size_t y_stride = static_cast<size_t>(d.m) * d.p;
    std::vector<double> out(static_cast<size_t>(d.batch) * y_stride, 0.0);
    for (int n = 0; n < d.batch; ++n) {
        const double* A = av.data() + n * a_stride;
        const double* B = bv.data() + n * b_stride;
        double* Y = out.data() + n * y_stride;
        for (int i = 0; i < d.m; ++i)
            for (int kk = 0; kk < d.k; ++kk) {
                const double aik = A[i * d.k + kk];
                const double* Brow = B + kk * d.p;
                double* Yrow = Y + i * d.p;
                for (int j = 0; j < d.p; ++j) Yrow[j] += aik * Brow[j];
            }
    }
    Shape yshape;
    if (d.a_batched || d.b_batched) yshape = {d.batch, d.m, d.p};
    else yshape = {d.m, d.p};
    const bool rec = want_grad({&a, &b});
    Tensor y = make_tensor(std::move(yshape), std::move(out), rec);
    if (rec) {
        NodePtr an = a.node(), bn = b.node(), yn = y.node();
        Tape::current().record([an, bn, yn, d, a_stride, b_stride, y_stride] {
            const auto& g = detail::grad_buf(*yn);
            for (int n = 0; n < d.batch; ++n) {
                const double* G = g.data() + n * y_stride;
                const double* A = an->values.data() + n * a_stride;
                const double* B = bn->values.data() + n * b_stride;
                if (an->requires_grad) {
                    double* GA = detail::grad_buf(*an).data() + n * a_stride;
                    for (int i = 0; i < d.m; ++i)
                        for (int kk = 0; kk < d.k; ++kk) {
                            double acc = 0.0;
                            const double* Grow = G + i * d.p;
                            const double* Brow = B + kk * d.p;
                            for (int j = 0; j < d.p; ++j) acc += Grow[j] * Brow[j];
                            GA[i * d.k + kk] += acc;
                        }
                }
                if (bn->requires_grad) {
                    double* GB = detail::grad_buf(*bn).data() + n * b_stride;
                    for (int i = 0; i < d.m; ++i)
                        for (int kk = 0; kk < d.k; ++kk) {
                            const double aik = A[i * d.k + kk];
                            const double* Grow = G + i * d.p;
                            double* GBrow = GB + kk * d.p;
                            for (int j = 0; j < d.p; ++j) GBrow[j] += aik * Grow[j];
                        }
                }
            }
        });
    }
    return y;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(x.shape()));
    Shape yshape = x.shape();
    std::swap(yshape[yshape.size() - 1], yshape[yshape.size() - 2]);
    const int rows = x.dim(x.rank() - 2);
    const int cols = x.dim(x.rank() - 1);
    const size_t slice = static_cast<size_t>(rows) * cols;
    const size_t batch = static_cast<size_t>(x.size()) / slice;
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t n = 0; n < batch; ++n) {
        const double* src = xv.data() + n * slice;
        double* dst = out.data() + n * slice;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
    const bool rec = want_grad({&x});
    Tensor y = make_tensor(std::move(yshape), std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn, batch, slice, rows, cols] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (size_t n = 0; n < batch; ++n) {
                const double* src = g.data() + n * slice;
                double* dst = gx.data() + n * slice;
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c) dst[r * cols + c] += src[c * rows + r];
            }
        });
    }
    return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    const auto xv = x.values();
    std::vector<double> out(xv.begin(), xv.end());
    const bool rec = want_grad({&x});
    Tensor y = make_tensor(std::move(shape), std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return y;
}

namespace {

struct AxisDims {
    size_t outer, axis, inner;
};

AxisDims axis_dims(const Shape& shape, int axis) {
    AxisDims d{1, static_cast<size_t>(shape[static_cast<size_t>(axis)]), 1};
    for (int i = 0; i < axis; ++i) d.outer *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) d.inner *= static_cast<size_t>(shape[i]);
    return d;
}

} // namespace

std::vector<Tensor> split(const Tensor& x, int axis, int parts) {
    if (axis < 0 || axis >= x.rank()) throw ShapeError("split: bad axis");
    const AxisDims d = axis_dims(x.shape(), axis);
    if (parts <= 0 || d.axis % static_cast<size_t>(parts) != 0) {
        throw ShapeError("split: axis extent " + std::to_string(d.axis) + " not divisible into " +
                         std::to_string(parts) + " parts");
    }
    const size_t chunk = d.axis / static_cast<size_t>(parts);
    Shape pshape = x.shape();
    pshape[static_cast<size_t>(axis)] = static_cast<int>(chunk);
    const auto xv = x.values();
    const bool rec = want_grad({&x});
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(parts));
    for (int p = 0; p < parts; ++p) {
        std::vector<double> v(d.outer * chunk * d.inner);
        for (size_t o = 0; o < d.outer; ++o)
            for (size_t c = 0; c < chunk; ++c) {
                const double* src = xv.data() + ((o * d.axis) + p * chunk + c) * d.inner;
                double* dst = v.data() + ((o * chunk) + c) * d.inner;
                std::memcpy(dst, src, d.inner * sizeof(double));
            }
        Tensor t = make_tensor(pshape, std::move(v), rec);
        if (rec) {
            NodePtr xn = x.node(), tn = t.node();
            const size_t off = static_cast<size_t>(p) * chunk;
            Tape::current().record([xn, tn, d, chunk, off] {
                const auto& g = detail::grad_buf(*tn);
                auto& gx = detail::grad_buf(*xn);
                for (size_t o = 0; o < d.outer; ++o)
                    for (size_t c = 0; c < chunk; ++c) {
                        const double* src = g.data() + ((o * chunk) + c) * d.inner;
                        double* dst = gx.data() + ((o * d.axis) + off + c) * d.inner;
                        for (size_t i = 0; i < d.inner; ++i) dst[i] += src[i];
                    }
            });
        }
        out.push_back(std::move(t));
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Tensor& first = parts.front();
    if (axis < 0 || axis >= first.rank()) throw ShapeError("concat: bad axis");
    int total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != first.rank()) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < first.rank(); ++i) {
            if (i != axis && t.dim(i) != first.dim(i)) {
                throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                 shape_str(first.shape()));
            }
        }
        total += t.dim(axis);
    }
    Shape yshape = first.shape();
    yshape[static_cast<size_t>(axis)] = total;
    const AxisDims d = axis_dims(yshape, axis);
    std::vector<double> out(d.outer * d.axis * d.inner);
    size_t off = 0;
    for (const Tensor& t : parts) {
        const size_t chunk = static_cast<size_t>(t.dim(axis));
        const auto tv = t.values();
        for (size_t o = 0; o < d.outer; ++o)
            for (size_t c = 0; c < chunk; ++c) {
                const double* src = tv.data() + ((o * chunk) + c) * d.inner;
                double* dst = out.data() + ((o * d.axis) + off + c) * d.inner;
                std::memcpy(dst, src, d.inner * sizeof(double));
            }
        off += chunk;
    }
    bool rec = false;
    if (Tape::recording()) {
        for (const Tensor& t : parts) rec = rec || t.requires_grad();
    }
    Tensor y = make_tensor(std::move(yshape), std::move(out), rec);
    if (rec) {
        std::vector<NodePtr> nodes;
        nodes.reserve(parts.size());
        std::vector<size_t> chunks;
        for (const Tensor& t : parts) {
            nodes.push_back(t.node());
            chunks.push_back(static_cast<size_t>(t.dim(axis)));
        }
        NodePtr yn = y.node();
        Tape::current().record([nodes, chunks, yn, d] {
            const auto& g = detail::grad_buf(*yn);
            size_t off = 0;
            for (size_t idx = 0; idx < nodes.size(); ++idx) {
                const size_t chunk = chunks[idx];
                if (nodes[idx]->requires_grad) {
                    auto& gx = detail::grad_buf(*nodes[idx]);
                    for (size_t o = 0; o < d.outer; ++o)
                        for (size_t c = 0; c < chunk; ++c) {
                            const double* src = g.data() + ((o * d.axis) + off + c) * d.inner;
                            double* dst = gx.data() + ((o * chunk) + c) * d.inner;
                            for (size_t i = 0; i < d.inner; ++i) dst[i] += src[i];
                        }
                }
                off += chunk;
            }
        });
    }
    return y;
}

Tensor gelu(const Tensor& x) {
    static const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
    static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
    const bool rec = want_grad({&x});
    Tensor y = make_tensor(x.shape(), std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (size_t i = 0; i < g.size(); ++i) {
                const double v = xn->values[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(w.shape()));
    const int in = w.dim(0);
    const int out_dim = w.dim(1);
    if (x.rank() < 1 || x.dim(x.rank() - 1) != in) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    }
    if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim)) {
        throw ShapeError("linear: bias " + shape_str(b.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    }
    const size_t rows = static_cast<size_t>(x.size()) / in;
    const auto xv = x.values();
    const auto wv = w.values();
    std::vector<double> out(rows * out_dim, 0.0);
    for (size_t r = 0; r < rows; ++r) {
        const double* xrow = xv.data() + r * in;
        double* yrow = out.data() + r * out_dim;
        for (int i = 0; i < in; ++i) {
            const double xi = xrow[i];
            const double* wrow = wv.data() + static_cast<size_t>(i) * out_dim;
            for (int j = 0; j < out_dim; ++j) yrow[j] += xi * wrow[j];
        }
    }
    if (b.defined()) {
        const auto bv = b.values();
        for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < out_dim; ++j) out[r * out_dim + j] += bv[static_cast<size_t>(j)];
    }
    Shape yshape = x.shape();
    yshape.back() = out_dim;
    const Tensor bias = b;
    const bool rec = b.defined() ? want_grad({&x, &w, &b}) : want_grad({&x, &w});
    Tensor y = make_tensor(std::move(yshape), std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), wn = w.node(), yn = y.node();
        NodePtr bn = bias.defined() ? bias.node() : nullptr;
        Tape::current().record([xn, wn, bn, yn, rows, in, out_dim] {
            const auto& g = detail::grad_buf(*yn);
            if (xn->requires_grad) {
                auto& gx = detail::grad_buf(*xn);
                for (size_t r = 0; r < rows; ++r) {
                    const double* grow = g.data() + r * out_dim;
                    double* gxrow = gx.data() + r * in;
                    for (int i = 0; i < in; ++i) {
                        const double* wrow = wn->values.data() + static_cast<size_t>(i) * out_dim;
                        double acc = 0.0;
                        for (int j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
                        gxrow[i] += acc;
                    }
                }
            }
            if (wn->requires_grad) {
                auto& gw = detail::grad_buf(*wn);
                for (size_t r = 0; r < rows; ++r) {
                    const double* xrow = xn->values.data() + r * in;
                    const double* grow = g.data() + r * out_dim;
                    for (int i = 0; i < in; ++i) {
                        const double xi = xrow[i];
                        double* gwrow = gw.data() + static_cast<size_t>(i) * out_dim;
                        for (int j = 0; j < out_dim; ++j) gwrow[j] += xi * grow[j];
                    }
                }
            }
            if (bn && bn->requires_grad) {
                auto& gb = detail::grad_buf(*bn);
                for (size_t r = 0; r < rows; ++r) {
                    const double* grow = g.data() + r * out_dim;
                    for (int j = 0; j < out_dim; ++j) gb[static_cast<size_t>(j)] += grow[j];
                }
            }
        });
    }
    return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 3 || w.rank() != 4) {
        throw ShapeError("conv2d: expected x [C,H,W] and w [O,C,k,k], got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    }
    const int cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin) {
        throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                         " do not match kernel channels " + std::to_string(w.dim(1)));
    }
    if (w.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
    if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
        throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
    }
    const int pad = (k - 1) / 2;
    const auto xv = x.values();
    const auto wv = w.values();
    std::vector<double> out(static_cast<size_t>(cout) * H * W, 0.0);
    for (int co = 0; co < cout; ++co) {
        const double bias_v = b.defined() ? b.at(co) : 0.0;
        for (int oh = 0; oh < H; ++oh)
            for (int ow = 0; ow < W; ++ow) {
                double acc = bias_v;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* xplane = xv.data() + static_cast<size_t>(ci) * H * W;
                    const double* wk = wv.data() + ((static_cast<size_t>(co) * cin + ci) * k) * k;
                    for (int kh = 0; kh < k; ++kh) {
                        const int ih = oh + kh - pad;
                        if (ih < 0 || ih >= H) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const int iw = ow + kw - pad;
                            if (iw < 0 || iw >= W) continue;
                            acc += xplane[ih * W + iw] * wk[kh * k + kw];
                        }
                    }
                }
                out[(static_cast<size_t>(co) * H + oh) * W + ow] = acc;
            }
    }
    const Tensor bias = b;
    const bool rec = b.defined() ? want_grad({&x, &w, &b}) : want_grad({&x, &w});
    Tensor y = make_tensor({cout, H, W}, std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), wn = w.node(), yn = y.node();
        NodePtr bn = bias.defined() ? bias.node() : nullptr;
        Tape::current().record([xn, wn, bn, yn, cin, cout, H, W, k, pad] {
            const auto& g = detail::grad_buf(*yn);
            for (int co = 0; co < cout; ++co) {
                const double* gplane = g.data() + static_cast<size_t>(co) * H * W;
                if (bn && bn->requires_grad) {
                    double acc = 0.0;
                    for (int i = 0; i < H * W; ++i) acc += gplane[i];
                    detail::grad_buf(*bn)[static_cast<size_t>(co)] += acc;
                }
                for (int ci = 0; ci < cin; ++ci) {
                    const double* xplane = xn->values.data() + static_cast<size_t>(ci) * H * W;
                    const double* wk = wn->values.data() + ((static_cast<size_t>(co) * cin + ci) * k) * k;
                    double* gx = xn->requires_grad
                                     ? detail::grad_buf(*xn).data() + static_cast<size_t>(ci) * H * W
                                     : nullptr;
                    double* gw = wn->requires_grad
                                     ? detail::grad_buf(*wn).data() + ((static_cast<size_t>(co) * cin + ci) * k) * k
                                     : nullptr;
                    for (int oh = 0; oh < H; ++oh)
                        for (int ow = 0; ow < W; ++ow) {
                            const double gv = gplane[oh * W + ow];
                            if (gv == 0.0) continue;
                            for (int kh = 0; kh < k; ++kh) {
                                const int ih = oh + kh - pad;
                                if (ih < 0 || ih >= H) continue;
                                for (int kw = 0; kw < k; ++kw) {
                                    const int iw = ow + kw - pad;
                                    if (iw < 0 || iw >= W) continue;
                                    if (gx) gx[ih * W + iw] += gv * wk[kh * k + kw];
                                    if (gw) gw[kh * k + kw] += gv * xplane[ih * W + iw];
                                }
                            }
                        }
                }
            }
        });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: empty shape");
    const int c = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
        throw ShapeError("layer_norm: affine parameters must be [" + std::to_string(c) + "]");
    }
    const size_t rows = static_cast<size_t>(x.size()) / c;
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    std::vector<double> out(xv.size());
    std::vector<double> inv_std(rows);
    std::vector<double> xhat(xv.size());
    for (size_t r = 0; r < rows; ++r) {
        const double* xrow = xv.data() + r * c;
        double mean = 0.0;
        for (int i = 0; i < c; ++i) mean += xrow[i];
        mean /= c;
        double var = 0.0;
        for (int i = 0; i < c; ++i) {
            const double d = xrow[i] - mean;
            var += d * d;
        }
        var /= c; // population variance
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (int i = 0; i < c; ++i) {
            const double h = (xrow[i] - mean) * istd;
            xhat[r * c + i] = h;
            out[r * c + i] = h * gv[static_cast<size_t>(i)] + bv[static_cast<size_t>(i)];
        }
    }
    const bool rec = want_grad({&x, &gamma, &beta});
    Tensor y = make_tensor(x.shape(), std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node();
        auto istd_v = std::make_shared<std::vector<double>>(std::move(inv_std));
        auto xhat_v = std::make_shared<std::vector<double>>(std::move(xhat));
        Tape::current().record([xn, gn, bn, yn, istd_v, xhat_v, rows, c] {
            const auto& g = detail::grad_buf(*yn);
            for (size_t r = 0; r < rows; ++r) {
                const double* grow = g.data() + r * c;
                const double* hrow = xhat_v->data() + r * c;
                if (gn->requires_grad) {
                    auto& gg = detail::grad_buf(*gn);
                    for (int i = 0; i < c; ++i) gg[static_cast<size_t>(i)] += grow[i] * hrow[i];
                }
                if (bn->requires_grad) {
                    auto& gb = detail::grad_buf(*bn);
                    for (int i = 0; i < c; ++i) gb[static_cast<size_t>(i)] += grow[i];
                }
                if (xn->requires_grad) {
                    auto& gx = detail::grad_buf(*xn);
                    double sum_gg = 0.0, sum_ggh = 0.0;
                    for (int i = 0; i < c; ++i) {
                        const double gw = grow[i] * gn->values[static_cast<size_t>(i)];
                        sum_gg += gw;
                        sum_ggh += gw * hrow[i];
                    }
                    const double istd = (*istd_v)[r];
                    for (int i = 0; i < c; ++i) {
                        const double gw = grow[i] * gn->values[static_cast<size_t>(i)];
                        gx[r * c + i] += (gw - sum_gg / c - hrow[i] * sum_ggh / c) * istd;
                    }
                }
            }
        });
    }
    return y;
}

Tensor pixel_shuffle(const Tensor& x, int s) {
    if (x.rank() != 3) throw ShapeError("pixel_shuffle: expected [C,H,W], got " + shape_str(x.shape()));
    const int c_in = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (s < 1 || c_in % (s * s) != 0) {
        throw ShapeError("pixel_shuffle: " + std::to_string(c_in) + " channels not divisible by s^2=" +
                         std::to_string(s * s));
    }
    const int c_out = c_in / (s * s);
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (int c = 0; c < c_out; ++c)
        for (int y0 = 0; y0 < H * s; ++y0)
            for (int x0 = 0; x0 < W * s; ++x0) {
                const int src_c = c * s * s + (y0 % s) * s + (x0 % s);
                out[(static_cast<size_t>(c) * H * s + y0) * W * s + x0] =
                    xv[(static_cast<size_t>(src_c) * H + y0 / s) * W + x0 / s];
            }
    const bool rec = want_grad({&x});
    Tensor y = make_tensor({c_out, H * s, W * s}, std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn, c_out, H, W, s] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (int c = 0; c < c_out; ++c)
                for (int y0 = 0; y0 < H * s; ++y0)
                    for (int x0 = 0; x0 < W * s; ++x0) {
                        const int src_c = c * s * s + (y0 % s) * s + (x0 % s);
                        gx[(static_cast<size_t>(src_c) * H + y0 / s) * W + x0 / s] +=
                            g[(static_cast<size_t>(c) * H * s + y0) * W * s + x0];
                    }
        });
    }
    return y;
}

Tensor pixel_unshuffle(const Tensor& x, int s) {
    if (x.rank() != 3) throw ShapeError("pixel_unshuffle: expected [C,H,W], got " + shape_str(x.shape()));
    const int c_in = x.dim(0), sH = x.dim(1), sW = x.dim(2);
    if (s < 1 || sH % s != 0 || sW % s != 0) {
        throw ShapeError("pixel_unshuffle: spatial size " + std::to_string(sH) + "x" +
                         std::to_string(sW) + " not divisible by " + std::to_string(s));
    }
    const int H = sH / s, W = sW / s;
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (int c = 0; c < c_in; ++c)
        for (int y0 = 0; y0 < sH; ++y0)
            for (int x0 = 0; x0 < sW; ++x0) {
                const int dst_c = c * s * s + (y0 % s) * s + (x0 % s);
                out[(static_cast<size_t>(dst_c) * H + y0 / s) * W + x0 / s] =
                    xv[(static_cast<size_t>(c) * sH + y0) * sW + x0];
            }
    const bool rec = want_grad({&x});
    Tensor y = make_tensor({c_in * s * s, H, W}, std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn, c_in, sH, sW, s] {
            const int H2 = sH / s, W2 = sW / s;
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (int c = 0; c < c_in; ++c)
                for (int y0 = 0; y0 < sH; ++y0)
                    for (int x0 = 0; x0 < sW; ++x0) {
                        const int dst_c = c * s * s + (y0 % s) * s + (x0 % s);
                        gx[(static_cast<size_t>(c) * sH + y0) * sW + x0] +=
                            g[(static_cast<size_t>(dst_c) * H2 + y0 / s) * W2 + x0 / s];
                    }
        });
    }
    return y;
}

Tensor pad_reflect(const Tensor& x, int new_h, int new_w) {
    if (x.rank() != 3) throw ShapeError("pad_reflect: expected [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (new_h < H || new_w < W) throw ShapeError("pad_reflect: target smaller than input");
    const auto xv = x.values();
    std::vector<double> out(static_cast<size_t>(C) * new_h * new_w);
    for (int c = 0; c < C; ++c)
        for (int y0 = 0; y0 < new_h; ++y0) {
            const int sy = reflect_index(y0, H);
            for (int x0 = 0; x0 < new_w; ++x0) {
                const int sx = reflect_index(x0, W);
                out[(static_cast<size_t>(c) * new_h + y0) * new_w + x0] =
                    xv[(static_cast<size_t>(c) * H + sy) * W + sx];
            }
        }
    const bool rec = want_grad({&x});
    Tensor y = make_tensor({C, new_h, new_w}, std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn, C, H, W, new_h, new_w] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (int c = 0; c < C; ++c)
                for (int y0 = 0; y0 < new_h; ++y0) {
                    const int sy = reflect_index(y0, H);
                    for (int x0 = 0; x0 < new_w; ++x0) {
                        const int sx = reflect_index(x0, W);
                        gx[(static_cast<size_t>(c) * H + sy) * W + sx] +=
                            g[(static_cast<size_t>(c) * new_h + y0) * new_w + x0];
                    }
                }
        });
    }
    return y;
}

Tensor crop2d(const Tensor& x, int h, int w) {
    if (x.rank() != 3) throw ShapeError("crop2d: expected [C,H,W], got " + shape_str(x.shape()));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (h > H || w > W) throw ShapeError("crop2d: target larger than input");
    const auto xv = x.values();
    std::vector<double> out(static_cast<size_t>(C) * h * w);
    for (int c = 0; c < C; ++c)
        for (int y0 = 0; y0 < h; ++y0)
            std::memcpy(out.data() + (static_cast<size_t>(c) * h + y0) * w,
                        xv.data() + (static_cast<size_t>(c) * H + y0) * W, static_cast<size_t>(w) * sizeof(double));
    const bool rec = want_grad({&x});
    Tensor y = make_tensor({C, h, w}, std::move(out), rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn, C, H, W, h, w] {
            const auto& g = detail::grad_buf(*yn);
            auto& gx = detail::grad_buf(*xn);
            for (int c = 0; c < C; ++c)
                for (int y0 = 0; y0 < h; ++y0)
                    for (int x0 = 0; x0 < w; ++x0)
                        gx[(static_cast<size_t>(c) * H + y0) * W + x0] +=
                            g[(static_cast<size_t>(c) * h + y0) * w + x0];
        });
    }
    return y;
}

Tensor sum_all(const Tensor& x) {
    const auto xv = x.values();
    double acc = 0.0;
    for (double v : xv) acc += v;
    const bool rec = want_grad({&x});
    Tensor y = make_tensor({1}, {acc}, rec);
    if (rec) {
        NodePtr xn = x.node(), yn = y.node();
        Tape::current().record([xn, yn] {
            const double g = detail::grad_buf(*yn)[0];
            auto& gx = detail::grad_buf(*xn);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return y;
}

Tensor mean_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mean_abs_diff");
    const auto av = a.values();
    const auto bv = b.values();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) acc += std::abs(av[i] - bv[i]);
    const double n = static_cast<double>(av.size());
    const bool rec = want_grad({&a, &b});
    Tensor y = make_tensor({1}, {acc / n}, rec);
    if (rec) {
        NodePtr an = a.node(), bn = b.node(), yn = y.node();
        Tape::current().record([an, bn, yn, n] {
            const double g = detail::grad_buf(*yn)[0] / n;
            for (size_t i = 0; i < an->values.size(); ++i) {
                const double d = an->values[i] - bn->values[i];
                const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (an->requires_grad) detail::grad_buf(*an)[i] += g * s;
                if (bn->requires_grad) detail::grad_buf(*bn)[i] -= g * s;
            }
        });
    }
    return y;
}

} // namespace hitsr
