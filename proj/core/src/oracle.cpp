#include "bittrace/oracle.hpp"

#include <cmath>
#include <limits>

#include "bittrace/errors.hpp"
#include "exec_common.hpp"

namespace bittrace::oracle {

ExactBits matched_bits(double x_work, double x_shadow, Precision p) {
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    if (std::isnan(x_work) && std::isnan(x_shadow)) return emax;
    if (!std::isfinite(x_work) || !std::isfinite(x_shadow)) {
        return x_work == x_shadow ? emax : 0;
    }
    if (x_shadow == 0.0) return x_work == 0.0 ? emax : 0;
    const double rel = std::fabs(x_work - x_shadow) / std::fabs(x_shadow);
    if (rel == 0.0) return emax;
    return bits_from_rel(rel, p);
}

std::vector<ExactBits> matched_bits(const PTensor& work, const DTensor& shadow) {
    if (work.numel() != shadow.numel()) {
        throw shape_error("matched_bits: element count mismatch");
    }
    std::vector<ExactBits> out(static_cast<std::size_t>(work.numel()));
    for (std::int64_t i = 0; i < work.numel(); ++i) {
        out[static_cast<std::size_t>(i)] =
            matched_bits(work.value_at(i), shadow.at(i), work.precision());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Error-free transformations (Neumaier summation, fma-based two-product).

double compensated_sum(std::span<const double> xs) {
    double s = 0.0, comp = 0.0;
    for (const double x : xs) {
        const double t = s + x;
        if (std::fabs(s) >= std::fabs(x)) {
            comp += (s - t) + x;
        } else {
            comp += (x - t) + s;
        }
        s = t;
    }
    return s + comp;
}

double compensated_dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0, comp = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double p = a[i] * b[i];
        const double perr = std::fma(a[i], b[i], -p);
        const double t = s + p;
        if (std::fabs(s) >= std::fabs(p)) {
            comp += (s - t) + p;
        } else {
            comp += (p - t) + s;
        }
        s = t;
        comp += perr;
    }
    return s + comp;
}

// ---------------------------------------------------------------------------
// Shadow kernels.  Loop structure and evaluation order deliberately mirror
// the tracked kernels element for element.

namespace {

DTensor make_dt(Shape shape, std::vector<double> v) {
    return DTensor{std::move(shape), std::move(v)};
}

DTensor shadow_ew(BinOp op, const DTensor& a, const DTensor& b) {
    const Shape out_shape = broadcast_shape(a.shape, b.shape);
    const BroadcastIndexer ia(a.shape, out_shape);
    const BroadcastIndexer ib(b.shape, out_shape);
    const std::int64_t n = out_shape.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = a.at(ia(i));
        const double y = b.at(ib(i));
        double z = 0.0;
        switch (op) {
            case BinOp::Add: z = x + y; break;
            case BinOp::Sub: z = x - y; break;
            case BinOp::Mul: z = x * y; break;
            case BinOp::Div: z = x / y; break;
        }
        out[static_cast<std::size_t>(i)] = z;
    }
    return make_dt(out_shape, std::move(out));
}

double shadow_unary_scalar(FuncId f, double x) {
    switch (f) {
        case FuncId::Relu: return x > 0.0 ? x : 0.0;
        case FuncId::Neg: return -x;
        case FuncId::Abs: return std::fabs(x);
        case FuncId::Exp: return std::exp(x);
        case FuncId::Log: return std::log(x);
        case FuncId::Tanh: return std::tanh(x);
        case FuncId::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case FuncId::Sqrt: return std::sqrt(x);
    }
    return std::numeric_limits<double>::quiet_NaN();
}

DTensor shadow_un(FuncId f, const DTensor& a) {
    std::vector<double> out(a.v.size());
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        out[i] = shadow_unary_scalar(f, a.v[i]);
    }
    return make_dt(a.shape, std::move(out));
}

DTensor shadow_mm(const DTensor& a, const DTensor& b, bool compensated) {
    const std::int64_t m = a.shape.extent(0);
    const std::int64_t kk = a.shape.extent(1);
    const std::int64_t n = b.shape.extent(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            if (compensated) {
                std::vector<double> xs(static_cast<std::size_t>(kk));
                std::vector<double> ys(static_cast<std::size_t>(kk));
                for (std::int64_t k = 0; k < kk; ++k) {
                    xs[static_cast<std::size_t>(k)] = a.at(i * kk + k);
                    ys[static_cast<std::size_t>(k)] = b.at(k * n + j);
                }
                out[static_cast<std::size_t>(i * n + j)] = compensated_dot(xs, ys);
            } else {
                double acc = 0.0;
                for (std::int64_t k = 0; k < kk; ++k) {
                    acc += a.at(i * kk + k) * b.at(k * n + j);
                }
                out[static_cast<std::size_t>(i * n + j)] = acc;
            }
        }
    }
    return make_dt(Shape{m, n}, std::move(out));
}

DTensor shadow_red(ReduceOp op, const DTensor& a, int axis, bool compensated) {
    std::int64_t outer = 1, extent = a.numel(), inner = 1;
    Shape out_shape{};
    if (axis != -1) {
        const auto rank = static_cast<int>(a.shape.rank());
        if (axis < 0 || axis >= rank) throw shape_error("reduce axis out of range");
        std::vector<std::int64_t> dims;
        outer = inner = 1;
        for (int i = 0; i < rank; ++i) {
            const std::int64_t d = a.shape.extent(static_cast<std::size_t>(i));
            if (i < axis) outer *= d;
            if (i > axis) inner *= d;
            if (i != axis) dims.push_back(d);
        }
        extent = a.shape.extent(static_cast<std::size_t>(axis));
        out_shape = Shape(std::move(dims));
    }
    std::vector<double> out(static_cast<std::size_t>(outer * inner));
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * extent * inner + in;
            double r = 0.0;
            if (op == ReduceOp::Max) {
                std::int64_t best = base;
                for (std::int64_t k = 1; k < extent; ++k) {
                    const std::int64_t idx = base + k * inner;
                    if (a.at(idx) > a.at(best)) best = idx;
                }
                r = a.at(best);
            } else if (compensated) {
                std::vector<double> xs(static_cast<std::size_t>(extent));
                for (std::int64_t k = 0; k < extent; ++k) {
                    xs[static_cast<std::size_t>(k)] = a.at(base + k * inner);
                }
                r = compensated_sum(xs);
                if (op == ReduceOp::Mean) r /= static_cast<double>(extent);
            } else {
                for (std::int64_t k = 0; k < extent; ++k) {
                    r += a.at(base + k * inner);
                }
                if (op == ReduceOp::Mean) r /= static_cast<double>(extent);
            }
            out[static_cast<std::size_t>(o * inner + in)] = r;
        }
    }
    return make_dt(std::move(out_shape), std::move(out));
}

DTensor shadow_perm(const DTensor& a, const std::vector<int>& axes) {
    const std::size_t rank = a.shape.rank();
    std::vector<std::int64_t> out_dims(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_dims[i] = a.shape.extent(static_cast<std::size_t>(axes[i]));
    }
    std::vector<std::int64_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * a.shape.extent(i);
    }
    const std::int64_t n = a.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    std::vector<std::int64_t> coord(rank, 0);
    for (std::int64_t flat = 0; flat < n; ++flat) {
        std::int64_t rem = flat, src = 0;
        for (std::size_t i = rank; i-- > 0;) {
            coord[i] = rem % out_dims[i];
            rem /= out_dims[i];
        }
        for (std::size_t i = 0; i < rank; ++i) {
            src += coord[i] * in_strides[static_cast<std::size_t>(axes[i])];
        }
        out[static_cast<std::size_t>(flat)] = a.at(src);
    }
    return make_dt(Shape(std::move(out_dims)), std::move(out));
}

DTensor shadow_im2col(const DTensor& x, const Conv2dGeom& g) {
    std::vector<double> out(static_cast<std::size_t>(g.rows() * g.cols()));
    std::int64_t r = 0;
    for (std::int64_t b = 0; b < g.batch; ++b) {
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            for (std::int64_t ox = 0; ox < g.out_w; ++ox, ++r) {
                std::int64_t c = 0;
                for (std::int64_t ch = 0; ch < g.channels; ++ch) {
                    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
                        for (std::int64_t kx = 0; kx < g.kw; ++kx, ++c) {
                            const std::int64_t y = oy * g.stride + ky;
                            const std::int64_t xx = ox * g.stride + kx;
                            out[static_cast<std::size_t>(r * g.cols() + c)] = x.at(
                                ((b * g.channels + ch) * g.height + y) * g.width + xx);
                        }
                    }
                }
            }
        }
    }
    return make_dt(Shape{g.rows(), g.cols()}, std::move(out));
}

DTensor shadow_col2im(const DTensor& cols, const Conv2dGeom& g) {
    std::vector<double> out(
        static_cast<std::size_t>(g.batch * g.channels * g.height * g.width), 0.0);
    std::int64_t r = 0;
    for (std::int64_t b = 0; b < g.batch; ++b) {
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            for (std::int64_t ox = 0; ox < g.out_w; ++ox, ++r) {
                std::int64_t c = 0;
                for (std::int64_t ch = 0; ch < g.channels; ++ch) {
                    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
                        for (std::int64_t kx = 0; kx < g.kw; ++kx, ++c) {
                            const std::int64_t y = oy * g.stride + ky;
                            const std::int64_t xx = ox * g.stride + kx;
                            out[static_cast<std::size_t>(
                                ((b * g.channels + ch) * g.height + y) * g.width +
                                xx)] += cols.at(r * g.cols() + c);
                        }
                    }
                }
            }
        }
    }
    return make_dt(Shape{g.batch, g.channels, g.height, g.width}, std::move(out));
}

DTensor shadow_gather(const DTensor& x, const std::vector<std::int64_t>& labels) {
    const std::int64_t rows = x.shape.extent(0);
    const std::int64_t cols = x.shape.extent(1);
    std::vector<double> out(static_cast<std::size_t>(rows));
    for (std::int64_t i = 0; i < rows; ++i) {
        out[static_cast<std::size_t>(i)] = x.at(i * cols + labels[static_cast<std::size_t>(i)]);
    }
    return make_dt(Shape{rows}, std::move(out));
}

DTensor shadow_scatter(const DTensor& g, const std::vector<std::int64_t>& labels,
                       std::int64_t num_cols) {
    const std::int64_t rows = g.numel();
    std::vector<double> out(static_cast<std::size_t>(rows * num_cols), 0.0);
    for (std::int64_t i = 0; i < rows; ++i) {
        out[static_cast<std::size_t>(i * num_cols + labels[static_cast<std::size_t>(i)])] =
            g.at(i);
    }
    return make_dt(Shape{rows, num_cols}, std::move(out));
}

DTensor shadow_broadcast(const DTensor& a, const Shape& target) {
    const BroadcastIndexer idx(a.shape, target);
    const std::int64_t n = target.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        out[static_cast<std::size_t>(i)] = a.at(idx(i));
    }
    return make_dt(target, std::move(out));
}

DTensor shadow_reduce_to(const DTensor& g, const Shape& target, bool compensated) {
    DTensor cur = g;
    while (cur.shape.rank() > target.rank()) {
        cur = shadow_red(ReduceOp::Sum, cur, 0, compensated);
    }
    for (std::size_t i = 0; i < target.rank(); ++i) {
        if (target.extent(i) == 1 && cur.shape.extent(i) != 1) {
            DTensor summed = shadow_red(ReduceOp::Sum, cur, static_cast<int>(i), compensated);
            std::vector<std::int64_t> dims = summed.shape.dims();
            dims.insert(dims.begin() + static_cast<std::ptrdiff_t>(i), 1);
            summed.shape = Shape(std::move(dims));
            cur = std::move(summed);
        }
    }
    if (cur.shape != target) cur.shape = target;
    return cur;
}

DTensor shadow_sub_rowmax(const DTensor& x) {
    const std::int64_t rows = x.shape.extent(0);
    const std::int64_t cols = x.shape.extent(1);
    std::vector<double> out(x.v.size());
    for (std::int64_t i = 0; i < rows; ++i) {
        std::int64_t am = 0;
        for (std::int64_t j = 1; j < cols; ++j) {
            if (x.at(i * cols + j) > x.at(i * cols + am)) am = j;
        }
        const double m = x.at(i * cols + am);
        for (std::int64_t j = 0; j < cols; ++j) {
            out[static_cast<std::size_t>(i * cols + j)] =
                j == am ? 0.0 : x.at(i * cols + j) - m;
        }
    }
    return make_dt(x.shape, std::move(out));
}

DTensor shadow_sub_rowmax_grad(const DTensor& g, const DTensor& x) {
    const std::int64_t rows = x.shape.extent(0);
    const std::int64_t cols = x.shape.extent(1);
    std::vector<double> out(g.v.begin(), g.v.end());
    for (std::int64_t i = 0; i < rows; ++i) {
        std::int64_t am = 0;
        double rowsum = 0.0;
        for (std::int64_t j = 1; j < cols; ++j) {
            if (x.at(i * cols + j) > x.at(i * cols + am)) am = j;
        }
        for (std::int64_t j = 0; j < cols; ++j) rowsum += g.at(i * cols + j);
        out[static_cast<std::size_t>(i * cols + am)] -= rowsum;
    }
    return make_dt(g.shape, std::move(out));
}

template <bool Compensated>
struct ShadowOps {
    using Tensor = DTensor;
    static DTensor widen(const PTensor& t) {
        return make_dt(t.shape(), {t.values().begin(), t.values().end()});
    }
    static DTensor ew(BinOp op, const DTensor& a, const DTensor& b) {
        return shadow_ew(op, a, b);
    }
    static DTensor un(FuncId f, const DTensor& a) { return shadow_un(f, a); }
    static DTensor mm(const DTensor& a, const DTensor& b, MatmulStrategy) {
        return shadow_mm(a, b, Compensated);
    }
    static DTensor red(ReduceOp op, const DTensor& a, int axis) {
        return shadow_red(op, a, axis, Compensated);
    }
    static DTensor resh(const DTensor& a, Shape s) {
        DTensor out = a;
        out.shape = std::move(s);
        return out;
    }
    static DTensor perm(const DTensor& a, const std::vector<int>& ax) {
        return shadow_perm(a, ax);
    }
    static DTensor im2col(const DTensor& a, const Conv2dGeom& g) {
        return shadow_im2col(a, g);
    }
    static DTensor col2im(const DTensor& a, const Conv2dGeom& g) {
        return shadow_col2im(a, g);
    }
    static DTensor gather(const DTensor& a, const std::vector<std::int64_t>& l) {
        return shadow_gather(a, l);
    }
    static DTensor scatter(const DTensor& g, const std::vector<std::int64_t>& l,
                           std::int64_t num_cols) {
        return shadow_scatter(g, l, num_cols);
    }
    static DTensor sub_rowmax(const DTensor& x) { return shadow_sub_rowmax(x); }
    static DTensor sub_rowmax_grad(const DTensor& g, const DTensor& x) {
        return shadow_sub_rowmax_grad(g, x);
    }
    static DTensor relu_grad(const DTensor& g, const DTensor& x) {
        std::vector<double> out(g.v.size(), 0.0);
        for (std::size_t i = 0; i < g.v.size(); ++i) {
            if (x.v[i] > 0.0) out[i] = g.v[i];
        }
        return make_dt(g.shape, std::move(out));
    }
    static DTensor abs_grad(const DTensor& g, const DTensor& x) {
        std::vector<double> out(g.v.size(), 0.0);
        for (std::size_t i = 0; i < g.v.size(); ++i) {
            if (x.v[i] > 0.0) out[i] = g.v[i];
            else if (x.v[i] < 0.0) out[i] = -g.v[i];
        }
        return make_dt(g.shape, std::move(out));
    }
    static DTensor max_scatter(const DTensor& g, const DTensor& x, int axis) {
        std::int64_t outer = 1, extent = x.numel(), inner = 1;
        if (axis != -1) {
            const auto rank = static_cast<int>(x.shape.rank());
            outer = inner = 1;
            for (int i = 0; i < rank; ++i) {
                const std::int64_t d = x.shape.extent(static_cast<std::size_t>(i));
                if (i < axis) outer *= d;
                if (i > axis) inner *= d;
            }
            extent = x.shape.extent(static_cast<std::size_t>(axis));
        }
        std::vector<double> out(x.v.size(), 0.0);
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * extent * inner + in;
                std::int64_t best = base;
                for (std::int64_t k = 1; k < extent; ++k) {
                    const std::int64_t idx = base + k * inner;
                    if (x.at(idx) > x.at(best)) best = idx;
                }
                out[static_cast<std::size_t>(best)] = g.at(o * inner + in);
            }
        }
        return make_dt(x.shape, std::move(out));
    }
    static DTensor reduce_to(const DTensor& g, const Shape& s) {
        return shadow_reduce_to(g, s, Compensated);
    }
    static DTensor broadcast(const DTensor& a, const Shape& s) {
        return shadow_broadcast(a, s);
    }
    static DTensor scalar(double v, Precision) {
        return make_dt(Shape{}, {v});
    }
    static const Shape& shape_of(const DTensor& t) { return t.shape; }
};

template <class Ops>
ShadowRun run_shadow(const Graph& g,
                     const std::unordered_map<NodeId, PTensor>& inputs,
                     bool with_backward) {
    typename detail::Evaluator<Ops>::ValueMap values;
    detail::Evaluator<Ops> ev(g, values);
    ev.run_forward(inputs);
    ShadowRun run;
    for (const auto& [id, handle] : values) {
        run.values.emplace(id, *handle);
    }
    if (with_backward && g.sink() >= 0 &&
        values.at(g.sink())->numel() == 1) {
        auto grads = ev.run_backward(g.sink(), [](NodeId, DTensor&) {});
        run.grads = std::move(grads);
    }
    return run;
}

}  // namespace

DTensor shadow_matmul(const DTensor& a, const DTensor& b) {
    return shadow_mm(a, b, /*compensated=*/false);
}

ShadowRun shadow_eval(const Graph& g,
                      const std::unordered_map<NodeId, PTensor>& inputs,
                      bool with_backward) {
    if (g.precision() == Precision::Single) {
        return run_shadow<ShadowOps<false>>(g, inputs, with_backward);
    }
    return run_shadow<ShadowOps<true>>(g, inputs, with_backward);
}

}  // namespace bittrace::oracle
