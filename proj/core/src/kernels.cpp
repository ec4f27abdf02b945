#include "bittrace/kernels.hpp"

#include <cmath>
#include <string>

#include "bittrace/errors.hpp"

namespace bittrace {

Conv2dGeom make_conv_geom(const Shape& input, std::int64_t kh, std::int64_t kw,
                          std::int64_t stride) {
    if (input.rank() != 4) {
        throw shape_error("conv input must be [batch,channels,h,w], got " + input.str());
    }
    if (stride < 1 || kh < 1 || kw < 1) {
        throw shape_error("conv kernel and stride must be positive");
    }
    Conv2dGeom g;
    g.batch = input.extent(0);
    g.channels = input.extent(1);
    g.height = input.extent(2);
    g.width = input.extent(3);
    g.kh = kh;
    g.kw = kw;
    g.stride = stride;
    if (g.height < kh || g.width < kw) {
        throw shape_error("conv kernel larger than input " + input.str());
    }
    g.out_h = (g.height - kh) / stride + 1;
    g.out_w = (g.width - kw) / stride + 1;
    return g;
}

PTensor im2col(const PTensor& x, const Conv2dGeom& g) {
    const std::int64_t rows = g.rows();
    const std::int64_t cols = g.cols();
    std::vector<double> values(static_cast<std::size_t>(rows * cols));
    std::vector<ExactBits> bits(static_cast<std::size_t>(rows * cols));
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
                            const std::int64_t src =
                                ((b * g.channels + ch) * g.height + y) * g.width + xx;
                            const std::int64_t dst = r * cols + c;
                            values[static_cast<std::size_t>(dst)] = x.value_at(src);
                            bits[static_cast<std::size_t>(dst)] = x.bits_at(src);
                        }
                    }
                }
            }
        }
    }
    return PTensor::from_parts(Shape{rows, cols}, std::move(values), std::move(bits),
                               x.precision());
}

PTensor col2im_scatter(const PTensor& cols, const Conv2dGeom& g) {
    const Precision p = cols.precision();
    const std::int64_t n = g.batch * g.channels * g.height * g.width;
    std::vector<double> values(static_cast<std::size_t>(n), 0.0);
    std::vector<ExactBits> bits(static_cast<std::size_t>(n),
                                static_cast<ExactBits>(max_bits(p)));
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
                            const std::size_t dst = static_cast<std::size_t>(
                                ((b * g.channels + ch) * g.height + y) * g.width + xx);
                            const std::int64_t src = r * g.cols() + c;
                            const double v = cols.value_at(src);
                            const ExactBits ev = cols.bits_at(src);
                            const double cur = values[dst];
                            const ExactBits ecur = bits[dst];
                            const double z = eval_binary(BinOp::Add, cur, v, p);
                            bits[dst] = combine_addsub(cur, ecur, v, ev, z, p);
                            values[dst] = z;
                        }
                    }
                }
            }
        }
    }
    return PTensor::from_parts(Shape{g.batch, g.channels, g.height, g.width},
                               std::move(values), std::move(bits), p);
}

PTensor gather_rows(const PTensor& x, const std::vector<std::int64_t>& labels) {
    if (x.shape().rank() != 2) {
        throw shape_error("gather_rows expects a rank-2 tensor, got " + x.shape().str());
    }
    const std::int64_t rows = x.shape().extent(0);
    const std::int64_t cols = x.shape().extent(1);
    if (static_cast<std::int64_t>(labels.size()) != rows) {
        throw shape_error("gather_rows: one label per row required");
    }
    std::vector<double> values(static_cast<std::size_t>(rows));
    std::vector<ExactBits> bits(static_cast<std::size_t>(rows));
    for (std::int64_t i = 0; i < rows; ++i) {
        const std::int64_t l = labels[static_cast<std::size_t>(i)];
        if (l < 0 || l >= cols) {
            throw numeric_error("label " + std::to_string(l) + " out of range [0," +
                                std::to_string(cols) + ") at row " + std::to_string(i));
        }
        values[static_cast<std::size_t>(i)] = x.value_at(i * cols + l);
        bits[static_cast<std::size_t>(i)] = x.bits_at(i * cols + l);
    }
    return PTensor::from_parts(Shape{rows}, std::move(values), std::move(bits),
                               x.precision());
}

PTensor scatter_rows(const PTensor& grad, const std::vector<std::int64_t>& labels,
                     std::int64_t num_cols) {
    const std::int64_t rows = grad.numel();
    const Precision p = grad.precision();
    std::vector<double> values(static_cast<std::size_t>(rows * num_cols), 0.0);
    std::vector<ExactBits> bits(static_cast<std::size_t>(rows * num_cols),
                                static_cast<ExactBits>(max_bits(p)));
    for (std::int64_t i = 0; i < rows; ++i) {
        const std::int64_t l = labels[static_cast<std::size_t>(i)];
        values[static_cast<std::size_t>(i * num_cols + l)] = grad.value_at(i);
        bits[static_cast<std::size_t>(i * num_cols + l)] = grad.bits_at(i);
    }
    return PTensor::from_parts(Shape{rows, num_cols}, std::move(values),
                               std::move(bits), p);
}

PTensor broadcast_to(const PTensor& a, const Shape& target) {
    const BroadcastIndexer idx(a.shape(), target);
    const std::int64_t n = target.numel();
    std::vector<double> values(static_cast<std::size_t>(n));
    std::vector<ExactBits> bits(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t j = idx(i);
        values[static_cast<std::size_t>(i)] = a.value_at(j);
        bits[static_cast<std::size_t>(i)] = a.bits_at(j);
    }
    return PTensor::from_parts(target, std::move(values), std::move(bits),
                               a.precision());
}

PTensor relu_grad(const PTensor& g, const PTensor& x) {
    const std::int64_t n = g.numel();
    const ExactBits emax = static_cast<ExactBits>(max_bits(g.precision()));
    std::vector<double> values(static_cast<std::size_t>(n), 0.0);
    std::vector<ExactBits> bits(static_cast<std::size_t>(n), emax);
    for (std::int64_t i = 0; i < n; ++i) {
        if (x.value_at(i) > 0.0) {
            values[static_cast<std::size_t>(i)] = g.value_at(i);
            bits[static_cast<std::size_t>(i)] = g.bits_at(i);
        }
    }
    return PTensor::from_parts(g.shape(), std::move(values), std::move(bits),
                               g.precision());
}

PTensor abs_grad(const PTensor& g, const PTensor& x) {
    const std::int64_t n = g.numel();
    const ExactBits emax = static_cast<ExactBits>(max_bits(g.precision()));
    std::vector<double> values(static_cast<std::size_t>(n), 0.0);
    std::vector<ExactBits> bits(static_cast<std::size_t>(n), emax);
    for (std::int64_t i = 0; i < n; ++i) {
        const double xv = x.value_at(i);
        if (xv > 0.0) {
            values[static_cast<std::size_t>(i)] = g.value_at(i);
            bits[static_cast<std::size_t>(i)] = g.bits_at(i);
        } else if (xv < 0.0) {
            values[static_cast<std::size_t>(i)] = -g.value_at(i);
            bits[static_cast<std::size_t>(i)] = g.bits_at(i);
        }
    }
    return PTensor::from_parts(g.shape(), std::move(values), std::move(bits),
                               g.precision());
}

PTensor max_grad_scatter(const PTensor& g, const PTensor& x, int axis) {
    const Precision p = g.precision();
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    const std::int64_t n = x.numel();
    std::vector<double> values(static_cast<std::size_t>(n), 0.0);
    std::vector<ExactBits> bits(static_cast<std::size_t>(n), emax);

    std::int64_t outer = 1, extent = n, inner = 1;
    if (axis != -1) {
        const auto rank = static_cast<int>(x.shape().rank());
        if (axis < 0 || axis >= rank) throw shape_error("max grad: bad axis");
        outer = 1;
        inner = 1;
        for (int i = 0; i < rank; ++i) {
            const std::int64_t d = x.shape().extent(static_cast<std::size_t>(i));
            if (i < axis) outer *= d;
            if (i > axis) inner *= d;
        }
        extent = x.shape().extent(static_cast<std::size_t>(axis));
    }
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * extent * inner + in;
            std::int64_t best = base;
            for (std::int64_t k = 1; k < extent; ++k) {
                const std::int64_t idx = base + k * inner;
                if (x.value_at(idx) > x.value_at(best)) best = idx;
            }
            const std::int64_t gi = o * inner + in;
            values[static_cast<std::size_t>(best)] = g.value_at(gi);
            bits[static_cast<std::size_t>(best)] = g.bits_at(gi);
        }
    }
    return PTensor::from_parts(x.shape(), std::move(values), std::move(bits), p);
}

PTensor sub_rowmax(const PTensor& x) {
    if (x.shape().rank() != 2) {
        throw shape_error("sub_rowmax expects a rank-2 tensor, got " + x.shape().str());
    }
    const Precision p = x.precision();
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    const std::int64_t rows = x.shape().extent(0);
    const std::int64_t cols = x.shape().extent(1);
    std::vector<double> values(static_cast<std::size_t>(rows * cols));
    std::vector<ExactBits> bits(static_cast<std::size_t>(rows * cols));
    for (std::int64_t i = 0; i < rows; ++i) {
        std::int64_t am = 0;
        for (std::int64_t j = 1; j < cols; ++j) {
            if (x.value_at(i * cols + j) > x.value_at(i * cols + am)) am = j;
        }
        const double m = x.value_at(i * cols + am);
        const ExactBits em = x.bits_at(i * cols + am);
        for (std::int64_t j = 0; j < cols; ++j) {
            const std::size_t out = static_cast<std::size_t>(i * cols + j);
            if (j == am) {
                values[out] = 0.0;
                bits[out] = emax;
                continue;
            }
            const double v = x.value_at(i * cols + j);
            const double z = eval_binary(BinOp::Sub, v, m, p);
            values[out] = z;
            bits[out] = combine_addsub(v, x.bits_at(i * cols + j), -m, em, z, p);
        }
    }
    return PTensor::from_parts(x.shape(), std::move(values), std::move(bits), p);
}

PTensor sub_rowmax_grad(const PTensor& g, const PTensor& x) {
    const Precision p = g.precision();
    const std::int64_t rows = x.shape().extent(0);
    const std::int64_t cols = x.shape().extent(1);
    PTensor rowsum = reduce(ReduceOp::Sum, g, 1);  // [rows]
    std::vector<double> values(g.values().begin(), g.values().end());
    std::vector<ExactBits> bits(g.bits().begin(), g.bits().end());
    for (std::int64_t i = 0; i < rows; ++i) {
        std::int64_t am = 0;
        for (std::int64_t j = 1; j < cols; ++j) {
            if (x.value_at(i * cols + j) > x.value_at(i * cols + am)) am = j;
        }
        const std::size_t at = static_cast<std::size_t>(i * cols + am);
        const double z = eval_binary(BinOp::Sub, values[at], rowsum.value_at(i), p);
        bits[at] = combine_addsub(values[at], bits[at], -rowsum.value_at(i),
                                  rowsum.bits_at(i), z, p);
        values[at] = z;
    }
    return PTensor::from_parts(g.shape(), std::move(values), std::move(bits), p);
}

PTensor reduce_to_shape(const PTensor& g, const Shape& target) {
    PTensor cur = g;
    // Collapse leading axes the target does not have.
    while (cur.shape().rank() > target.rank()) {
        cur = reduce(ReduceOp::Sum, cur, 0);
    }
    // Collapse axes broadcast from extent 1.
    for (std::size_t i = 0; i < target.rank(); ++i) {
        if (target.extent(i) == 1 && cur.shape().extent(i) != 1) {
            PTensor summed = reduce(ReduceOp::Sum, cur, static_cast<int>(i));
            std::vector<std::int64_t> dims = summed.shape().dims();
            dims.insert(dims.begin() + static_cast<std::ptrdiff_t>(i), 1);
            cur = reshape(summed, Shape(std::move(dims)));
        }
    }
    if (cur.shape() != target) {
        cur = reshape(cur, target);
    }
    return cur;
}

}  // namespace bittrace
