#pragma once

#include <cstdint>
#include <vector>

#include "bittrace/ptensor.hpp"

namespace bittrace {

/// Geometry of an im2col lowering of a [batch, channels, h, w] input with a
/// kh x kw kernel.  Column order is (channel, kh, kw); row order is
/// (batch, out_y, out_x).  The matching matmul k order therefore equals the
/// direct convolution loop order.
struct Conv2dGeom {
    std::int64_t batch = 0;
    std::int64_t channels = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t kh = 0;
    std::int64_t kw = 0;
    std::int64_t stride = 1;
    std::int64_t out_h = 0;
    std::int64_t out_w = 0;

    std::int64_t rows() const { return batch * out_h * out_w; }
    std::int64_t cols() const { return channels * kh * kw; }
};

Conv2dGeom make_conv_geom(const Shape& input, std::int64_t kh, std::int64_t kw,
                          std::int64_t stride);

/// Patch gather: [b,c,h,w] -> [rows, cols].  Pure selection, bits preserved.
PTensor im2col(const PTensor& x, const Conv2dGeom& g);

/// Adjoint of im2col: scatter-adds column gradients back onto the image.
/// Overlapping patches accumulate with tracked additions in column order.
PTensor col2im_scatter(const PTensor& cols, const Conv2dGeom& g);

/// out[i] = x[i, labels[i]] for a rank-2 x.  Selection, bits preserved.
PTensor gather_rows(const PTensor& x, const std::vector<std::int64_t>& labels);

/// Adjoint of gather_rows: zeros everywhere except [i, labels[i]] = grad[i].
PTensor scatter_rows(const PTensor& grad, const std::vector<std::int64_t>& labels,
                     std::int64_t num_cols);

/// Copy-broadcast to a larger shape (selection, bits preserved).
PTensor broadcast_to(const PTensor& a, const Shape& target);

/// Gradient of relu: g where x > 0, exact zero elsewhere (subgradient 0 at 0).
PTensor relu_grad(const PTensor& g, const PTensor& x);

/// Gradient of abs: g where x > 0, -g where x < 0, exact zero at 0.
PTensor abs_grad(const PTensor& g, const PTensor& x);

/// Adjoint of a max reduction: scatters g onto the winning index of each
/// lane (ties take the lowest index), exact zeros elsewhere.
PTensor max_grad_scatter(const PTensor& g, const PTensor& x, int axis);

/// Sums g over broadcast axes until it matches `target` (tracked reductions
/// in fixed axis order), then reshapes.  Used by elementwise backward rules.
PTensor reduce_to_shape(const PTensor& g, const Shape& target);

/// Stabilization step of log-sum-exp: out[i,j] = x[i,j] - rowmax_i for a
/// rank-2 x.  The winning position subtracts the element from itself, which
/// is exactly zero by identity and keeps full bits; other positions follow
/// the tracked subtraction rule.  Row ties take the lowest index.
PTensor sub_rowmax(const PTensor& x);

/// Adjoint of sub_rowmax: grad[i,k] = g[i,k] - [k == argmax_i] * rowsum(g_i),
/// with tracked row sums and subtraction.
PTensor sub_rowmax_grad(const PTensor& g, const PTensor& x);

}  // namespace bittrace
