#include "bittrace/ptensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bittrace/errors.hpp"

namespace bittrace {

namespace {

std::atomic<std::int64_t> g_live_ptensors{0};

void check_same_precision(const PTensor& a, const PTensor& b) {
    if (a.precision() != b.precision()) {
        throw numeric_error("operands have different working precisions");
    }
}

}  // namespace

PTensor::PTensor() { g_live_ptensors.fetch_add(1, std::memory_order_relaxed); }

PTensor::PTensor(const PTensor& other)
    : shape_(other.shape_), prec_(other.prec_), values_(other.values_), bits_(other.bits_) {
    g_live_ptensors.fetch_add(1, std::memory_order_relaxed);
}

PTensor::PTensor(PTensor&& other) noexcept
    : shape_(std::move(other.shape_)),
      prec_(other.prec_),
      values_(std::move(other.values_)),
      bits_(std::move(other.bits_)) {
    g_live_ptensors.fetch_add(1, std::memory_order_relaxed);
}

PTensor& PTensor::operator=(const PTensor&) = default;
PTensor& PTensor::operator=(PTensor&&) noexcept = default;

PTensor::~PTensor() { g_live_ptensors.fetch_sub(1, std::memory_order_relaxed); }

PTensor::PTensor(Shape shape, std::vector<double> values,
                 std::vector<ExactBits> bits, Precision p)
    : shape_(std::move(shape)), prec_(p), values_(std::move(values)), bits_(std::move(bits)) {
    g_live_ptensors.fetch_add(1, std::memory_order_relaxed);
}

std::int64_t PTensor::live_count() {
    return g_live_ptensors.load(std::memory_order_relaxed);
}

PTensor PTensor::exact(std::vector<double> values, Shape shape, Precision p) {
    if (shape.numel() != static_cast<std::int64_t>(values.size())) {
        throw shape_error("exact literal: " + std::to_string(values.size()) +
                          " values for shape " + shape.str());
    }
    for (double& v : values) {
        if (!std::isfinite(v)) {
            throw numeric_error("exact literal rejects non-finite elements");
        }
        v = round_to_working(v, p);
    }
    std::vector<ExactBits> bits(values.size(),
                                static_cast<ExactBits>(max_bits(p)));
    return PTensor(std::move(shape), std::move(values), std::move(bits), p);
}

PTensor PTensor::exact_scalar(double value, Precision p) {
    return exact({value}, Shape{}, p);
}

PTensor PTensor::zeros(Shape shape, Precision p) {
    std::vector<double> values(static_cast<std::size_t>(shape.numel()), 0.0);
    return exact(std::move(values), std::move(shape), p);
}

PTensor PTensor::from_parts(Shape shape, std::vector<double> values,
                            std::vector<ExactBits> bits, Precision p) {
    return PTensor(std::move(shape), std::move(values), std::move(bits), p);
}

ExactBits PTensor::min_bits() const {
    ExactBits m = static_cast<ExactBits>(max_bits(prec_));
    for (const ExactBits b : bits_) m = std::min(m, b);
    return m;
}

ExactBits PTensor::max_bits_present() const {
    ExactBits m = 0;
    for (const ExactBits b : bits_) m = std::max(m, b);
    return m;
}

double PTensor::mean_bits() const {
    if (bits_.empty()) return 0.0;
    double s = 0.0;
    for (const ExactBits b : bits_) s += b;
    return s / static_cast<double>(bits_.size());
}

PTensor PTensor::with_bits(std::vector<ExactBits> bits) const {
    if (bits.size() != bits_.size()) {
        throw shape_error("bits plane size mismatch");
    }
    return PTensor(shape_, values_, std::move(bits), prec_);
}

// ---------------------------------------------------------------------------
// Elementwise kernels.

namespace {

ExactBits mul_bits(double a, ExactBits ea, double b, ExactBits eb, double z,
                   Precision p) {
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    if (!std::isfinite(z)) return 0;
    if (z == 0.0) {
        // An exact zero factor yields an exact zero; a stored zero with
        // unknown true magnitude, or full underflow, yields nothing.
        if ((a == 0.0 && ea >= emax) || (b == 0.0 && eb >= emax)) return emax;
        return 0;
    }
    if (below_normal_range(z, p)) return 0;
    return combine_muldiv(ea, eb, p);
}

ExactBits div_bits(double a, ExactBits ea, double b, ExactBits eb, double z,
                   Precision p) {
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    if (!std::isfinite(z)) return 0;
    if (b == 0.0) return 0;
    if (z == 0.0) {
        if (a == 0.0 && ea >= emax) return emax;
        return 0;
    }
    if (below_normal_range(z, p)) return 0;
    return combine_muldiv(ea, eb, p);
}

}  // namespace

PTensor ew_binary(BinOp op, const PTensor& a, const PTensor& b) {
    check_same_precision(a, b);
    const Precision p = a.precision();
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    const std::int64_t n = out_shape.numel();
    const BroadcastIndexer ia(a.shape(), out_shape);
    const BroadcastIndexer ib(b.shape(), out_shape);

    std::vector<double> values(static_cast<std::size_t>(n));
    std::vector<ExactBits> bits(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t ja = ia(i);
        const std::int64_t jb = ib(i);
        const double x = a.value_at(ja);
        const double y = b.value_at(jb);
        const ExactBits ex = a.bits_at(ja);
        const ExactBits ey = b.bits_at(jb);
        const double z = eval_binary(op, x, y, p);
        ExactBits e = 0;
        switch (op) {
            case BinOp::Add:
            case BinOp::Sub:
                e = combine_addsub(x, ex, y, ey, z, p);
                break;
            case BinOp::Mul:
                e = mul_bits(x, ex, y, ey, z, p);
                break;
            case BinOp::Div:
                e = div_bits(x, ex, y, ey, z, p);
                break;
        }
        values[static_cast<std::size_t>(i)] = z;
        bits[static_cast<std::size_t>(i)] = e;
    }
    return PTensor::from_parts(out_shape, std::move(values), std::move(bits), p);
}

PTensor ew_unary(FuncId f, const PTensor& a) {
    const Precision p = a.precision();
    const std::int64_t n = a.numel();
    std::vector<double> values(static_cast<std::size_t>(n));
    std::vector<ExactBits> bits(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = a.value_at(i);
        values[static_cast<std::size_t>(i)] = eval_unary(f, x, p);
        bits[static_cast<std::size_t>(i)] = unary_bits(f, x, a.bits_at(i), p);
    }
    return PTensor::from_parts(a.shape(), std::move(values), std::move(bits), p);
}

PTensor add(const PTensor& a, const PTensor& b) { return ew_binary(BinOp::Add, a, b); }
PTensor sub(const PTensor& a, const PTensor& b) { return ew_binary(BinOp::Sub, a, b); }
PTensor mul(const PTensor& a, const PTensor& b) { return ew_binary(BinOp::Mul, a, b); }
PTensor div(const PTensor& a, const PTensor& b) { return ew_binary(BinOp::Div, a, b); }
PTensor relu(const PTensor& a) { return ew_unary(FuncId::Relu, a); }

// ---------------------------------------------------------------------------
// Reductions.

namespace {

struct AxisSpan {
    std::int64_t outer;   // product of extents before the axis
    std::int64_t extent;  // reduced extent
    std::int64_t inner;   // product of extents after the axis
    Shape out_shape;
};

AxisSpan resolve_axis(const PTensor& a, int axis) {
    if (axis == -1) {
        return AxisSpan{1, a.numel(), 1, Shape{}};
    }
    const auto rank = static_cast<int>(a.shape().rank());
    if (axis < 0 || axis >= rank) {
        throw shape_error("reduce axis " + std::to_string(axis) +
                          " out of range for " + a.shape().str());
    }
    std::int64_t outer = 1, inner = 1;
    std::vector<std::int64_t> out_dims;
    for (int i = 0; i < rank; ++i) {
        const std::int64_t d = a.shape().extent(static_cast<std::size_t>(i));
        if (i < axis) outer *= d;
        if (i > axis) inner *= d;
        if (i != axis) out_dims.push_back(d);
    }
    return AxisSpan{outer, a.shape().extent(static_cast<std::size_t>(axis)),
                    inner, Shape(std::move(out_dims))};
}

/// Sequential tracked sum of one lane.  Accumulates the absolute error bound
/// continuously: input uncertainty per element plus one unit roundoff per
/// genuinely rounding addition (adding to or from zero is exact).
void fold_sum(const PTensor& a, std::int64_t base, std::int64_t stride,
              std::int64_t count, Precision p, double& out_value,
              double& out_abs_err) {
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    const double u = unit_roundoff(p);
    double s = 0.0;
    double abs_err = 0.0;
    for (std::int64_t k = 0; k < count; ++k) {
        const std::int64_t idx = base + k * stride;
        const double x = a.value_at(idx);
        const ExactBits ex = a.bits_at(idx);
        if (x == 0.0 && ex < emax) {
            abs_err = std::numeric_limits<double>::infinity();
        } else {
            abs_err += std::fabs(x) * rel_from_bits(ex, p);
        }
        const double s_new = eval_binary(BinOp::Add, s, x, p);
        if (s != 0.0 && x != 0.0) abs_err += u * std::fabs(s_new);
        s = s_new;
    }
    out_value = s;
    out_abs_err = abs_err;
}

ExactBits sum_bits(double s, double abs_err, Precision p) {
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    if (!std::isfinite(s)) return 0;
    if (s == 0.0) return (abs_err == 0.0) ? emax : 0;
    return bits_from_rel(abs_err / std::fabs(s), p);
}

}  // namespace

PTensor reduce(ReduceOp op, const PTensor& a, int axis) {
    const Precision p = a.precision();
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    const AxisSpan span = resolve_axis(a, axis);
    if (span.extent == 0 && op != ReduceOp::Sum) {
        throw numeric_error("empty reduction is only defined for sum");
    }

    const std::int64_t out_n = span.outer * span.inner;
    std::vector<double> values(static_cast<std::size_t>(out_n));
    std::vector<ExactBits> bits(static_cast<std::size_t>(out_n));

    for (std::int64_t o = 0; o < span.outer; ++o) {
        for (std::int64_t in = 0; in < span.inner; ++in) {
            const std::int64_t base = o * span.extent * span.inner + in;
            const std::int64_t out_idx = o * span.inner + in;
            switch (op) {
                case ReduceOp::Sum: {
                    double v = 0.0, abs_err = 0.0;
                    fold_sum(a, base, span.inner, span.extent, p, v, abs_err);
                    values[static_cast<std::size_t>(out_idx)] = v;
                    bits[static_cast<std::size_t>(out_idx)] = sum_bits(v, abs_err, p);
                    break;
                }
                case ReduceOp::Mean: {
                    double s = 0.0, abs_err = 0.0;
                    fold_sum(a, base, span.inner, span.extent, p, s, abs_err);
                    // Dividing by the exact element count adds the count's
                    // stored-input roundoff plus one division rounding.
                    const double u = unit_roundoff(p);
                    const double count = static_cast<double>(span.extent);
                    const double m = eval_binary(BinOp::Div, s, count, p);
                    ExactBits em;
                    if (!std::isfinite(m)) {
                        em = 0;
                    } else if (m == 0.0) {
                        em = (abs_err == 0.0) ? emax : 0;
                    } else {
                        const double rel_m = abs_err / std::fabs(s) + 2.0 * u;
                        em = bits_from_rel(rel_m, p);
                    }
                    values[static_cast<std::size_t>(out_idx)] = m;
                    bits[static_cast<std::size_t>(out_idx)] = em;
                    break;
                }
                case ReduceOp::Max: {
                    std::int64_t best = base;
                    for (std::int64_t k = 1; k < span.extent; ++k) {
                        const std::int64_t idx = base + k * span.inner;
                        if (a.value_at(idx) > a.value_at(best)) best = idx;
                    }
                    const double v = a.value_at(best);
                    values[static_cast<std::size_t>(out_idx)] = v;
                    bits[static_cast<std::size_t>(out_idx)] =
                        std::isnan(v) ? ExactBits{0} : a.bits_at(best);
                    break;
                }
            }
        }
    }
    return PTensor::from_parts(span.out_shape, std::move(values), std::move(bits), p);
}

// ---------------------------------------------------------------------------
// Layout operations.

PTensor reshape(const PTensor& a, Shape shape) {
    if (shape.numel() != a.numel()) {
        throw shape_error("reshape " + a.shape().str() + " -> " + shape.str() +
                          " changes element count");
    }
    return PTensor::from_parts(std::move(shape),
                               {a.values().begin(), a.values().end()},
                               {a.bits().begin(), a.bits().end()}, a.precision());
}

PTensor permute(const PTensor& a, const std::vector<int>& axes) {
    const std::size_t rank = a.shape().rank();
    if (axes.size() != rank) {
        throw shape_error("permute expects one axis index per dimension");
    }
    std::vector<bool> seen(rank, false);
    std::vector<std::int64_t> out_dims(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const int ax = axes[i];
        if (ax < 0 || static_cast<std::size_t>(ax) >= rank || seen[static_cast<std::size_t>(ax)]) {
            throw shape_error("permute axes are not a permutation");
        }
        seen[static_cast<std::size_t>(ax)] = true;
        out_dims[i] = a.shape().extent(static_cast<std::size_t>(ax));
    }
    const Shape out_shape{std::vector<std::int64_t>(out_dims)};

    std::vector<std::int64_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * a.shape().extent(i);
    }

    const std::int64_t n = a.numel();
    std::vector<double> values(static_cast<std::size_t>(n));
    std::vector<ExactBits> bits(static_cast<std::size_t>(n));
    std::vector<std::int64_t> coord(rank, 0);
    for (std::int64_t flat = 0; flat < n; ++flat) {
        std::int64_t rem = flat;
        std::int64_t src = 0;
        for (std::size_t i = rank; i-- > 0;) {
            coord[i] = rem % out_dims[i];
            rem /= out_dims[i];
        }
        for (std::size_t i = 0; i < rank; ++i) {
            src += coord[i] * in_strides[static_cast<std::size_t>(axes[i])];
        }
        values[static_cast<std::size_t>(flat)] = a.value_at(src);
        bits[static_cast<std::size_t>(flat)] = a.bits_at(src);
    }
    return PTensor::from_parts(out_shape, std::move(values), std::move(bits), a.precision());
}

PTensor transpose2d(const PTensor& a) {
    if (a.shape().rank() != 2) {
        throw shape_error("transpose2d expects a rank-2 tensor, got " + a.shape().str());
    }
    return permute(a, {1, 0});
}

}  // namespace bittrace
