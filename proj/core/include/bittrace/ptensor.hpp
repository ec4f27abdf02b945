#pragma once

#include <atomic>
#include <cstdint>
#include <span>
#include <vector>

#include "bittrace/precision.hpp"
#include "bittrace/shape.hpp"

namespace bittrace {

/// Dense floating-point tensor paired with a same-shape uint8 tensor of
/// exact leading significand bits.  Values are stored as doubles that are
/// always exactly representable in the working precision; Single-mode
/// arithmetic therefore reproduces float32 results bit for bit.
///
/// Instances are immutable once built through the public operations and are
/// safe to share across threads for reading.
class PTensor {
public:
    PTensor();
    PTensor(const PTensor&);
    PTensor(PTensor&&) noexcept;
    PTensor& operator=(const PTensor&);
    PTensor& operator=(PTensor&&) noexcept;
    ~PTensor();

    /// Builds a tensor whose stored (working-precision rounded) values are
    /// declared ground truth: bits = max_bits everywhere.  Rejects non-finite
    /// elements and count/shape mismatches.
    static PTensor exact(std::vector<double> values, Shape shape,
                         Precision p = Precision::Single);

    /// Scalar convenience wrapper around exact().
    static PTensor exact_scalar(double value, Precision p = Precision::Single);

    /// All-zero tensor, exact.
    static PTensor zeros(Shape shape, Precision p = Precision::Single);

    /// Internal constructor for kernels: takes buffers as-is (values must
    /// already be working-precision representable).
    static PTensor from_parts(Shape shape, std::vector<double> values,
                              std::vector<ExactBits> bits, Precision p);

    const Shape& shape() const { return shape_; }
    Precision precision() const { return prec_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(values_.size()); }

    std::span<const double> values() const { return values_; }
    std::span<const ExactBits> bits() const { return bits_; }

    double value_at(std::int64_t i) const { return values_[static_cast<std::size_t>(i)]; }
    ExactBits bits_at(std::int64_t i) const { return bits_[static_cast<std::size_t>(i)]; }

    ExactBits min_bits() const;
    ExactBits max_bits_present() const;
    double mean_bits() const;

    /// Replaces the bits plane (used by hooks installing gradient bits).
    PTensor with_bits(std::vector<ExactBits> bits) const;

    /// Count of live PTensor instances; used by leak checks around
    /// forward/backward cycles.
    static std::int64_t live_count();

private:
    PTensor(Shape shape, std::vector<double> values,
            std::vector<ExactBits> bits, Precision p);

    Shape shape_;
    Precision prec_ = Precision::Single;
    std::vector<double> values_;
    std::vector<ExactBits> bits_;
};

// ---------------------------------------------------------------------------
// Elementwise operations with right-aligned broadcasting.  Values are
// computed in working precision; bits follow the scalar propagation rules
// plus value-aware handling of exact zeros and of non-finite or subnormal
// results (which get 0 bits).

PTensor ew_binary(BinOp op, const PTensor& a, const PTensor& b);
PTensor ew_unary(FuncId f, const PTensor& a);

PTensor add(const PTensor& a, const PTensor& b);
PTensor sub(const PTensor& a, const PTensor& b);
PTensor mul(const PTensor& a, const PTensor& b);
PTensor div(const PTensor& a, const PTensor& b);
PTensor relu(const PTensor& a);

// ---------------------------------------------------------------------------
// Reductions.  Strictly sequential left-to-right folds in row-major index
// order; the error bound is accumulated continuously in the absolute-error
// domain and floored to bits once at the end, mirroring the per-operation
// counting used by tracked matrix multiplication.

enum class ReduceOp : std::uint8_t { Sum, Mean, Max };

/// Reduce along one axis (the axis disappears from the shape), or pass
/// axis = -1 to reduce all elements to a scalar.
PTensor reduce(ReduceOp op, const PTensor& a, int axis);

// ---------------------------------------------------------------------------
// Layout operations (pure element selection; bits are carried unchanged).

PTensor reshape(const PTensor& a, Shape shape);
PTensor permute(const PTensor& a, const std::vector<int>& axes);
PTensor transpose2d(const PTensor& a);

}  // namespace bittrace
