#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace bittrace {

/// Dense row-major extents.  Rank 0 denotes a scalar with one element.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) {}
    explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) {}

    std::size_t rank() const { return dims_.size(); }
    std::int64_t extent(std::size_t axis) const { return dims_[axis]; }
    const std::vector<std::int64_t>& dims() const { return dims_; }

    std::int64_t numel() const;
    bool operator==(const Shape& other) const { return dims_ == other.dims_; }
    bool operator!=(const Shape& other) const { return dims_ != other.dims_; }

    std::string str() const;

private:
    std::vector<std::int64_t> dims_;
};

/// Right-aligned broadcast result shape; throws shape_error when incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

/// Row-major strides, with stride 0 on axes that are broadcast (extent 1
/// where the output extent is larger).
std::vector<std::int64_t> broadcast_strides(const Shape& from, const Shape& to);

/// Maps a flat row-major index in `to` onto a flat index in `from` using
/// precomputed broadcast strides.
class BroadcastIndexer {
public:
    BroadcastIndexer(const Shape& from, const Shape& to);
    std::int64_t operator()(std::int64_t flat) const;

private:
    std::vector<std::int64_t> out_extents_;
    std::vector<std::int64_t> strides_;
};

}  // namespace bittrace
