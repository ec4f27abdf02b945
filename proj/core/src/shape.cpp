#include "bittrace/shape.hpp"

#include <algorithm>
#include <sstream>

#include "bittrace/errors.hpp"

namespace bittrace {

std::int64_t Shape::numel() const {
    std::int64_t n = 1;
    for (const std::int64_t d : dims_) n *= d;
    return n;
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << ',';
        os << dims_[i];
    }
    os << ']';
    return os.str();
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.rank(), b.rank());
    std::vector<std::int64_t> out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::int64_t da =
            i < a.rank() ? a.extent(a.rank() - 1 - i) : 1;
        const std::int64_t db =
            i < b.rank() ? b.extent(b.rank() - 1 - i) : 1;
        if (da != db && da != 1 && db != 1) {
            throw shape_error("broadcast mismatch: " + a.str() + " vs " + b.str());
        }
        out[rank - 1 - i] = std::max(da, db);
    }
    return Shape(std::move(out));
}

std::vector<std::int64_t> broadcast_strides(const Shape& from, const Shape& to) {
    const std::size_t rank = to.rank();
    std::vector<std::int64_t> strides(rank, 0);
    std::int64_t acc = 1;
    // Row-major strides of `from`, right-aligned into `to`, zeroed where
    // the source extent is 1 and the target extent is larger.
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t to_axis = rank - 1 - i;
        if (i < from.rank()) {
            const std::int64_t df = from.extent(from.rank() - 1 - i);
            const std::int64_t dt = to.extent(to_axis);
            if (df == dt) {
                strides[to_axis] = acc;
            } else if (df == 1) {
                strides[to_axis] = 0;
            } else {
                throw shape_error("broadcast mismatch: " + from.str() + " vs " +
                                  to.str());
            }
            acc *= df;
        } else {
            strides[to_axis] = 0;
        }
    }
    return strides;
}

BroadcastIndexer::BroadcastIndexer(const Shape& from, const Shape& to)
    : out_extents_(to.dims()), strides_(broadcast_strides(from, to)) {}

std::int64_t BroadcastIndexer::operator()(std::int64_t flat) const {
    std::int64_t src = 0;
    for (std::size_t i = out_extents_.size(); i-- > 0;) {
        const std::int64_t d = out_extents_[i];
        const std::int64_t coord = flat % d;
        flat /= d;
        src += coord * strides_[i];
    }
    return src;
}

}  // namespace bittrace
