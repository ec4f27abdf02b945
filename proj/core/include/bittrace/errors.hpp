#pragma once

#include <stdexcept>
#include <string>

namespace bittrace {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between tensor operands.
struct shape_error : error {
    using error::error;
};

/// File and stream failures (missing file, bad magic, truncation).
struct io_error : error {
    using error::error;
};

/// Numeric contract violations (invalid domain, non-finite literal, ...).
struct numeric_error : error {
    using error::error;
};

/// Misuse of the graph protocol (backward before forward, hook registration
/// during backward, missing placeholder input).
struct graph_error : error {
    using error::error;
};

}  // namespace bittrace
