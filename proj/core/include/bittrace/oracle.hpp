#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "bittrace/graph.hpp"
#include "bittrace/ptensor.hpp"

namespace bittrace::oracle {

/// Plain double tensor used by shadow re-execution.
struct DTensor {
    Shape shape;
    std::vector<double> v;

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    double at(std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }
};

/// Exact bits matched between a working-precision value and a higher
/// precision shadow of the same computation:
/// clamp(floor(-log2 |x - s| / |s|), 0, max_bits).  Both zero matches fully;
/// mismatched (non-)finiteness matches nothing.
ExactBits matched_bits(double x_work, double x_shadow, Precision p);

/// Elementwise matched_bits over a tensor pair of equal element count.
std::vector<ExactBits> matched_bits(const PTensor& work, const DTensor& shadow);

/// Error-free-transformation reference arithmetic, used as the shadow for
/// double-precision working runs where plain double would be identical.
double compensated_sum(std::span<const double> xs);
double compensated_dot(std::span<const double> a, std::span<const double> b);

/// Paired outputs of a shadow re-execution: per-node values and gradients
/// computed in double with the identical schedule and summation orders.
struct ShadowRun {
    std::unordered_map<NodeId, DTensor> values;
    std::unordered_map<NodeId, DTensor> grads;
};

/// Re-executes forward (and backward when the graph has a scalar sink and
/// `with_backward` is set) in shadow arithmetic.  Inputs are widened
/// exactly.  For Single working precision the shadow is plain double; for
/// Double it upgrades reductions and dot products to compensated sums.
ShadowRun shadow_eval(const Graph& g,
                      const std::unordered_map<NodeId, PTensor>& inputs,
                      bool with_backward = true);

/// Shadow matmul with the same fixed k order as the tracked kernel.
DTensor shadow_matmul(const DTensor& a, const DTensor& b);

}  // namespace bittrace::oracle
