#pragma once

#include "bittrace/ptensor.hpp"

namespace bittrace {

/// Precision-estimation strategy for matrix products.
///
/// Rigorous counts the error of every scalar operation along the same
/// fixed-k summation order as the value computation.  TropicalBound derives
/// one aggregate magnitude bound per output element from |a| and |b| with
/// fast inner floating-point arithmetic; it is cheaper and never materially
/// tighter than Rigorous.
enum class MatmulStrategy : std::uint8_t { Rigorous, TropicalBound };

const char* strategy_name(MatmulStrategy s);

/// C[m,n] = A[m,k] x B[k,n] with sequential dot products (fixed k order) and
/// per-element exact-bit estimates under the chosen strategy.
PTensor matmul(const PTensor& a, const PTensor& b, MatmulStrategy s);

/// Magnitude aggregate M[i,j] = sum_k |a_ik| |b_kj| used by TropicalBound.
/// Operands must be non-negative; computed in working precision.
PTensor tropical_abs_product(const PTensor& a_abs, const PTensor& b_abs);

}  // namespace bittrace
