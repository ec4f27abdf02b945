#pragma once

#include <cstdint>

namespace bittrace {

/// Working floating-point precision of a computation.
enum class Precision : std::uint8_t {
    Single,  // IEEE754 binary32, 24-bit significand
    Double,  // IEEE754 binary64, 53-bit significand
};

/// Count of exact leading significand bits attached to a stored value v:
/// the true quantity x satisfies |v - x| <= |v| * 2^-e.  e = max_bits(p)
/// means exact to working precision, e = 0 means no significant bits.
using ExactBits = std::uint8_t;

/// Significand width: 24 for Single, 53 for Double.
int max_bits(Precision p);

/// Unit roundoff 2^-max_bits(p): relative bound of one round-to-nearest.
double unit_roundoff(Precision p);

/// Identifiers of the tracked unary functions.
enum class FuncId : std::uint8_t {
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sqrt,
    Neg,
    Abs,
};

const char* func_name(FuncId f);

// ---------------------------------------------------------------------------
// Bits <-> relative error.

/// clamp(floor(-log2 r), 0, max_bits).  r <= 0 maps to max_bits, NaN to 0.
ExactBits bits_from_rel(double r, Precision p);

/// 2^-e.  At e = max_bits this equals the unit roundoff, not zero, so that
/// downstream rules keep accounting for storage rounding.
double rel_from_bits(ExactBits e, Precision p);

// ---------------------------------------------------------------------------
// Scalar propagation rules.  All are total functions over finite and
// non-finite values; they never throw.

/// Bits of z = fl(x +/- y) given operand bits.  z must be the
/// working-precision sum or difference of x and y.
ExactBits combine_addsub(double x, ExactBits ex, double y, ExactBits ey,
                         double z, Precision p);

/// Bits of a product or quotient: first-order relative-error addition plus
/// one rounding.  Value-blind by design; value-aware special cases live in
/// the tensor kernels.
ExactBits combine_muldiv(ExactBits ex, ExactBits ey, Precision p);

/// Bits of f(x) by first-order conditioning: bits_from_rel(C_f(x)*2^-ex + u).
/// Copies (relu on x>0, neg, abs) preserve bits exactly.  Out-of-domain
/// arguments yield 0.
ExactBits unary_bits(FuncId f, double x, ExactBits ex, Precision p);

// ---------------------------------------------------------------------------
// Working-precision scalar evaluation.  Stored values are doubles that are
// exactly representable in the working format; Single-mode arithmetic runs
// on float so every operation rounds exactly once at 24 bits.

enum class BinOp : std::uint8_t { Add, Sub, Mul, Div };

const char* binop_name(BinOp op);

/// One correctly rounded working-precision arithmetic operation.
double eval_binary(BinOp op, double a, double b, Precision p);

/// f(x) evaluated in double and rounded once to the working format, so the
/// single-rounding model (one u per call) holds for transcendentals too.
double eval_unary(FuncId f, double x, Precision p);

/// Round an arbitrary double to the working format.
double round_to_working(double x, Precision p);

/// Condition number |x f'(x) / f(x)| used by unary_bits; +inf where the
/// function is infinitely sensitive, 0 where it is insensitive.
double condition_number(FuncId f, double x);

/// True when x is nonzero and |x| is below the smallest normal number of the
/// working format, where the relative rounding model breaks down.
bool below_normal_range(double x, Precision p);

}  // namespace bittrace
