#include "bittrace/precision.hpp"

#include <cmath>
#include <limits>

namespace bittrace {

int max_bits(Precision p) {
    return p == Precision::Single ? 24 : 53;
}

double unit_roundoff(Precision p) {
    return std::ldexp(1.0, -max_bits(p));
}

const char* func_name(FuncId f) {
    switch (f) {
        case FuncId::Relu: return "relu";
        case FuncId::Exp: return "exp";
        case FuncId::Log: return "log";
        case FuncId::Tanh: return "tanh";
        case FuncId::Sigmoid: return "sigmoid";
        case FuncId::Sqrt: return "sqrt";
        case FuncId::Neg: return "neg";
        case FuncId::Abs: return "abs";
    }
    return "?";
}

const char* binop_name(BinOp op) {
    switch (op) {
        case BinOp::Add: return "add";
        case BinOp::Sub: return "sub";
        case BinOp::Mul: return "mul";
        case BinOp::Div: return "div";
    }
    return "?";
}

ExactBits bits_from_rel(double r, Precision p) {
    if (std::isnan(r)) return 0;
    const int emax = max_bits(p);
    if (r <= 0.0) return static_cast<ExactBits>(emax);
    if (std::isinf(r)) return 0;
    // floor(-log2 r) computed exactly from the binary exponent: with
    // r = m * 2^k, m in [0.5, 1), the floor is 1-k when m == 0.5 and -k
    // otherwise.  Avoids log() rounding at power-of-two boundaries.
    int k = 0;
    const double m = std::frexp(r, &k);
    const int bits = (m == 0.5) ? (1 - k) : (-k);
    if (bits <= 0) return 0;
    if (bits >= emax) return static_cast<ExactBits>(emax);
    return static_cast<ExactBits>(bits);
}

double rel_from_bits(ExactBits e, Precision p) {
    const int emax = max_bits(p);
    const int clamped = e > emax ? emax : e;
    return std::ldexp(1.0, -clamped);
}

ExactBits combine_addsub(double x, ExactBits ex, double y, ExactBits ey,
                         double z, Precision p) {
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    if (!std::isfinite(z)) return 0;
    // Adding an exact zero is an exact copy of the other operand.
    if (y == 0.0 && ey >= emax) return ex > emax ? emax : ex;
    if (x == 0.0 && ex >= emax) return ey > emax ? emax : ey;
    // A stored zero with fewer than full bits carries an unknown true
    // magnitude; the relative model cannot bound the result.
    if (x == 0.0 && ex < emax) return 0;
    if (y == 0.0 && ey < emax) return 0;
    if (z == 0.0) return (ex >= emax && ey >= emax) ? emax : 0;
    const double rel = (std::fabs(x) * rel_from_bits(ex, p) +
                        std::fabs(y) * rel_from_bits(ey, p)) /
                           std::fabs(z) +
                       unit_roundoff(p);
    return bits_from_rel(rel, p);
}

ExactBits combine_muldiv(ExactBits ex, ExactBits ey, Precision p) {
    const double rel = rel_from_bits(ex, p) + rel_from_bits(ey, p) +
                       unit_roundoff(p);
    return bits_from_rel(rel, p);
}

double condition_number(FuncId f, double x) {
    switch (f) {
        case FuncId::Relu:
        case FuncId::Neg:
        case FuncId::Abs:
            return 1.0;  // copies; handled exactly in unary_bits
        case FuncId::Exp:
            return std::fabs(x);
        case FuncId::Log: {
            const double l = std::log(std::fabs(x));
            if (l == 0.0) return std::numeric_limits<double>::infinity();
            return 1.0 / std::fabs(l);
        }
        case FuncId::Tanh: {
            if (x == 0.0) return 1.0;  // limit of x(1-t^2)/t as x -> 0
            const double t = std::tanh(x);
            if (t == 0.0) return std::numeric_limits<double>::infinity();
            return std::fabs(x * (1.0 - t * t) / t);
        }
        case FuncId::Sigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return std::fabs(x) * (1.0 - s);
        }
        case FuncId::Sqrt:
            return 0.5;
    }
    return std::numeric_limits<double>::infinity();
}

double round_to_working(double x, Precision p) {
    if (p == Precision::Single) return static_cast<double>(static_cast<float>(x));
    return x;
}

double eval_binary(BinOp op, double a, double b, Precision p) {
    if (p == Precision::Single) {
        const float fa = static_cast<float>(a);
        const float fb = static_cast<float>(b);
        float r = 0.0f;
        switch (op) {
            case BinOp::Add: r = fa + fb; break;
            case BinOp::Sub: r = fa - fb; break;
            case BinOp::Mul: r = fa * fb; break;
            case BinOp::Div: r = fa / fb; break;
        }
        return static_cast<double>(r);
    }
    switch (op) {
        case BinOp::Add: return a + b;
        case BinOp::Sub: return a - b;
        case BinOp::Mul: return a * b;
        case BinOp::Div: return a / b;
    }
    return std::numeric_limits<double>::quiet_NaN();
}

double eval_unary(FuncId f, double x, Precision p) {
    double r = 0.0;
    switch (f) {
        case FuncId::Relu: return x > 0.0 ? x : 0.0;          // exact
        case FuncId::Neg: return -x;                          // exact
        case FuncId::Abs: return std::fabs(x);                // exact
        case FuncId::Exp: r = std::exp(x); break;
        case FuncId::Log: r = std::log(x); break;
        case FuncId::Tanh: r = std::tanh(x); break;
        case FuncId::Sigmoid: r = 1.0 / (1.0 + std::exp(-x)); break;
        case FuncId::Sqrt: r = std::sqrt(x); break;
    }
    return round_to_working(r, p);
}

bool below_normal_range(double x, Precision p) {
    if (x == 0.0 || !std::isfinite(x)) return false;
    const double min_normal = p == Precision::Single
                                  ? static_cast<double>(std::numeric_limits<float>::min())
                                  : std::numeric_limits<double>::min();
    return std::fabs(x) < min_normal;
}

ExactBits unary_bits(FuncId f, double x, ExactBits ex, Precision p) {
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    if (ex > emax) ex = emax;
    if (std::isnan(x)) return 0;
    switch (f) {
        case FuncId::Relu:
            // Negative input maps to an exact zero; zero keeps the input's
            // bits; positive input is copied without rounding.
            if (x < 0.0) return emax;
            return ex;
        case FuncId::Neg:
        case FuncId::Abs:
            return ex;  // sign operations are exact in IEEE754
        case FuncId::Log:
            if (x <= 0.0) return 0;
            break;
        case FuncId::Sqrt:
            if (x < 0.0) return 0;
            break;
        case FuncId::Tanh:
            if (x == 0.0) return ex;  // exact zero output for exact zero input
            break;
        default:
            break;
    }
    const double z = eval_unary(f, x, p);
    if (!std::isfinite(z)) return 0;
    // exp/sigmoid/tanh never reach zero in exact arithmetic; a zero or
    // subnormal result means underflow and the relative bound is void.
    if ((f == FuncId::Exp || f == FuncId::Sigmoid || f == FuncId::Tanh) &&
        (z == 0.0 || below_normal_range(z, p))) {
        return 0;
    }
    const double rel =
        condition_number(f, x) * rel_from_bits(ex, p) + unit_roundoff(p);
    return bits_from_rel(rel, p);
}

}  // namespace bittrace
