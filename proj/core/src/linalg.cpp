#include "bittrace/linalg.hpp"

#include <cmath>
#include <limits>

#include "bittrace/errors.hpp"

namespace bittrace {

namespace {

void check_matmul_shapes(const PTensor& a, const PTensor& b) {
    if (a.shape().rank() != 2 || b.shape().rank() != 2) {
        throw shape_error("matmul expects rank-2 operands, got " +
                          a.shape().str() + " and " + b.shape().str());
    }
    if (a.shape().extent(1) != b.shape().extent(0)) {
        throw shape_error("matmul inner dimensions disagree: " +
                          a.shape().str() + " x " + b.shape().str());
    }
    if (a.precision() != b.precision()) {
        throw numeric_error("matmul operands have different working precisions");
    }
}

ExactBits bits_from_bound(double c, double abs_err, Precision p) {
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    if (!std::isfinite(c)) return 0;
    if (c == 0.0) return abs_err == 0.0 ? emax : 0;
    return bits_from_rel(abs_err / std::fabs(c), p);
}

}  // namespace

const char* strategy_name(MatmulStrategy s) {
    return s == MatmulStrategy::Rigorous ? "rigorous" : "tropical-bound";
}

PTensor matmul(const PTensor& a, const PTensor& b, MatmulStrategy s) {
    check_matmul_shapes(a, b);
    const Precision p = a.precision();
    const ExactBits emax = static_cast<ExactBits>(max_bits(p));
    const double u = unit_roundoff(p);
    const std::int64_t m = a.shape().extent(0);
    const std::int64_t kk = a.shape().extent(1);
    const std::int64_t n = b.shape().extent(1);

    std::vector<double> values(static_cast<std::size_t>(m * n));
    std::vector<ExactBits> bits(static_cast<std::size_t>(m * n), 0);

    // Values: plain sequential dot products, identical for both strategies.
    // Rigorous also accumulates the absolute error bound alongside.
    std::vector<double> abs_err;
    if (s == MatmulStrategy::Rigorous) {
        abs_err.assign(static_cast<std::size_t>(m * n), 0.0);
    }

    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            double err = 0.0;
            for (std::int64_t k = 0; k < kk; ++k) {
                const std::int64_t ia = i * kk + k;
                const std::int64_t ib = k * n + j;
                const double x = a.value_at(ia);
                const double y = b.value_at(ib);
                const ExactBits ex = a.bits_at(ia);
                const ExactBits ey = b.bits_at(ib);
                const double prod = eval_binary(BinOp::Mul, x, y, p);

                if (s == MatmulStrategy::Rigorous) {
                    if (x == 0.0 || y == 0.0) {
                        // Zero factors give an exact zero product -- unless a
                        // stored zero hides an unknown true magnitude.
                        if ((x == 0.0 && ex < emax) || (y == 0.0 && ey < emax)) {
                            err = std::numeric_limits<double>::infinity();
                        }
                    } else if ((x == 1.0 || x == -1.0) && ex >= emax) {
                        // Multiplying by an exact unit copies y.
                        err += std::fabs(y) * rel_from_bits(ey, p);
                    } else if ((y == 1.0 || y == -1.0) && ey >= emax) {
                        err += std::fabs(x) * rel_from_bits(ex, p);
                    } else {
                        err += std::fabs(x) * std::fabs(y) *
                               (rel_from_bits(ex, p) + rel_from_bits(ey, p) + u);
                    }
                }

                const double acc_new = eval_binary(BinOp::Add, acc, prod, p);
                if (s == MatmulStrategy::Rigorous && acc != 0.0 && prod != 0.0) {
                    err += u * std::fabs(acc_new);  // one rounding per real add
                }
                acc = acc_new;
            }
            const std::size_t out = static_cast<std::size_t>(i * n + j);
            values[out] = acc;
            if (s == MatmulStrategy::Rigorous) abs_err[out] = err;
        }
    }

    if (s == MatmulStrategy::Rigorous) {
        for (std::size_t idx = 0; idx < values.size(); ++idx) {
            bits[idx] = bits_from_bound(values[idx], abs_err[idx], p);
        }
    } else {
        // Aggregate magnitudes with fast working-precision arithmetic.
        std::vector<double> agg(static_cast<std::size_t>(m * n), 0.0);
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < kk; ++k) {
                    const double prod = eval_binary(
                        BinOp::Mul, std::fabs(a.value_at(i * kk + k)),
                        std::fabs(b.value_at(k * n + j)), p);
                    acc = eval_binary(BinOp::Add, acc, prod, p);
                }
                agg[static_cast<std::size_t>(i * n + j)] = acc;
            }
        }
        // Row minima of a's bits and column minima of b's bits.
        std::vector<ExactBits> row_min(static_cast<std::size_t>(m), emax);
        std::vector<ExactBits> col_min(static_cast<std::size_t>(n), emax);
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t k = 0; k < kk; ++k) {
                row_min[static_cast<std::size_t>(i)] = std::min(
                    row_min[static_cast<std::size_t>(i)], a.bits_at(i * kk + k));
            }
        }
        for (std::int64_t k = 0; k < kk; ++k) {
            for (std::int64_t j = 0; j < n; ++j) {
                col_min[static_cast<std::size_t>(j)] = std::min(
                    col_min[static_cast<std::size_t>(j)], b.bits_at(k * n + j));
            }
        }
        const double ku = static_cast<double>(kk) * u;
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                const std::size_t out = static_cast<std::size_t>(i * n + j);
                const double bound =
                    agg[out] *
                    (rel_from_bits(row_min[static_cast<std::size_t>(i)], p) +
                     rel_from_bits(col_min[static_cast<std::size_t>(j)], p) + ku);
                bits[out] = bits_from_bound(values[out], bound, p);
            }
        }
    }

    return PTensor::from_parts(Shape{m, n}, std::move(values), std::move(bits), p);
}

PTensor tropical_abs_product(const PTensor& a_abs, const PTensor& b_abs) {
    check_matmul_shapes(a_abs, b_abs);
    for (const double v : a_abs.values()) {
        if (v < 0.0 || std::isnan(v)) throw numeric_error("tropical product expects non-negative entries");
    }
    for (const double v : b_abs.values()) {
        if (v < 0.0 || std::isnan(v)) throw numeric_error("tropical product expects non-negative entries");
    }
    const Precision p = a_abs.precision();
    const std::int64_t m = a_abs.shape().extent(0);
    const std::int64_t kk = a_abs.shape().extent(1);
    const std::int64_t n = b_abs.shape().extent(1);
    std::vector<double> values(static_cast<std::size_t>(m * n));
    std::vector<ExactBits> bits(static_cast<std::size_t>(m * n),
                                static_cast<ExactBits>(max_bits(p)));
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < kk; ++k) {
                const double prod = eval_binary(BinOp::Mul, a_abs.value_at(i * kk + k),
                                                b_abs.value_at(k * n + j), p);
                acc = eval_binary(BinOp::Add, acc, prod, p);
            }
            values[static_cast<std::size_t>(i * n + j)] = acc;
        }
    }
    return PTensor::from_parts(Shape{m, n}, std::move(values), std::move(bits), p);
}

}  // namespace bittrace
