#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "vband/tensor.hpp"

namespace vband {

inline constexpr double kRmsNormEps = 1e-6;
inline constexpr double kLayerNormEps = 1e-5;

namespace ops {

using detail::record;
using detail::require_rank;
using detail::require_same_shape;

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return record(Tensor(a.shape(), std::move(out)), {a, b}, [a, b](const std::vector<double>& g) {
        if (a.requires_grad()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return record(Tensor(a.shape(), std::move(out)), {a, b}, [a, b](const std::vector<double>& g) {
        if (a.requires_grad()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return record(Tensor(a.shape(), std::move(out)), {a, b}, [a, b](const std::vector<double>& g) {
        if (a.requires_grad()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return record(Tensor(a.shape(), std::move(out)), {a}, [a, s](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
    return record(Tensor(a.shape(), std::move(out)), {a}, [a](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

/// Multiplies every element of `a` by the single value held in `s`.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("mul_scalar: scale must hold one value, got " + shape_str(s.shape()));
    const double k = s[0];
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * k;
    return record(Tensor(a.shape(), std::move(out)), {a, s}, [a, s, k](const std::vector<double>& g) {
        if (a.requires_grad()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * k;
        }
        if (s.requires_grad()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a[i];
            s.grad_buffer()[0] += acc;
        }
    });
}

// ---------------------------------------------------------------------------
// Trailing-axis broadcasts (the only broadcasting permitted)

/// a[..., d] + b[d]
inline Tensor add_row(const Tensor& a, const Tensor& b) {
    if (b.numel() != a.cols())
        throw DimensionError("add_row: " + shape_str(b.shape()) + " does not broadcast over " + shape_str(a.shape()));
    const std::size_t d = a.cols(), r = a.rows();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a[i * d + j] + b[j];
    return record(Tensor(a.shape(), std::move(out)), {a, b}, [a, b, r, d](const std::vector<double>& g) {
        if (a.requires_grad()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
    });
}

/// a[..., d] * b[d]
inline Tensor mul_row(const Tensor& a, const Tensor& b) {
    if (b.numel() != a.cols())
        throw DimensionError("mul_row: " + shape_str(b.shape()) + " does not broadcast over " + shape_str(a.shape()));
    const std::size_t d = a.cols(), r = a.rows();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a[i * d + j] * b[j];
    return record(Tensor(a.shape(), std::move(out)), {a, b}, [a, b, r, d](const std::vector<double>& g) {
        if (a.requires_grad()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[i * d + j] * b[j];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j] * a[i * d + j];
        }
    });
}

/// a[r, d] * w[r]: scales each row by its own weight.
inline Tensor mul_col(const Tensor& a, const Tensor& w) {
    if (w.numel() != a.rows())
        throw DimensionError("mul_col: " + shape_str(w.shape()) + " does not match rows of " + shape_str(a.shape()));
    const std::size_t d = a.cols(), r = a.rows();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a[i * d + j] * w[i];
    return record(Tensor(a.shape(), std::move(out)), {a, w}, [a, w, r, d](const std::vector<double>& g) {
        if (a.requires_grad()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[i * d + j] * w[i];
        }
        if (w.requires_grad()) {
            auto& gw = w.grad_buffer();
            for (std::size_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) acc += g[i * d + j] * a[i * d + j];
                gw[i] += acc;
            }
        }
    });
}

/// Repeats v[d] into an [n, d] matrix.
inline Tensor broadcast_rows(const Tensor& v, std::size_t n) {
    const std::size_t d = v.numel();
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i) std::copy(v.data().begin(), v.data().end(), out.begin() + i * d);
    return record(Tensor({n, d}, std::move(out)), {v}, [v, n, d](const std::vector<double>& g) {
        auto& gv = v.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gv[j] += g[i * d + j];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and reshaping

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const auto& A = a.values();
    const auto& B = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return record(Tensor({m, n}, std::move(out)), {a, b}, [a, b, m, k, n](const std::vector<double>& g) {
        const auto& A = a.values();
        const auto& B = b.values();
        if (a.requires_grad()) {
            // dA = G B^T, as row axpys over B^T so the inner loop vectorises
            auto& ga = a.grad_buffer();
            std::vector<double> bt(n * k);
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
            for (std::size_t i = 0; i < m; ++i) {
                double* garow = ga.data() + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gv = g[i * n + j];
                    const double* btrow = bt.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) garow[p] += gv * btrow[p];
                }
            }
        }
        if (b.requires_grad()) {
            // dB = A^T G
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    const double* grow = g.data() + i * n;
                    double* gbrow = gb.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return record(Tensor({c, r}, std::move(out)), {a}, [a, r, c](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
    std::vector<double> out(a.values());
    return record(Tensor(std::move(shape), std::move(out)), {a}, [a](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

/// Concatenates rank-1 or rank-2 tensors along axis 0 (rows) or the trailing axis.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const std::size_t rank = parts.front().rank();
    if (rank < 1 || rank > 2 || axis >= rank) throw DimensionError("concat: unsupported rank/axis");
    for (const auto& p : parts)
        if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
    if (rank == 1 || axis == 0) {
        const std::size_t c = rank == 1 ? 1 : parts.front().dim(1);
        std::size_t total = 0;
        for (const auto& p : parts) {
            if (rank == 2 && p.dim(1) != c)
                throw DimensionError("concat: column mismatch " + shape_str(p.shape()) + " vs " +
                                     shape_str(parts.front().shape()));
            total += p.dim(0);
        }
        std::vector<double> out;
        out.reserve(total * c);
        for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
        Shape s = rank == 1 ? Shape{total} : Shape{total, c};
        return detail::record_many(Tensor(std::move(s), std::move(out)), parts, [parts](const std::vector<double>& g) {
            std::size_t off = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    auto& gp = p.grad_buffer();
                    for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += g[off + i];
                }
                off += p.numel();
            }
        });
    }
    const std::size_t r = parts.front().dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.dim(0) != r)
            throw DimensionError("concat: row mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts.front().shape()));
        total += p.dim(1);
    }
    std::vector<double> out(r * total);
    std::size_t coff = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[i * total + coff + j] = p[i * c + j];
        coff += c;
    }
    return detail::record_many(Tensor({r, total}, std::move(out)), parts, [parts, r, total](const std::vector<double>& g) {
        std::size_t coff = 0;
        for (const auto& p : parts) {
            const std::size_t c = p.dim(1);
            if (p.requires_grad()) {
                auto& gp = p.grad_buffer();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + coff + j];
            }
            coff += c;
        }
    });
}

/// Half-open slice [begin, end) of a rank-2 tensor along `axis`; rank-1 slices elements.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (a.rank() < 1 || a.rank() > 2 || axis >= a.rank()) throw DimensionError("slice: unsupported rank/axis");
    if (begin >= end || end > a.dim(axis))
        throw BoundsError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                          shape_str(a.shape()));
    if (a.rank() == 1 || axis == 0) {
        const std::size_t c = a.rank() == 1 ? 1 : a.dim(1);
        std::vector<double> out(a.data().begin() + begin * c, a.data().begin() + end * c);
        Shape s = a.rank() == 1 ? Shape{end - begin} : Shape{end - begin, c};
        return record(Tensor(std::move(s), std::move(out)), {a}, [a, begin, c](const std::vector<double>& g) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
        });
    }
    const std::size_t r = a.dim(0), c = a.dim(1), w = end - begin;
    std::vector<double> out(r * w);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * c + begin + j];
    return record(Tensor({r, w}, std::move(out)), {a}, [a, r, c, w, begin](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
    });
}

/// Rows of `table` selected by `ids` (embedding lookup).
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
    require_rank(table, 2, "gather_rows");
    const std::size_t n = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw DimensionError("gather_rows: empty index list");
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= n)
            throw BoundsError("gather_rows: index " + std::to_string(ids[i]) + " >= " + std::to_string(n));
        std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
    }
    return record(Tensor({ids.size(), d}, std::move(out)), {table}, [table, ids, d](const std::vector<double>& g) {
        auto& gt = table.grad_buffer();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
    });
}

inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
    return gather_rows(table, ids);
}

/// Copy of `a` that never propagates gradient.
inline Tensor stop_gradient(const Tensor& a) { return a.clone(); }

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return record(Tensor::scalar(s), {a}, [a](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (auto& v : ga) v += g[0];
    });
}

inline Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    return record(Tensor::scalar(s / n), {a}, [a, n](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (auto& v : ga) v += g[0] / n;
    });
}

/// Mean over leading rows: [r, d] -> [d].
inline Tensor mean_rows(const Tensor& a) {
    const std::size_t r = a.rows(), d = a.cols();
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += a[i * d + j];
    for (auto& v : out) v /= static_cast<double>(r);
    return record(Tensor({d}, std::move(out)), {a}, [a, r, d](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        const double inv = 1.0 / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[j] * inv;
    });
}

/// Sum over the trailing axis: [r, d] -> [r].
inline Tensor sum_cols(const Tensor& a) {
    const std::size_t r = a.rows(), d = a.cols();
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i] += a[i * d + j];
    return record(Tensor({r}, std::move(out)), {a}, [a, r, d](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

namespace detail {

/// y = f(x) with dy/dx expressed through (x, y).
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
    Tensor y(a.shape(), std::move(out));
    std::vector<double> yv = y.values();
    return vband::detail::record(y, {a}, [a, yv = std::move(yv), df](const std::vector<double>& g) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(a[i], yv[i]);
    });
}

inline double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

}  // namespace detail

inline Tensor tanh(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary(a, detail::sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return x * detail::sigmoid_scalar(x); },
        [](double x, double) {
            const double s = detail::sigmoid_scalar(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor softplus(const Tensor& a) {
    return detail::unary(a, detail::softplus_scalar, [](double x, double) { return detail::sigmoid_scalar(x); });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.data())
        if (!(v > 0)) throw NumericError("log: non-positive input");
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Softmax family

/// Softmax along `axis`, stabilised by max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    for (double v : x.data())
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t n = x.dim(axis);
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const double e = std::exp(x[base + k * inner] - mx);
                out[base + k * inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
        }
    Tensor y(x.shape(), std::move(out));
    std::vector<double> yv = y.values();
    return record(y, {x}, [x, yv = std::move(yv), outer, inner, n](const std::vector<double>& g) {
        auto& gx = x.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * yv[base + k * inner];
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t idx = base + k * inner;
                    gx[idx] += yv[idx] * (g[idx] - dot);
                }
            }
    });
}

/// Log-softmax along the trailing axis.
inline Tensor log_softmax(const Tensor& x) {
    for (double v : x.data())
        if (std::isnan(v)) throw NumericError("log_softmax: NaN input");
    const std::size_t r = x.rows(), d = x.cols();
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < r; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, x[i * d + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += std::exp(x[i * d + j] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] - lz;
    }
    Tensor y(x.shape(), std::move(out));
    std::vector<double> yv = y.values();
    return record(y, {x}, [x, yv = std::move(yv), r, d](const std::vector<double>& g) {
        auto& gx = x.grad_buffer();
        for (std::size_t i = 0; i < r; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < d; ++j) gs += g[i * d + j];
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] - std::exp(yv[i * d + j]) * gs;
        }
    });
}

// ---------------------------------------------------------------------------
// Normalisation

/// y = gain * x / sqrt(mean(x^2) + eps), per trailing-axis row.
inline Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = kRmsNormEps) {
    const std::size_t d = x.cols();
    if (x.rank() == 0 || d == 0) throw DimensionError("rmsnorm: zero-length axis");
    if (gain.numel() != d)
        throw DimensionError("rmsnorm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
    const std::size_t r = x.rows();
    std::vector<double> out(x.numel()), inv(r);
    for (std::size_t i = 0; i < r; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += x[i * d + j] * x[i * d + j];
        ms /= static_cast<double>(d);
        inv[i] = 1.0 / std::sqrt(ms + eps);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = gain[j] * x[i * d + j] * inv[i];
    }
    return record(Tensor(x.shape(), std::move(out)), {x, gain}, [x, gain, inv, r, d](const std::vector<double>& g) {
        if (x.requires_grad()) {
            auto& gx = x.grad_buffer();
            for (std::size_t i = 0; i < r; ++i) {
                // dy_j/dx_k = gain_j * (inv δ_jk - x_j x_k inv^3 / d)
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * gain[j] * x[i * d + j];
                const double c = dot * inv[i] * inv[i] * inv[i] / static_cast<double>(d);
                for (std::size_t k = 0; k < d; ++k)
                    gx[i * d + k] += g[i * d + k] * gain[k] * inv[i] - x[i * d + k] * c;
            }
        }
        if (gain.requires_grad()) {
            auto& gg = gain.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * x[i * d + j] * inv[i];
        }
    });
}

/// Per-row zero-mean unit-variance normalisation without affine parameters.
inline Tensor layernorm(const Tensor& x, double eps = kLayerNormEps) {
    const std::size_t d = x.cols();
    if (x.rank() == 0 || d == 0) throw DimensionError("layernorm: zero-length axis");
    const std::size_t r = x.rows();
    std::vector<double> out(x.numel()), inv(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x[i * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (x[i * d + j] - mu) * (x[i * d + j] - mu);
        var /= static_cast<double>(d);
        inv[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (x[i * d + j] - mu) * inv[i];
    }
    Tensor y(x.shape(), std::move(out));
    std::vector<double> yv = y.values();
    return record(y, {x}, [x, yv = std::move(yv), inv, r, d](const std::vector<double>& g) {
        auto& gx = x.grad_buffer();
        const double dn = static_cast<double>(d);
        for (std::size_t i = 0; i < r; ++i) {
            double gsum = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                gsum += g[i * d + j];
                gy += g[i * d + j] * yv[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j)
                gx[i * d + j] += inv[i] * (g[i * d + j] - gsum / dn - yv[i * d + j] * gy / dn);
        }
    });
}

/// scale * LayerNorm(h) + shift, with scale/shift broadcast over the trailing axis.
inline Tensor adaln(const Tensor& h, const Tensor& scale, const Tensor& shift) {
    return add_row(mul_row(layernorm(h), scale), shift);
}

// ---------------------------------------------------------------------------
// Convolution

/// Non-causal dilated 1-D convolution with zero padding.
/// x: [c_in, T], kernels: [c_out, c_in, k] (k odd), bias: [c_out] or empty.
inline Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias, std::size_t dilation = 1) {
    require_rank(x, 2, "conv1d input");
    require_rank(kernels, 3, "conv1d kernels");
    const std::size_t cin = x.dim(0), T = x.dim(1);
    const std::size_t cout = kernels.dim(0), k = kernels.dim(2);
    if (k % 2 == 0) throw ConfigError("conv1d: kernel width must be odd, got " + std::to_string(k));
    if (dilation == 0) throw ConfigError("conv1d: dilation must be positive");
    if (kernels.dim(1) != cin)
        throw DimensionError("conv1d: kernels " + shape_str(kernels.shape()) + " vs input " + shape_str(x.shape()));
    const bool has_bias = !bias.empty();
    if (has_bias && bias.numel() != cout) throw DimensionError("conv1d: bias " + shape_str(bias.shape()));
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
    const std::ptrdiff_t dil = static_cast<std::ptrdiff_t>(dilation);
    const std::ptrdiff_t Tn = static_cast<std::ptrdiff_t>(T);
    std::vector<double> out(cout * T, 0.0);
    for (std::size_t o = 0; o < cout; ++o) {
        double* orow = out.data() + o * T;
        if (has_bias) std::fill(orow, orow + T, bias[o]);
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t tap = 0; tap < k; ++tap) {
                const double w = kernels[(o * cin + c) * k + tap];
                if (w == 0.0) continue;
                const std::ptrdiff_t shift = (static_cast<std::ptrdiff_t>(tap) - half) * dil;
                const double* xrow = x.data().data() + c * T;
                const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
                const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(Tn, Tn - shift);
                for (std::ptrdiff_t t = lo; t < hi; ++t) orow[t] += w * xrow[t + shift];
            }
    }
    std::initializer_list<Tensor> inputs = {x, kernels, bias};
    return record(Tensor({cout, T}, std::move(out)), inputs,
                  [x, kernels, bias, has_bias, cin, cout, T, k, half, dil, Tn](const std::vector<double>& g) {
                      if (x.requires_grad()) {
                          auto& gx = x.grad_buffer();
                          for (std::size_t o = 0; o < cout; ++o)
                              for (std::size_t c = 0; c < cin; ++c)
                                  for (std::size_t tap = 0; tap < k; ++tap) {
                                      const double w = kernels[(o * cin + c) * k + tap];
                                      const std::ptrdiff_t shift = (static_cast<std::ptrdiff_t>(tap) - half) * dil;
                                      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
                                      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(Tn, Tn - shift);
                                      for (std::ptrdiff_t t = lo; t < hi; ++t)
                                          gx[c * T + static_cast<std::size_t>(t + shift)] += w * g[o * T + t];
                                  }
                      }
                      if (kernels.requires_grad()) {
                          auto& gk = kernels.grad_buffer();
                          for (std::size_t o = 0; o < cout; ++o)
                              for (std::size_t c = 0; c < cin; ++c)
                                  for (std::size_t tap = 0; tap < k; ++tap) {
                                      const std::ptrdiff_t shift = (static_cast<std::ptrdiff_t>(tap) - half) * dil;
                                      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
                                      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(Tn, Tn - shift);
                                      double acc = 0.0;
                                      for (std::ptrdiff_t t = lo; t < hi; ++t)
                                          acc += g[o * T + t] * x[c * T + static_cast<std::size_t>(t + shift)];
                                      gk[(o * cin + c) * k + tap] += acc;
                                  }
                      }
                      if (has_bias && bias.requires_grad()) {
                          auto& gb = bias.grad_buffer();
                          for (std::size_t o = 0; o < cout; ++o)
                              for (std::size_t t = 0; t < T; ++t) gb[o] += g[o * T + t];
                      }
                  });
}

// ---------------------------------------------------------------------------
// Losses

enum class Reduction { Mean, Sum };

/// Cross entropy of class `targets` under row-wise `logits` [N, K].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                            Reduction reduction = Reduction::Mean) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t n = logits.dim(0), K = logits.dim(1);
    if (targets.size() != n)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(n) + " rows");
    std::vector<double> onehot(n * K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] >= K)
            throw BoundsError("cross_entropy: target " + std::to_string(targets[i]) + " >= " + std::to_string(K));
        onehot[i * K + targets[i]] = reduction == Reduction::Mean ? -1.0 / static_cast<double>(n) : -1.0;
    }
    return sum(mul(log_softmax(logits), Tensor(logits.shape(), std::move(onehot))));
}

/// Mean squared error over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    return mean(square(sub(a, b)));
}

}  // namespace ops
}  // namespace vband
