#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "vband/nn.hpp"
#include "vband/ops.hpp"

namespace vband::rq {

struct BoundaryError : DataError {
    using DataError::DataError;
};

/// Half-open frame range [begin, end) belonging to one phoneme.
using Span = std::pair<std::size_t, std::size_t>;

inline void validate_partition(const std::vector<Span>& spans, std::size_t frames) {
    if (spans.empty()) throw BoundaryError("phoneme boundaries: empty");
    std::size_t expect = 0;
    for (const auto& [b, e] : spans) {
        if (b != expect)
            throw BoundaryError(b < expect ? "phoneme boundaries overlap at frame " + std::to_string(b)
                                           : "phoneme boundaries leave a gap at frame " + std::to_string(expect));
        if (e <= b) throw BoundaryError("phoneme boundary with empty range at frame " + std::to_string(b));
        expect = e;
    }
    if (expect != frames)
        throw BoundaryError("phoneme boundaries cover " + std::to_string(expect) + " of " + std::to_string(frames) +
                            " frames");
}

/// Boundaries from integer per-phoneme durations (zero-length phonemes are skipped).
inline std::vector<Span> spans_from_durations(const std::vector<std::size_t>& durations) {
    std::vector<Span> spans;
    std::size_t pos = 0;
    for (auto d : durations) {
        if (d == 0) continue;
        spans.emplace_back(pos, pos + d);
        pos += d;
    }
    return spans;
}

/// Mean of each phoneme's frames: [T, d] -> [P, d].
/// Uses a running mean so a run of identical frames pools back to exactly that frame.
inline Tensor phoneme_pool(const Tensor& frames, const std::vector<Span>& spans) {
    detail::require_rank(frames, 2, "phoneme_pool");
    validate_partition(spans, frames.dim(0));
    const std::size_t d = frames.dim(1), P = spans.size();
    std::vector<double> out(P * d, 0.0);
    for (std::size_t p = 0; p < P; ++p) {
        const auto [b, e] = spans[p];
        for (std::size_t j = 0; j < d; ++j) {
            double m = frames[b * d + j];
            for (std::size_t t = b + 1; t < e; ++t)
                m += (frames[t * d + j] - m) / static_cast<double>(t - b + 1);
            out[p * d + j] = m;
        }
    }
    return detail::record(Tensor({P, d}, std::move(out)), {frames}, [frames, spans, d](const std::vector<double>& g) {
        auto& gf = frames.grad_buffer();
        for (std::size_t p = 0; p < spans.size(); ++p) {
            const auto [b, e] = spans[p];
            const double inv = 1.0 / static_cast<double>(e - b);
            for (std::size_t t = b; t < e; ++t)
                for (std::size_t j = 0; j < d; ++j) gf[t * d + j] += g[p * d + j] * inv;
        }
    });
}

inline constexpr double kEmaDecay = 0.99;

/// Depth-stacked codebooks. Code 0 of every depth is the reserved zero vector.
class RQCodebook {
public:
    RQCodebook() = default;

    /// Registers codes and EMA statistics as non-trainable buffers in `store`.
    RQCodebook(ParameterStore& store, const std::string& prefix, std::size_t depth, std::size_t codes,
               std::size_t width, Rng& rng, double init_std = 1.0)
        : depth_(depth), codes_(codes), width_(width) {
        if (depth == 0 || codes < 2 || width == 0) throw ConfigError("rq codebook: need depth>=1, codes>=2, width>=1");
        for (std::size_t n = 0; n < depth; ++n) {
            auto init = randn({codes, width}, rng, init_std / static_cast<double>(n + 1));
            auto v = init.mutable_data();
            std::fill(v.begin(), v.begin() + width, 0.0);
            books_.push_back(store.add(prefix + ".book" + std::to_string(n), init, false));
            counts_.push_back(store.add(prefix + ".ema_count" + std::to_string(n), Tensor::ones({codes}), false));
            sums_.push_back(store.add(prefix + ".ema_sum" + std::to_string(n), init.clone(), false));
        }
    }

    /// Codebook built from explicit code tables (row 0 is forced to zero).
    static RQCodebook from_codes(std::vector<Tensor> tables) {
        RQCodebook b;
        if (tables.empty()) throw ConfigError("rq codebook: no tables");
        b.depth_ = tables.size();
        b.codes_ = tables.front().dim(0);
        b.width_ = tables.front().dim(1);
        for (auto& t : tables) {
            if (t.shape() != Shape{b.codes_, b.width_}) throw DimensionError("rq codebook: inconsistent tables");
            t = t.clone();
            auto v = t.mutable_data();
            std::fill(v.begin(), v.begin() + b.width_, 0.0);
            b.books_.push_back(t);
            b.counts_.push_back(Tensor::ones({b.codes_}));
            b.sums_.push_back(t.clone());
        }
        return b;
    }

    std::size_t depth() const { return depth_; }
    std::size_t codes() const { return codes_; }
    std::size_t width() const { return width_; }
    const Tensor& book(std::size_t n) const { return books_.at(n); }

    double code(std::size_t n, std::size_t k, std::size_t j) const { return books_[n][k * width_ + j]; }

    std::size_t nearest(std::size_t n, std::span<const double> r) const {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < codes_; ++k) {
            double dist = 0.0;
            for (std::size_t j = 0; j < width_; ++j) {
                const double diff = r[j] - code(n, k, j);
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = k;
            }
        }
        return best;
    }

    /// EMA update of depth `n` from residual rows assigned to codes. Code 0 is never touched,
    /// and codes with no assignment keep their exact values.
    void ema_update(std::size_t n, const std::vector<std::vector<double>>& residuals,
                    const std::vector<std::size_t>& assignment, double decay = kEmaDecay) {
        if (residuals.size() != assignment.size()) throw DimensionError("ema_update: assignment length mismatch");
        std::vector<double> cnt(codes_, 0.0), sum(codes_ * width_, 0.0);
        for (std::size_t i = 0; i < residuals.size(); ++i) {
            const auto k = assignment[i];
            if (k >= codes_) throw BoundsError("ema_update: code index out of range");
            cnt[k] += 1.0;
            for (std::size_t j = 0; j < width_; ++j) sum[k * width_ + j] += residuals[i][j];
        }
        auto c = counts_[n].mutable_data();
        auto s = sums_[n].mutable_data();
        auto b = books_[n].mutable_data();
        for (std::size_t k = 1; k < codes_; ++k) {
            c[k] = decay * c[k] + (1.0 - decay) * cnt[k];
            for (std::size_t j = 0; j < width_; ++j)
                s[k * width_ + j] = decay * s[k * width_ + j] + (1.0 - decay) * sum[k * width_ + j];
            if (cnt[k] == 0.0) continue;
            for (std::size_t j = 0; j < width_; ++j) b[k * width_ + j] = s[k * width_ + j] / c[k];
        }
    }

private:
    std::size_t depth_ = 0, codes_ = 0, width_ = 0;
    std::vector<Tensor> books_, counts_, sums_;
};

/// Greedy residual quantisation of each row of z_e.
struct StyleCode {
    std::vector<std::vector<std::size_t>> indices;          // [depth][row]
    std::vector<Tensor> prefix;                             // prefix[n] = sum_{i<=n} code_i, [P, d]
    std::vector<std::vector<std::vector<double>>> inputs;   // residual entering depth n, per row
    Tensor quantized;                                       // straight-through: value prefix.back(), grad -> z_e
};

inline StyleCode rq_encode(const Tensor& z_e, const RQCodebook& book) {
    detail::require_rank(z_e, 2, "rq_encode");
    if (z_e.dim(1) != book.width())
        throw DimensionError("rq_encode: width " + std::to_string(z_e.dim(1)) + " vs codebook " +
                             std::to_string(book.width()));
    const std::size_t P = z_e.dim(0), d = book.width(), N = book.depth();
    StyleCode code;
    code.indices.assign(N, std::vector<std::size_t>(P));
    code.inputs.assign(N, std::vector<std::vector<double>>(P));
    std::vector<double> residual(z_e.data().begin(), z_e.data().end());
    std::vector<double> recon(P * d, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t p = 0; p < P; ++p) {
            std::span<const double> r(residual.data() + p * d, d);
            code.inputs[n][p].assign(r.begin(), r.end());
            const auto k = book.nearest(n, r);
            code.indices[n][p] = k;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = book.code(n, k, j);
                recon[p * d + j] += c;
                residual[p * d + j] -= c;
            }
        }
        code.prefix.emplace_back(Shape{P, d}, recon);
    }
    // z_e + sg(zhat - z_e)
    std::vector<double> delta(P * d);
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = recon[i] - z_e[i];
    code.quantized = ops::add(z_e, Tensor({P, d}, std::move(delta)));
    return code;
}

/// Reconstruction sum_i code_i[indices[i]] accumulated in encoding order.
inline Tensor rq_decode(const std::vector<std::vector<std::size_t>>& indices, const RQCodebook& book) {
    if (indices.size() != book.depth()) throw DimensionError("rq_decode: depth mismatch");
    const std::size_t P = indices.front().size(), d = book.width();
    std::vector<double> recon(P * d, 0.0);
    for (std::size_t n = 0; n < indices.size(); ++n)
        for (std::size_t p = 0; p < P; ++p) {
            if (indices[n][p] >= book.codes()) throw BoundsError("rq_decode: code index out of range");
            for (std::size_t j = 0; j < d; ++j) recon[p * d + j] += book.code(n, indices[n][p], j);
        }
    return Tensor({P, d}, std::move(recon));
}

/// sum_n || z_e - sg(prefix_n) ||^2 ; gradient reaches z_e only.
inline Tensor commit_loss(const Tensor& z_e, const StyleCode& code) {
    Tensor total;
    for (std::size_t n = 0; n < code.prefix.size(); ++n) {
        auto term = ops::sum(ops::square(ops::sub(z_e, ops::stop_gradient(code.prefix[n]))));
        total = n == 0 ? term : ops::add(total, term);
    }
    return total;
}

inline Tensor commit_loss(const Tensor& z_e, const RQCodebook& book) { return commit_loss(z_e, rq_encode(z_e, book)); }

/// EMA codebook update for every depth from the residual inputs recorded during encoding.
inline void codebook_update(RQCodebook& book, const std::vector<StyleCode>& batch, double decay = kEmaDecay) {
    for (std::size_t n = 0; n < book.depth(); ++n) {
        std::vector<std::vector<double>> residuals;
        std::vector<std::size_t> assignment;
        for (const auto& c : batch)
            for (std::size_t p = 0; p < c.indices[n].size(); ++p) {
                residuals.push_back(c.inputs[n][p]);
                assignment.push_back(c.indices[n][p]);
            }
        book.ema_update(n, residuals, assignment, decay);
    }
}

}  // namespace vband::rq
