#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vband/nn.hpp"
#include "vband/ops.hpp"

namespace vband {

/// softmax(Q K^T / sqrt(d)) V for Q [Tq, d], K [Tk, d], V [Tk, dv].
inline Tensor sdp_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    detail::require_rank(q, 2, "sdp_attention Q");
    detail::require_rank(k, 2, "sdp_attention K");
    detail::require_rank(v, 2, "sdp_attention V");
    if (q.dim(1) != k.dim(1))
        throw DimensionError("sdp_attention: query width " + shape_str(q.shape()) + " vs key width " +
                             shape_str(k.shape()));
    if (k.dim(0) != v.dim(0))
        throw DimensionError("sdp_attention: key length " + shape_str(k.shape()) + " vs value length " +
                             shape_str(v.shape()));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    auto scores = ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt_d);
    return ops::matmul(ops::softmax(scores, 1), v);
}

/// Rotary position embedding: rotates consecutive pairs (2j, 2j+1) of row m by
/// positions[m] * 10000^(-2j/d).
inline Tensor rope_rotate(const Tensor& x, const std::vector<double>& positions) {
    detail::require_rank(x, 2, "rope_rotate");
    const std::size_t T = x.dim(0), d = x.dim(1);
    if (d % 2 != 0) throw ConfigError("rope_rotate: width must be even, got " + std::to_string(d));
    if (positions.size() != T) throw DimensionError("rope_rotate: one position per row required");
    std::vector<double> cosv(T * d / 2), sinv(T * d / 2);
    for (std::size_t m = 0; m < T; ++m)
        for (std::size_t j = 0; j < d / 2; ++j) {
            const double theta = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
            const double ang = positions[m] * theta;
            cosv[m * d / 2 + j] = std::cos(ang);
            sinv[m * d / 2 + j] = std::sin(ang);
        }
    std::vector<double> out(x.numel());
    for (std::size_t m = 0; m < T; ++m)
        for (std::size_t j = 0; j < d / 2; ++j) {
            const double c = cosv[m * d / 2 + j], s = sinv[m * d / 2 + j];
            const double a = x[m * d + 2 * j], b = x[m * d + 2 * j + 1];
            out[m * d + 2 * j] = a * c - b * s;
            out[m * d + 2 * j + 1] = a * s + b * c;
        }
    return detail::record(Tensor(x.shape(), std::move(out)), {x},
                          [x, cosv, sinv, T, d](const std::vector<double>& g) {
                              auto& gx = x.grad_buffer();
                              for (std::size_t m = 0; m < T; ++m)
                                  for (std::size_t j = 0; j < d / 2; ++j) {
                                      const double c = cosv[m * d / 2 + j], s = sinv[m * d / 2 + j];
                                      const double ga = g[m * d + 2 * j], gb = g[m * d + 2 * j + 1];
                                      gx[m * d + 2 * j] += ga * c + gb * s;
                                      gx[m * d + 2 * j + 1] += -ga * s + gb * c;
                                  }
                          });
}

inline Tensor rope_rotate(const Tensor& x) {
    std::vector<double> pos(x.dim(0));
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<double>(i);
    return rope_rotate(x, pos);
}

/// Fixed sinusoidal positional table [T, d].
inline Tensor positional_encoding(std::size_t T, std::size_t d) {
    std::vector<double> v(T * d);
    for (std::size_t p = 0; p < T; ++p)
        for (std::size_t i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            v[p * d + i] = (i % 2 == 0) ? std::sin(static_cast<double>(p) * freq) : std::cos(static_cast<double>(p) * freq);
        }
    return Tensor({T, d}, std::move(v));
}

inline Tensor with_positions(const Tensor& tokens) {
    return ops::add(tokens, positional_encoding(tokens.dim(0), tokens.dim(1)));
}

/// Repeated attention of the content query onto prompt tokens, each layer adding its
/// read-out to the running query. Returns concat([z_ct, stylised], trailing axis).
/// `z_p` is expected to already carry positional information; an empty `z_p` is
/// replaced by `null_token`.
inline Tensor style_alignment_stack(const Tensor& z_ct, const Tensor& z_p, std::size_t layers,
                                    const Tensor& null_token = Tensor()) {
    const Tensor& keys = z_p.empty() ? null_token : z_p;
    if (keys.empty()) throw DimensionError("style_alignment_stack: empty prompt and no null token");
    Tensor s = z_ct;
    for (std::size_t l = 0; l < layers; ++l) s = ops::add(s, sdp_attention(s, keys, keys));
    return ops::concat({z_ct, s}, 1);
}

/// Multi-head attention with optional RoPE on queries and keys.
struct MultiHeadAttention {
    std::size_t heads = 1;
    bool rope = false;
    Linear wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParameterStore& store, const std::string& prefix, std::size_t width, std::size_t heads_,
                       bool rope_, Rng& rng, bool zero_out = false)
        : heads(heads_),
          rope(rope_),
          wq(store, prefix + ".wq", width, width, rng, 1.0, false),
          wk(store, prefix + ".wk", width, width, rng, 1.0, false),
          wv(store, prefix + ".wv", width, width, rng, 1.0, false) {
        if (width % heads != 0) throw ConfigError("attention width must divide by head count");
        wo = zero_out ? Linear::zero_init(store, prefix + ".wo", width, width)
                      : Linear(store, prefix + ".wo", width, width, rng);
    }

    Tensor operator()(const Tensor& xq, const Tensor& xkv) const {
        const std::size_t width = xq.dim(1), dh = width / heads;
        auto q = wq(xq), k = wk(xkv), v = wv(xkv);
        std::vector<Tensor> outs;
        for (std::size_t h = 0; h < heads; ++h) {
            auto qh = ops::slice(q, 1, h * dh, (h + 1) * dh);
            auto kh = ops::slice(k, 1, h * dh, (h + 1) * dh);
            auto vh = ops::slice(v, 1, h * dh, (h + 1) * dh);
            if (rope) {
                qh = rope_rotate(qh);
                kh = rope_rotate(kh);
            }
            outs.push_back(sdp_attention(qh, kh, vh));
        }
        return wo(heads == 1 ? outs.front() : ops::concat(outs, 1));
    }
};

/// Position-wise SiLU feed-forward network.
struct FeedForward {
    Linear fc1, fc2;

    FeedForward() = default;
    FeedForward(ParameterStore& store, const std::string& prefix, std::size_t width, std::size_t hidden, Rng& rng)
        : fc1(store, prefix + ".fc1", width, hidden, rng), fc2(store, prefix + ".fc2", hidden, width, rng) {}

    Tensor operator()(const Tensor& x) const { return fc2(ops::silu(fc1(x))); }
};

/// Everything a block needs besides the hidden state.
struct BlockContext {
    Tensor z_v;   // [T, W] frame-aligned vocal embedding
    Tensor z_p;   // [L, W] prompt tokens (null row when unconditioned)
    Tensor z_g;   // [W] global style embedding
    Tensor temb;  // [1, W] time embedding
    double t = 0.0;
};

/// Plain feed-forward adapter for BandBlock.
struct PlainFeedForward {
    FeedForward ffn;
    PlainFeedForward() = default;
    PlainFeedForward(ParameterStore& store, const std::string& prefix, std::size_t width, std::size_t hidden, Rng& rng)
        : ffn(store, prefix, width, hidden, rng) {}
    Tensor operator()(const Tensor& u, BlockContext&) const { return ffn(u); }
};

struct BandBlockConfig {
    std::size_t width = 64;
    std::size_t heads = 4;
};

/// One Band Transformer Block (pre-norm):
///   h = x + Wo[ SelfAttn(RoPE) + tanh(alpha) * CrossAttn(z_p) ](RMSNorm(x))
///   out = h + FFN(AdaLN(h; z_g))
/// The output projection, alpha and the AdaLN modulation start at zero, so a fresh
/// block is the identity map.
template <class FeedForwardT>
class BandBlock {
public:
    BandBlock() = default;

    template <class... FfnArgs>
    BandBlock(ParameterStore& store, const std::string& prefix, BandBlockConfig cfg, Rng& rng, FfnArgs&&... ffn_args)
        : cfg_(cfg) {
        if (cfg.width % cfg.heads != 0 || (cfg.width / cfg.heads) % 2 != 0)
            throw ConfigError("band block: head width must be even and divide the model width");
        norm_gain_ = store.add_ones(prefix + ".norm.gain", {cfg.width});
        wq_ = Linear(store, prefix + ".attn.wq", cfg.width, cfg.width, rng, 1.0, false);
        wk_ = Linear(store, prefix + ".attn.wk", cfg.width, cfg.width, rng, 1.0, false);
        wv_ = Linear(store, prefix + ".attn.wv", cfg.width, cfg.width, rng, 1.0, false);
        wkz_ = Linear(store, prefix + ".attn.wkz", cfg.width, cfg.width, rng, 1.0, false);
        wvz_ = Linear(store, prefix + ".attn.wvz", cfg.width, cfg.width, rng, 1.0, false);
        wo_ = Linear::zero_init(store, prefix + ".attn.wo", cfg.width, cfg.width);
        gate_ = store.add_zeros(prefix + ".attn.alpha", {1});
        adaln_ = Linear::zero_init(store, prefix + ".adaln", cfg.width, 2 * cfg.width);
        ffn_ = FeedForwardT(store, prefix + ".ffn", std::forward<FfnArgs>(ffn_args)..., rng);
    }

    const Tensor& cross_gate() const { return gate_; }
    FeedForwardT& feed_forward() { return ffn_; }
    const FeedForwardT& feed_forward() const { return ffn_; }

    /// Attention sub-layer output before the residual add.
    Tensor attention(const Tensor& x, const BlockContext& ctx) const {
        const std::size_t W = cfg_.width, dh = W / cfg_.heads;
        auto a = ops::rmsnorm(x, norm_gain_);
        auto q = wq_(a), k = wk_(a), v = wv_(a);
        auto kz = wkz_(ctx.z_p), vz = wvz_(ctx.z_p);
        auto g = ops::tanh(gate_);
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            auto qh = rope_rotate(ops::slice(q, 1, h * dh, (h + 1) * dh));
            auto kh = rope_rotate(ops::slice(k, 1, h * dh, (h + 1) * dh));
            auto vh = ops::slice(v, 1, h * dh, (h + 1) * dh);
            auto self = sdp_attention(qh, kh, vh);
            auto cross = sdp_attention(qh, ops::slice(kz, 1, h * dh, (h + 1) * dh), ops::slice(vz, 1, h * dh, (h + 1) * dh));
            heads.push_back(ops::add(self, ops::mul_scalar(cross, g)));
        }
        return wo_(cfg_.heads == 1 ? heads.front() : ops::concat(heads, 1));
    }

    /// The tanh(alpha)-gated cross-attention branch alone (for inspection).
    Tensor cross_branch(const Tensor& x, const BlockContext& ctx) const {
        const std::size_t W = cfg_.width, dh = W / cfg_.heads;
        auto a = ops::rmsnorm(x, norm_gain_);
        auto q = wq_(a);
        auto kz = wkz_(ctx.z_p), vz = wvz_(ctx.z_p);
        auto g = ops::tanh(gate_);
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            auto qh = rope_rotate(ops::slice(q, 1, h * dh, (h + 1) * dh));
            auto cross = sdp_attention(qh, ops::slice(kz, 1, h * dh, (h + 1) * dh), ops::slice(vz, 1, h * dh, (h + 1) * dh));
            heads.push_back(ops::mul_scalar(cross, g));
        }
        return cfg_.heads == 1 ? heads.front() : ops::concat(heads, 1);
    }

    Tensor operator()(const Tensor& x, BlockContext& ctx) const {
        if (!ctx.z_v.empty() && ctx.z_v.shape() != x.shape())
            throw DimensionError("band block: z_v " + shape_str(ctx.z_v.shape()) + " misaligned with x " +
                                 shape_str(x.shape()));
        auto h = ops::add(x, attention(x, ctx));
        auto mod = adaln_(ops::reshape(ctx.z_g, {1, cfg_.width}));
        auto gamma = ops::slice(mod, 1, 0, cfg_.width);
        auto beta = ops::slice(mod, 1, cfg_.width, 2 * cfg_.width);
        auto u = ops::adaln(h, gamma, beta);
        return ops::add(h, ffn_(u, ctx));
    }

private:
    BandBlockConfig cfg_;
    Tensor norm_gain_;
    Linear wq_, wk_, wv_, wkz_, wvz_, wo_;
    Tensor gate_;
    Linear adaln_;
    FeedForwardT ffn_;
};

}  // namespace vband
