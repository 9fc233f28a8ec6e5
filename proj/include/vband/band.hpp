#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vband/flow.hpp"
#include "vband/moe.hpp"
#include "vband/transformer.hpp"

namespace vband {

struct BandModelConfig {
    std::size_t channels = 8;  // latent channels of x and of the vocal track
    std::size_t width = 64;
    std::size_t heads = 4;
    std::size_t blocks = 2;
    std::size_t experts = 4;
    std::size_t expert_hidden = 64;
    std::size_t tags = 4;
    std::size_t time_freq_dim = 128;
    /// Gating-free reference: each MOE calls expert 0 of every group directly.
    bool plain = false;

    /// Width, heads and depth of the full-size model (shape tests only).
    static BandModelConfig paper_dims() {
        BandModelConfig c;
        c.width = 768;
        c.heads = 8;
        c.blocks = 4;
        c.expert_hidden = 768;
        return c;
    }
};

/// Accompaniment vector-field estimator: Band Transformer Blocks with Band-MOE feed-forwards.
/// Condition frames carry the vocal track [T, channels]; tokens are style-tag ids.
class BandModel : public flow::VectorFieldEstimator {
public:
    using Block = BandBlock<moe::BandMoe>;

    BandModel(BandModelConfig cfg, Rng& rng) : cfg_(cfg), router_(std::make_unique<moe::RouterState>()) {
        in_proj_ = Linear(store_, "in_proj", cfg.channels, cfg.width, rng);
        vocal_proj_ = Linear(store_, "vocal_proj", cfg.channels, cfg.width, rng);
        tag_emb_ = store_.add_normal("tag_emb", {cfg.tags + 1, cfg.width}, rng, 1.0);  // row 0 = null prompt
        time_ = TimeEmbedding(store_, "time", cfg.width, rng, cfg.time_freq_dim);
        const moe::MoeConfig mc{cfg.width, cfg.expert_hidden, cfg.experts, cfg.plain};
        for (std::size_t b = 0; b < cfg.blocks; ++b)
            blocks_.emplace_back(store_, "block" + std::to_string(b), BandBlockConfig{cfg.width, cfg.heads}, rng, mc,
                                 router_.get());
        final_norm_ = store_.add_ones("final_norm", {cfg.width});
        out_proj_ = Linear::zero_init(store_, "out_proj", cfg.width, cfg.channels);
    }

    BandModel(const BandModel&) = delete;
    BandModel& operator=(const BandModel&) = delete;

    ParameterStore& parameters() { return store_; }
    const ParameterStore& parameters() const { return store_; }
    const BandModelConfig& config() const { return cfg_; }
    moe::RouterState& router() const { return *router_; }
    const Block& block(std::size_t i) const { return blocks_.at(i); }

    Tensor forward(const Tensor& xt, double t, const flow::Condition& cond) const override {
        if (xt.rank() != 2 || xt.dim(1) != cfg_.channels)
            throw DimensionError("band model: x " + shape_str(xt.shape()) + " vs " + std::to_string(cfg_.channels) +
                                 " channels");
        if (cond.frames.shape() != xt.shape())
            throw DimensionError("band model: vocal track " + shape_str(cond.frames.shape()) +
                                 " not frame-aligned with x " + shape_str(xt.shape()));
        std::vector<std::size_t> rows;
        for (auto id : cond.tokens) {
            if (id >= cfg_.tags) throw BoundsError("band model: tag id " + std::to_string(id) + " out of range");
            rows.push_back(id + 1);
        }
        if (rows.empty()) rows.push_back(0);

        BlockContext ctx;
        ctx.z_v = vocal_proj_(cond.frames);
        ctx.z_p = ops::gather_rows(tag_emb_, rows);
        ctx.temb = time_(t);
        ctx.t = t;
        ctx.z_g = ops::add(ops::add(ops::mean_rows(ctx.z_p), ops::mean_rows(ctx.z_v)),
                           ops::reshape(ctx.temb, {cfg_.width}));

        auto h = ops::add(in_proj_(xt), ctx.z_v);
        for (const auto& b : blocks_) h = b(h, ctx);
        return out_proj_(ops::rmsnorm(h, final_norm_));
    }

    /// Balance loss over the dense gates collected since the last clear (global router excluded).
    Tensor balance_loss(double alpha = moe::kBalanceAlpha, moe::BalanceForm form = moe::BalanceForm::Switch) const {
        Tensor total;
        for (const auto* gates : {&router_->aligned_gates, &router_->controlled_gates, &router_->acoustic_gates}) {
            if (gates->empty()) continue;
            auto term = moe::balance_loss(*gates, alpha, form);
            total = total.empty() ? term : ops::add(total, term);
        }
        return total;
    }

private:
    BandModelConfig cfg_;
    ParameterStore store_;
    std::unique_ptr<moe::RouterState> router_;
    Linear in_proj_, vocal_proj_;
    Tensor tag_emb_;
    TimeEmbedding time_;
    std::vector<Block> blocks_;
    Tensor final_norm_;
    Linear out_proj_;
};

}  // namespace vband
