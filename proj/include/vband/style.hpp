#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vband/flow.hpp"
#include "vband/rq.hpp"
#include "vband/synth.hpp"
#include "vband/transformer.hpp"

namespace vband {

struct StylePredictorConfig {
    std::size_t phonemes = 12;
    std::size_t styles = 4;
    std::size_t style_dim = 8;   // width of x (phoneme-level style target)
    std::size_t width = 32;      // content / prompt token width
    std::size_t align_layers = 2;
    std::size_t code_dim = 16;   // low-dimensional RQ latent
    std::size_t rq_depth = 4;
    std::size_t rq_codes = 32;
    std::size_t cond_channels = 16;
    std::size_t residual_channels = 32;
    std::size_t wavenet_layers = 4;
};

/// What to withhold from the prompt when building a condition.
struct PromptDrop {
    bool vocal = false;
    bool text = false;
};

/// Fused condition for one item plus the quantities the loss needs.
struct StyleCondition {
    Tensor frames;       // [P, cond_channels]
    Tensor z_e;          // pre-quantisation prompt latent (empty when the vocal prompt is dropped)
    rq::StyleCode code;  // its residual code
};

/// Flow-based style predictor. The residual style encoder pools the vocal prompt per phoneme and
/// quantises it; the quantised prompt tokens plus the style tag form z_p, onto which the phoneme
/// content is aligned. The WaveNet estimator is conditioned on the aligned stream.
class StylePredictor {
public:
    StylePredictor(StylePredictorConfig cfg, Rng& rng) : cfg_(cfg) {
        content_emb_ = encoder_.add_normal("content_emb", {cfg.phonemes, cfg.width}, rng, 1.0);
        tag_emb_ = encoder_.add_normal("tag_emb", {cfg.styles + 1, cfg.width}, rng, 1.0);  // row 0 = null text
        null_prompt_ = encoder_.add_normal("null_prompt", {1, cfg.width}, rng, 1.0);
        enc_in_ = Linear(encoder_, "rse.in", cfg.style_dim, cfg.code_dim, rng);
        codebook_ = rq::RQCodebook(encoder_, "rse.rq", cfg.rq_depth, cfg.rq_codes, cfg.code_dim, rng, 1.0);
        enc_out_ = Linear(encoder_, "rse.out", cfg.code_dim, cfg.width, rng);
        fuse_ = Linear(encoder_, "fuse", 2 * cfg.width, cfg.cond_channels, rng);
        flow::WaveNetConfig wc;
        wc.x_channels = cfg.style_dim;
        wc.cond_channels = cfg.cond_channels;
        wc.residual_channels = cfg.residual_channels;
        wc.layers = cfg.wavenet_layers;
        estimator_ = std::make_unique<flow::WaveNetEstimator>(wc, rng, "estimator", &estimator_store_);
    }

    StylePredictor(const StylePredictor&) = delete;
    StylePredictor& operator=(const StylePredictor&) = delete;

    const StylePredictorConfig& config() const { return cfg_; }
    ParameterStore& encoder_parameters() { return encoder_; }
    ParameterStore& estimator_parameters() { return estimator_store_; }
    const flow::WaveNetEstimator& estimator() const { return *estimator_; }
    rq::RQCodebook& codebook() { return codebook_; }

    /// Every tensor of the model under one namespace, for checkpoints.
    ParameterStore snapshot_store() const {
        ParameterStore all;
        for (const auto& [n, e] : encoder_.entries()) all.add(n, e.tensor.clone(), e.trainable);
        for (const auto& [n, e] : estimator_store_.entries()) all.add(n, e.tensor.clone(), e.trainable);
        return all;
    }

    void load_from(const ParameterStore& all) {
        encoder_.copy_values_from(all);
        estimator_store_.copy_values_from(all);
    }

    StyleCondition condition(const synth::StyleItem& item, PromptDrop drop = {}) const {
        StyleCondition out;
        std::vector<Tensor> tokens;
        if (drop.vocal) {
            tokens.push_back(null_prompt_);
        } else {
            auto pooled = rq::phoneme_pool(item.prompt, item.prompt_spans);
            out.z_e = enc_in_(pooled);
            out.code = rq::rq_encode(out.z_e, codebook_);
            tokens.push_back(enc_out_(out.code.quantized));
        }
        tokens.push_back(ops::gather_rows(tag_emb_, {drop.text ? 0 : item.style + 1}));
        auto z_p = with_positions(ops::concat(tokens, 0));
        auto z_ct = ops::gather_rows(content_emb_, item.phonemes);
        out.frames = fuse_(style_alignment_stack(z_ct, z_p, cfg_.align_layers));
        return out;
    }

    Tensor field(const Tensor& xt, double t, const StyleCondition& c) const {
        return estimator_->forward_frames(xt, t, c.frames);
    }

    /// Integrates the style target for an item from noise (optionally with CFG against a fully dropped prompt).
    Tensor sample(const synth::StyleItem& item, Rng& rng, const flow::FlowConfig& fc, bool guidance = false) const {
        const auto cond = condition(item);
        const auto uncond = condition(item, {true, true});
        flow::FunctionEstimator est([&](const Tensor& x, double t, const flow::Condition& c) {
            return field(x, t, c.is_null() ? uncond : cond);
        });
        flow::SampleOptions opt;
        opt.guidance = guidance;
        return flow::euler_sample(est, randn(item.target.shape(), rng), flow::Condition{Tensor(), {item.style}}, fc,
                                  opt);
    }

private:
    StylePredictorConfig cfg_;
    ParameterStore encoder_;
    ParameterStore estimator_store_;
    Tensor content_emb_, tag_emb_, null_prompt_;
    Linear enc_in_, enc_out_, fuse_;
    rq::RQCodebook codebook_;
    std::unique_ptr<flow::WaveNetEstimator> estimator_;
};

}  // namespace vband
