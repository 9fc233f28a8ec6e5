#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vband/nn.hpp"
#include "vband/ops.hpp"

namespace vband::flow {

/// One point on the straight noise-to-data path.
struct FlowSample {
    Tensor x0;  // noise endpoint
    Tensor x1;  // data endpoint
    double t = 0.0;
    Tensor xt;  // (1 - t) x0 + t x1
    Tensor u;   // x1 - x0
};

enum class TimeSampling { Grid, Continuous };

struct FlowConfig {
    std::size_t train_timesteps = 100;
    std::size_t infer_steps = 25;
    double cfg_scale = 3.0;
    double cond_drop_prob = 0.2;
    TimeSampling time_sampling = TimeSampling::Grid;

    void validate() const {
        if (train_timesteps == 0) throw ConfigError("train_timesteps must be positive");
        if (infer_steps == 0) throw ConfigError("infer_steps must be >= 1");
        if (cfg_scale < 0) throw ConfigError("cfg_scale must be non-negative");
        if (cond_drop_prob < 0 || cond_drop_prob > 1) throw ConfigError("cond_drop_prob must lie in [0, 1]");
    }
};

/// Conditioning passed to an estimator: frame-aligned features plus prompt token ids.
/// An empty token list selects the learned null condition.
struct Condition {
    Tensor frames;
    std::vector<std::size_t> tokens;

    Condition null() const { return Condition{frames, {}}; }
    bool is_null() const { return tokens.empty(); }
};

/// v(x_t, t | c; theta). Output shape always equals the input shape.
class VectorFieldEstimator {
public:
    virtual ~VectorFieldEstimator() = default;
    virtual Tensor forward(const Tensor& xt, double t, const Condition& cond) const = 0;

    /// Several independent (x_t, t, c) triples; estimators with a cheaper stacked path override this.
    virtual std::vector<Tensor> forward_batch(const std::vector<Tensor>& xts, const std::vector<double>& ts,
                                              const std::vector<Condition>& conds) const {
        std::vector<Tensor> out;
        out.reserve(xts.size());
        for (std::size_t i = 0; i < xts.size(); ++i) out.push_back(forward(xts[i], ts[i], conds[i]));
        return out;
    }
};

/// Wraps a plain function as an estimator (oracle fields, tests).
class FunctionEstimator : public VectorFieldEstimator {
public:
    using Fn = std::function<Tensor(const Tensor&, double, const Condition&)>;
    explicit FunctionEstimator(Fn fn) : fn_(std::move(fn)) {}
    Tensor forward(const Tensor& xt, double t, const Condition& c) const override { return fn_(xt, t, c); }

private:
    Fn fn_;
};

inline FlowSample make_flow_sample(const Tensor& x1, const Tensor& x0, double t) {
    detail::require_same_shape(x0, x1, "make_flow_sample");
    std::vector<double> xt(x1.numel()), u(x1.numel());
    for (std::size_t i = 0; i < xt.size(); ++i) {
        xt[i] = (1.0 - t) * x0[i] + t * x1[i];
        u[i] = x1[i] - x0[i];
    }
    return FlowSample{x0, x1, t, Tensor(x1.shape(), std::move(xt)), Tensor(x1.shape(), std::move(u))};
}

/// Draws the training time for one sample.
inline double sample_time(Rng& rng, const FlowConfig& cfg) {
    if (cfg.time_sampling == TimeSampling::Continuous) return uniform(rng);
    auto k = std::uniform_int_distribution<std::size_t>(0, cfg.train_timesteps - 1)(rng);
    return static_cast<double>(k) / static_cast<double>(cfg.train_timesteps);
}

/// x0 ~ N(0, 1) elementwise and t from the configured time law.
inline FlowSample make_flow_sample(const Tensor& x1, Rng& rng, const FlowConfig& cfg) {
    for (double v : x1.data())
        if (!std::isfinite(v)) throw NumericError("make_flow_sample: non-finite data endpoint");
    const double t = sample_time(rng, cfg);
    return make_flow_sample(x1, randn(x1.shape(), rng), t);
}

/// Mean squared error between estimated and target fields over all samples and elements.
/// With probability `drop_prob` a sample's condition is replaced by the null condition.
inline Tensor cfm_loss(const VectorFieldEstimator& est, const std::vector<FlowSample>& batch,
                       const std::vector<Condition>& conds, double drop_prob = 0.0, Rng* rng = nullptr) {
    if (batch.empty()) throw DimensionError("cfm_loss: empty batch");
    if (conds.size() != batch.size()) throw DimensionError("cfm_loss: one condition per sample required");
    std::vector<Tensor> xts;
    std::vector<double> ts;
    std::vector<Condition> cs;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        xts.push_back(batch[i].xt);
        ts.push_back(batch[i].t);
        bool drop = drop_prob > 0.0 && rng && uniform(*rng) < drop_prob;
        cs.push_back(drop ? conds[i].null() : conds[i]);
    }
    auto vs = est.forward_batch(xts, ts, cs);
    Tensor total;
    std::size_t elements = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (vs[i].shape() != batch[i].u.shape())
            throw DimensionError("cfm_loss: estimator output " + shape_str(vs[i].shape()) + " vs target " +
                                 shape_str(batch[i].u.shape()));
        auto term = ops::sum(ops::square(ops::sub(vs[i], batch[i].u)));
        total = i == 0 ? term : ops::add(total, term);
        elements += batch[i].u.numel();
    }
    return ops::scale(total, 1.0 / static_cast<double>(elements));
}

/// gamma * v_cond + (1 - gamma) * v_uncond
inline Tensor cfg_field(const Tensor& v_cond, const Tensor& v_uncond, double gamma) {
    detail::require_same_shape(v_cond, v_uncond, "cfg_field");
    std::vector<double> out(v_cond.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gamma * v_cond[i] + (1.0 - gamma) * v_uncond[i];
    return Tensor(v_cond.shape(), std::move(out));
}

struct TraceRow {
    std::size_t step = 0;
    double t = 0.0;
    double mean_abs_x = 0.0;
    double mean_abs_v = 0.0;
};

struct SampleOptions {
    double t_start = 0.0;
    /// Apply classifier-free guidance with FlowConfig::cfg_scale.
    bool guidance = false;
    std::vector<TraceRow>* trace = nullptr;
};

/// Explicit Euler integration of dx = v dt from t_start to 1 in infer_steps steps.
inline Tensor euler_sample(const VectorFieldEstimator& est, const Tensor& x_init, const Condition& cond,
                           const FlowConfig& cfg, const SampleOptions& opt = {}) {
    cfg.validate();
    if (opt.t_start < 0.0 || opt.t_start >= 1.0) throw ConfigError("euler_sample: t_start must lie in [0, 1)");
    const double eps = (1.0 - opt.t_start) / static_cast<double>(cfg.infer_steps);
    Tensor x = x_init.clone();
    for (std::size_t step = 0; step < cfg.infer_steps; ++step) {
        const double t = opt.t_start + static_cast<double>(step) * eps;
        Tensor v = est.forward(x, t, cond);
        if (opt.guidance) v = cfg_field(v, est.forward(x, t, cond.null()), cfg.cfg_scale);
        if (v.shape() != x.shape())
            throw DimensionError("euler_sample: estimator output " + shape_str(v.shape()) + " vs state " +
                                 shape_str(x.shape()));
        std::vector<double> next(x.numel());
        double ax = 0.0, av = 0.0;
        for (std::size_t i = 0; i < next.size(); ++i) {
            next[i] = x[i] + eps * v[i];
            if (!std::isfinite(next[i]))
                throw NumericError("euler_sample: non-finite state at step " + std::to_string(step));
            ax += std::abs(x[i]);
            av += std::abs(v[i]);
        }
        if (opt.trace)
            opt.trace->push_back({step, t, ax / static_cast<double>(x.numel()), av / static_cast<double>(x.numel())});
        x = Tensor(x.shape(), std::move(next));
    }
    return x;
}

/// Start state for prompt-guided transfer: the prompt noised along the training path at t_start.
inline Tensor noised_prompt(const Tensor& prompt, Rng& rng, double t_start = 0.5) {
    return make_flow_sample(prompt, randn(prompt.shape(), rng), t_start).xt;
}

// ---------------------------------------------------------------------------
// Estimators

/// Time-conditioned MLP over point clouds: x [n, d] -> v [n, d].
class MlpEstimator : public VectorFieldEstimator {
public:
    struct Config {
        std::size_t dim = 2;
        std::size_t hidden = 64;
        std::size_t time_dim = 32;
        std::size_t freq_dim = 128;
    };

    MlpEstimator(Config cfg, Rng& rng) : cfg_(cfg) {
        time_ = TimeEmbedding(store_, "time", cfg.time_dim, rng, cfg.freq_dim);
        fc1_ = Linear(store_, "fc1", cfg.dim + cfg.time_dim, cfg.hidden, rng);
        fc2_ = Linear(store_, "fc2", cfg.hidden, cfg.hidden, rng);
        fc3_ = Linear(store_, "fc3", cfg.hidden, cfg.hidden, rng);
        out_ = Linear(store_, "out", cfg.hidden, cfg.dim, rng, 0.1);
    }

    ParameterStore& parameters() { return store_; }
    const ParameterStore& parameters() const { return store_; }

    Tensor forward(const Tensor& xt, double t, const Condition&) const override {
        return forward_rows(xt, std::vector<double>(xt.dim(0), t));
    }

    std::vector<Tensor> forward_batch(const std::vector<Tensor>& xts, const std::vector<double>& ts,
                                      const std::vector<Condition>&) const override {
        std::vector<double> row_t;
        for (std::size_t i = 0; i < xts.size(); ++i) row_t.insert(row_t.end(), xts[i].dim(0), ts[i]);
        auto v = forward_rows(ops::concat(xts, 0), row_t);
        std::vector<Tensor> out;
        std::size_t off = 0;
        for (const auto& x : xts) {
            out.push_back(ops::slice(v, 0, off, off + x.dim(0)));
            off += x.dim(0);
        }
        return out;
    }

private:
    Tensor forward_rows(const Tensor& x, const std::vector<double>& row_t) const {
        if (x.rank() != 2 || x.dim(1) != cfg_.dim)
            throw DimensionError("mlp estimator: expected [n, " + std::to_string(cfg_.dim) + "], got " +
                                 shape_str(x.shape()));
        std::vector<double> feats;
        feats.reserve(row_t.size() * cfg_.freq_dim);
        for (double t : row_t) {
            auto e = sinusoidal_embedding(t, cfg_.freq_dim);
            feats.insert(feats.end(), e.data().begin(), e.data().end());
        }
        Tensor sin_feats({row_t.size(), cfg_.freq_dim}, std::move(feats));
        auto temb = time_.fc2(ops::silu(time_.fc1(sin_feats)));
        auto h = ops::silu(fc1_(ops::concat({x, temb}, 1)));
        h = ops::silu(fc2_(h));
        h = ops::silu(fc3_(h));
        return out_(h);
    }

    Config cfg_;
    ParameterStore store_;
    TimeEmbedding time_;
    Linear fc1_, fc2_, fc3_, out_;
};

struct WaveNetConfig {
    std::size_t x_channels = 8;
    std::size_t cond_channels = 8;
    std::size_t residual_channels = 32;
    std::size_t layers = 4;
    std::size_t kernel = 3;
    std::vector<std::size_t> dilations = {1, 2, 4, 8};
    std::size_t time_freq_dim = 128;
};

/// Non-causal WaveNet field estimator over time-major frames [T, C].
/// The time embedding is added to the projected condition stream.
class WaveNetEstimator : public VectorFieldEstimator {
public:
    WaveNetEstimator(WaveNetConfig cfg, Rng& rng, const std::string& prefix = "wavenet")
        : WaveNetEstimator(cfg, rng, prefix, nullptr) {}

    /// Registers parameters into an external store.
    WaveNetEstimator(WaveNetConfig cfg, Rng& rng, const std::string& prefix, ParameterStore* external)
        : cfg_(std::move(cfg)), store_(external ? external : &own_) {
        if (cfg_.kernel % 2 == 0) throw ConfigError("wavenet: kernel width must be odd");
        if (cfg_.dilations.empty()) throw ConfigError("wavenet: dilation cycle is empty");
        if (cfg_.layers == 0) throw ConfigError("wavenet: at least one layer required");
        const std::size_t R = cfg_.residual_channels;
        auto& st = *store_;
        auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
            return st.add_normal(name, {out, in, k}, rng, 1.0 / std::sqrt(static_cast<double>(in * k)));
        };
        in_w_ = conv(prefix + ".in.w", R, cfg_.x_channels, 1);
        in_b_ = st.add_zeros(prefix + ".in.b", {R});
        cond_ = Linear(st, prefix + ".cond", cfg_.cond_channels, R, rng);
        time_ = TimeEmbedding(st, prefix + ".time", R, rng, cfg_.time_freq_dim);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const std::string p = prefix + ".layer" + std::to_string(l);
            layers_.push_back({conv(p + ".dil.w", 2 * R, R, cfg_.kernel), st.add_zeros(p + ".dil.b", {2 * R}),
                               conv(p + ".cond.w", 2 * R, R, 1), conv(p + ".rs.w", 2 * R, R, 1),
                               st.add_zeros(p + ".rs.b", {2 * R})});
        }
        skip_w_ = conv(prefix + ".skip.w", R, R, 1);
        skip_b_ = st.add_zeros(prefix + ".skip.b", {R});
        out_w_ = st.add_zeros(prefix + ".out.w", {cfg_.x_channels, R, 1});
        out_b_ = st.add_zeros(prefix + ".out.b", {cfg_.x_channels});
    }

    WaveNetEstimator(const WaveNetEstimator&) = delete;
    WaveNetEstimator& operator=(const WaveNetEstimator&) = delete;

    ParameterStore& parameters() { return *store_; }
    const WaveNetConfig& config() const { return cfg_; }

    Tensor forward(const Tensor& xt, double t, const Condition& cond) const override {
        return forward_frames(xt, t, cond.frames);
    }

    Tensor forward_frames(const Tensor& xt, double t, const Tensor& cond_frames) const {
        if (xt.rank() != 2 || xt.dim(1) != cfg_.x_channels)
            throw DimensionError("wavenet: input " + shape_str(xt.shape()) + " vs " +
                                 std::to_string(cfg_.x_channels) + " channels");
        const std::size_t T = xt.dim(0), R = cfg_.residual_channels;
        if (cond_frames.rank() != 2 || cond_frames.dim(0) != T || cond_frames.dim(1) != cfg_.cond_channels)
            throw DimensionError("wavenet: condition " + shape_str(cond_frames.shape()) + " not aligned with " +
                                 std::to_string(T) + " frames of " + std::to_string(cfg_.cond_channels) +
                                 " channels");
        const Tensor none;
        auto h = ops::conv1d(ops::transpose(xt), in_w_, in_b_);
        auto c = ops::transpose(ops::add_row(cond_(cond_frames), ops::reshape(time_(t), {R})));
        Tensor skip;
        const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const std::size_t dil = cfg_.dilations[l % cfg_.dilations.size()];
            auto a = ops::add(ops::conv1d(h, L.dil_w, L.dil_b, dil), ops::conv1d(c, L.cond_w, none));
            auto gated = ops::mul(ops::tanh(ops::slice(a, 0, 0, R)), ops::sigmoid(ops::slice(a, 0, R, 2 * R)));
            auto rs = ops::conv1d(gated, L.rs_w, L.rs_b);
            h = ops::scale(ops::add(h, ops::slice(rs, 0, 0, R)), inv_sqrt2);
            auto s = ops::slice(rs, 0, R, 2 * R);
            skip = l == 0 ? s : ops::add(skip, s);
        }
        skip = ops::scale(skip, 1.0 / std::sqrt(static_cast<double>(layers_.size())));
        auto y = ops::relu(ops::conv1d(ops::relu(skip), skip_w_, skip_b_));
        return ops::transpose(ops::conv1d(y, out_w_, out_b_));
    }

private:
    struct Layer {
        Tensor dil_w, dil_b, cond_w, rs_w, rs_b;
    };

    WaveNetConfig cfg_;
    ParameterStore own_;
    ParameterStore* store_;
    Tensor in_w_, in_b_;
    Linear cond_;
    TimeEmbedding time_;
    std::vector<Layer> layers_;
    Tensor skip_w_, skip_b_, out_w_, out_b_;
};

}  // namespace vband::flow
