#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "vband/nn.hpp"
#include "vband/ops.hpp"
#include "vband/transformer.hpp"

namespace vband::moe {

enum class GateMode { Dense, Hard };

inline constexpr double kTauStart = 2.0;
inline constexpr double kTauEnd = 0.3;
inline constexpr double kBalanceAlpha = 0.1;

/// Temperature annealed linearly from 2.0 to 0.3 over training progress in [0, 1].
inline double tau_schedule(double progress) {
    progress = std::clamp(progress, 0.0, 1.0);
    return kTauStart + (kTauEnd - kTauStart) * progress;
}

inline double gumbel_noise(Rng& rng) {
    // u in (0, 1) strictly so both logs stay finite
    double u = uniform(rng);
    while (u <= 0.0) u = uniform(rng);
    return -std::log(-std::log(u));
}

/// Gate weights [U, N] from routing logits [U, N].
/// Dense: softmax((logits + zeta) / tau), zeta ~ Gumbel(0,1) when `rng` is given, else 0.
/// Hard: one-hot argmax of the noise-free logits (ties resolve to the lowest index).
inline Tensor gumbel_softmax(const Tensor& logits, double tau, Rng* rng, GateMode mode) {
    if (!(tau > 0.0)) throw ConfigError("gumbel gate: temperature must be positive");
    detail::require_rank(logits, 2, "gumbel gate");
    const std::size_t U = logits.dim(0), N = logits.dim(1);
    if (mode == GateMode::Hard) {
        std::vector<double> onehot(U * N, 0.0);
        for (std::size_t u = 0; u < U; ++u) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < N; ++i)
                if (logits[u * N + i] > logits[u * N + best]) best = i;
            onehot[u * N + best] = 1.0;
        }
        return Tensor({U, N}, std::move(onehot));
    }
    Tensor z = logits;
    if (rng) {
        std::vector<double> noise(U * N);
        for (auto& v : noise) v = gumbel_noise(*rng);
        z = ops::add(logits, Tensor({U, N}, std::move(noise)));
    }
    return ops::softmax(ops::scale(z, 1.0 / tau), 1);
}

/// Routing source [U, R] projected by W_g [R, N], then gated.
inline Tensor gumbel_gate(const Tensor& route, const Tensor& w_gate, double tau, Rng* rng, GateMode mode) {
    return gumbel_softmax(ops::matmul(route, w_gate), tau, rng, mode);
}

inline double gate_entropy(std::span<const double> row) {
    double h = 0.0;
    for (double p : row)
        if (p > 0) h -= p * std::log(p);
    return h;
}

/// One routing decision recorded for route-trace output.
struct RouteEvent {
    std::string group;
    std::size_t unit = 0;
    std::size_t expert = 0;
    double entropy = 0.0;
    double tau = 0.0;
    double t = 0.0;
};

/// Per-forward routing configuration plus collected gate batches.
struct RouterState {
    double tau = kTauStart;
    GateMode mode = GateMode::Dense;
    Rng* rng = nullptr;  // Gumbel noise source for dense mode; null means noise-free
    std::vector<Tensor> aligned_gates, controlled_gates, acoustic_gates, global_gates;
    std::vector<RouteEvent>* trace = nullptr;

    void clear_gates() {
        aligned_gates.clear();
        controlled_gates.clear();
        acoustic_gates.clear();
        global_gates.clear();
    }
};

inline void trace_gates(RouterState& st, const std::string& group, const Tensor& gates, double t, double tau) {
    if (!st.trace) return;
    const std::size_t U = gates.dim(0), N = gates.dim(1);
    for (std::size_t u = 0; u < U; ++u) {
        auto row = gates.data().subspan(u * N, N);
        std::size_t best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        st.trace->push_back({group, u, best, gate_entropy(row), tau, t});
    }
}

enum class RoutingAxis { Time, Channel };

/// A group of position-wise FFN experts sharing input/output width.
class ExpertGroup {
public:
    ExpertGroup() = default;
    ExpertGroup(ParameterStore& store, const std::string& prefix, std::size_t experts, std::size_t width,
                std::size_t hidden, std::size_t route_width, RoutingAxis axis, Rng& rng)
        : axis_(axis) {
        if (experts == 0) throw ConfigError("expert group needs at least one expert");
        for (std::size_t i = 0; i < experts; ++i)
            experts_.emplace_back(store, prefix + ".expert" + std::to_string(i), width, hidden, rng);
        w_gate_ = store.add_normal(prefix + ".w_gate", {route_width, experts}, rng,
                                   1.0 / std::sqrt(static_cast<double>(route_width)));
    }

    std::size_t size() const { return experts_.size(); }
    RoutingAxis axis() const { return axis_; }
    const Tensor& gate_weight() const { return w_gate_; }
    const FeedForward& expert(std::size_t i) const { return experts_.at(i); }

    /// sum_i gates[:, i] * Expert_i(h). Time axis scales rows, channel axis scales columns.
    Tensor mix(const Tensor& h, const Tensor& gates) const {
        Tensor out;
        for (std::size_t i = 0; i < experts_.size(); ++i) {
            auto col = ops::slice(gates, 1, i, i + 1);
            auto y = experts_[i](h);
            auto term = axis_ == RoutingAxis::Time ? ops::mul_col(y, col) : ops::mul_row(y, col);
            out = i == 0 ? term : ops::add(out, term);
        }
        return out;
    }

private:
    RoutingAxis axis_ = RoutingAxis::Time;
    std::vector<FeedForward> experts_;
    Tensor w_gate_;
};

/// Aligned group: per-token gates from the vocal embedding z_v.
inline Tensor route_aligned(const ExpertGroup& group, const Tensor& h, const Tensor& z_v, RouterState& st,
                            double t = 0.0) {
    if (h.dim(0) != z_v.dim(0))
        throw DimensionError("route_aligned: h " + shape_str(h.shape()) + " vs z_v " + shape_str(z_v.shape()));
    auto gates = gumbel_gate(z_v, group.gate_weight(), st.tau, st.rng, st.mode);
    st.aligned_gates.push_back(gates);
    trace_gates(st, "aligned", gates, t, st.tau);
    return group.mix(h, gates);
}

/// Controlled group: z_sty = CrossAttention(h, z_p, z_p) selects experts per token.
inline Tensor route_controlled(const ExpertGroup& group, const Tensor& h, const Tensor& z_p, RouterState& st,
                               double t = 0.0) {
    auto z_sty = sdp_attention(h, z_p, z_p);
    auto gates = gumbel_gate(z_sty, group.gate_weight(), st.tau, st.rng, st.mode);
    st.controlled_gates.push_back(gates);
    trace_gates(st, "controlled", gates, t, st.tau);
    return group.mix(h, gates);
}

/// alpha * o_aligned + beta * o_controlled with alpha + beta = 1.
inline Tensor global_mix(const Tensor& o_aligned, const Tensor& o_controlled, const Tensor& alpha_beta) {
    if (alpha_beta.numel() != 2) throw DimensionError("global_mix: expected two global weights");
    auto flat = ops::reshape(alpha_beta, {2});
    return ops::add(ops::mul_scalar(o_aligned, ops::slice(flat, 0, 0, 1)),
                    ops::mul_scalar(o_controlled, ops::slice(flat, 0, 1, 2)));
}

/// Global router: always dense, even when the other groups run in hard mode.
inline Tensor global_weights(const Tensor& temb, const Tensor& w_global, RouterState& st, double t = 0.0) {
    auto g = gumbel_gate(temb, w_global, st.tau, st.mode == GateMode::Dense ? st.rng : nullptr, GateMode::Dense);
    st.global_gates.push_back(g);
    trace_gates(st, "global", g, t, st.tau);
    return g;
}

/// Per-channel routing statistics: [W, 2] of (mean, variance) over time.
inline Tensor channel_statistics(const Tensor& x) {
    auto mu = ops::mean_rows(x);
    auto centered = ops::add_row(x, ops::scale(mu, -1.0));
    auto var = ops::mean_rows(ops::square(centered));
    const std::size_t W = x.cols();
    return ops::concat({ops::reshape(mu, {W, 1}), ops::reshape(var, {W, 1})}, 1);
}

/// Acoustic group: one gate vector per feature channel, pooled over time.
inline Tensor route_acoustic(const ExpertGroup& group, const Tensor& o_combined, RouterState& st, double t = 0.0) {
    auto gates = gumbel_gate(channel_statistics(o_combined), group.gate_weight(), st.tau, st.rng, st.mode);
    st.acoustic_gates.push_back(gates);
    trace_gates(st, "acoustic", gates, t, st.tau);
    return group.mix(o_combined, gates);
}

enum class BalanceForm { Switch, Literal };

/// Load-balancing regulariser over a batch of dense gates [B, N].
/// Switch (default): alpha * N * sum_i f_i * P_i, with f_i the argmax share and P_i the mean gate.
/// Literal: alpha * N * sum_i P_i, which equals alpha * N whenever gates are normalised.
inline Tensor balance_loss(const std::vector<Tensor>& gate_batches, double alpha = kBalanceAlpha,
                           BalanceForm form = BalanceForm::Switch) {
    if (gate_batches.empty()) throw DimensionError("balance_loss: no gates");
    auto gates = gate_batches.size() == 1 ? gate_batches.front() : ops::concat(gate_batches, 0);
    const std::size_t B = gates.dim(0), N = gates.dim(1);
    auto P = ops::mean_rows(gates);
    const double scale = alpha * static_cast<double>(N);
    if (form == BalanceForm::Literal) return ops::scale(ops::sum(P), scale);
    std::vector<double> f(N, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < N; ++i)
            if (gates[b * N + i] > gates[b * N + best]) best = i;
        f[best] += 1.0 / static_cast<double>(B);
    }
    return ops::scale(ops::sum(ops::mul(Tensor::vector(std::move(f)), P)), scale);
}

struct MoeConfig {
    std::size_t width = 64;
    std::size_t hidden = 128;
    std::size_t experts = 4;
    /// Skip gating and call expert 0 of every group directly (ablation reference).
    bool plain = false;
};

/// Aligned + Controlled experts, global time router, then Acoustic experts.
class BandMoe {
public:
    BandMoe() = default;
    BandMoe(ParameterStore& store, const std::string& prefix, MoeConfig cfg, RouterState* state, Rng& rng)
        : cfg_(cfg), state_(state) {
        aligned_ = ExpertGroup(store, prefix + ".aligned", cfg.experts, cfg.width, cfg.hidden, cfg.width,
                               RoutingAxis::Time, rng);
        controlled_ = ExpertGroup(store, prefix + ".controlled", cfg.experts, cfg.width, cfg.hidden, cfg.width,
                                  RoutingAxis::Time, rng);
        acoustic_ = ExpertGroup(store, prefix + ".acoustic", cfg.experts, cfg.width, cfg.hidden, 2,
                                RoutingAxis::Channel, rng);
        w_global_ = store.add_normal(prefix + ".w_global", {cfg.width, 2}, rng,
                                     1.0 / std::sqrt(static_cast<double>(cfg.width)));
    }

    const ExpertGroup& aligned() const { return aligned_; }
    const ExpertGroup& controlled() const { return controlled_; }
    const ExpertGroup& acoustic() const { return acoustic_; }

    Tensor operator()(const Tensor& u, BlockContext& ctx) const {
        RouterState local;
        RouterState& st = state_ ? *state_ : local;
        auto ab = global_weights(ctx.temb, w_global_, st, ctx.t);
        Tensor combined;
        if (cfg_.plain) {
            combined = global_mix(aligned_.expert(0)(u), controlled_.expert(0)(u), ab);
            return acoustic_.expert(0)(combined);
        }
        auto o_a = route_aligned(aligned_, u, ctx.z_v, st, ctx.t);
        auto o_c = route_controlled(controlled_, u, ctx.z_p, st, ctx.t);
        combined = global_mix(o_a, o_c, ab);
        return route_acoustic(acoustic_, combined, st, ctx.t);
    }

private:
    MoeConfig cfg_;
    RouterState* state_ = nullptr;
    ExpertGroup aligned_, controlled_, acoustic_;
    Tensor w_global_;
};

}  // namespace vband::moe
