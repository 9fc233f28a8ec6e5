#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vband/ops.hpp"
#include "vband/tensor.hpp"

namespace vband {

using Rng = std::mt19937_64;

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = normal(rng, 0.0, stddev);
    return Tensor(std::move(shape), std::move(v));
}

enum class Precision { F64, F32 };

/// Named trainable leaves plus non-trainable buffers (codebooks, running stats).
/// Iteration is lexicographic by name.
class ParameterStore {
public:
    struct Entry {
        Tensor tensor;
        bool trainable = true;
    };

    Tensor add(const std::string& name, Tensor init, bool trainable = true) {
        if (entries_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        init.set_requires_grad(trainable);
        entries_.emplace(name, Entry{init, trainable});
        return init;
    }

    Tensor add_normal(const std::string& name, Shape shape, Rng& rng, double stddev) {
        return add(name, randn(std::move(shape), rng, stddev));
    }

    Tensor add_zeros(const std::string& name, Shape shape) { return add(name, Tensor::zeros(std::move(shape))); }
    Tensor add_ones(const std::string& name, Shape shape) { return add(name, Tensor::ones(std::move(shape))); }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second.tensor;
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, e] : entries_)
            if (e.trainable) n += e.tensor.numel();
        return n;
    }

    void zero_grad() const {
        for (const auto& [_, e] : entries_) e.tensor.zero_grad();
    }

    /// Rounds every value through f32 (checkpoint precision).
    void round_to_f32() {
        for (auto& [_, e] : entries_)
            for (auto& v : e.tensor.mutable_data()) v = static_cast<double>(static_cast<float>(v));
    }

    /// Copies values from `other` for every name both stores share with equal shapes.
    void copy_values_from(const ParameterStore& other) {
        for (auto& [name, e] : entries_) {
            auto it = other.entries_.find(name);
            if (it == other.entries_.end()) continue;
            if (it->second.tensor.shape() != e.tensor.shape())
                throw DimensionError("copy_values_from: shape mismatch for " + name);
            auto src = it->second.tensor.data();
            std::copy(src.begin(), src.end(), e.tensor.mutable_data().begin());
        }
    }

    double grad_norm() const {
        double s = 0.0;
        for (const auto& [_, e] : entries_)
            if (e.trainable && e.tensor.has_grad())
                for (double g : e.tensor.grad_buffer()) s += g * g;
        return std::sqrt(s);
    }

    void clip_grad_norm(double max_norm) const {
        const double n = grad_norm();
        if (n <= max_norm || n == 0.0) return;
        const double k = max_norm / n;
        for (const auto& [_, e] : entries_)
            if (e.trainable && e.tensor.has_grad())
                for (double& g : e.tensor.grad_buffer()) g *= k;
    }

private:
    std::map<std::string, Entry> entries_;
};

/// Affine map x[r, in] -> [r, out].
struct Linear {
    Tensor weight;
    Tensor bias;

    Linear() = default;
    Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
           double init_scale = 1.0, bool with_bias = true) {
        weight = store.add_normal(prefix + ".weight", {in, out}, rng, init_scale / std::sqrt(static_cast<double>(in)));
        if (with_bias) bias = store.add_zeros(prefix + ".bias", {out});
    }

    static Linear zero_init(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out) {
        Linear l;
        l.weight = store.add_zeros(prefix + ".weight", {in, out});
        l.bias = store.add_zeros(prefix + ".bias", {out});
        return l;
    }

    Tensor operator()(const Tensor& x) const {
        auto y = ops::matmul(x, weight);
        return bias.empty() ? y : ops::add_row(y, bias);
    }
};

inline void sgd_step(const ParameterStore& store, double lr) {
    for (const auto& [_, e] : store.entries()) {
        if (!e.trainable || !e.tensor.has_grad()) continue;
        auto g = e.tensor.grad_buffer();
        auto w = e.tensor.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    }
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by parameter name.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::int64_t steps() const { return step_; }

    void step(ParameterStore& store, Precision precision = Precision::F64) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (const auto& [name, e] : store.entries()) {
            if (!e.trainable || !e.tensor.has_grad()) continue;
            auto& st = state_[name];
            const auto& g = e.tensor.grad_buffer();
            if (st.m.empty()) {
                st.m.assign(g.size(), 0.0);
                st.v.assign(g.size(), 0.0);
            }
            auto w = e.tensor.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                if (precision == Precision::F32) w[i] = static_cast<double>(static_cast<float>(w[i]));
            }
        }
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    std::map<std::string, Moments> state_;
    std::int64_t step_ = 0;
};

/// Sinusoidal embedding of a scalar time t in [0, 1] (scaled by 1000), width `dim` (even).
inline Tensor sinusoidal_embedding(double t, std::size_t dim) {
    if (dim % 2 != 0) throw ConfigError("sinusoidal_embedding: width must be even");
    const std::size_t half = dim / 2;
    std::vector<double> v(dim);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        v[i] = std::sin(1000.0 * t * freq);
        v[half + i] = std::cos(1000.0 * t * freq);
    }
    return Tensor({1, dim}, std::move(v));
}

/// Sinusoidal features followed by a two-layer SiLU projection.
struct TimeEmbedding {
    std::size_t freq_dim = 128;
    Linear fc1, fc2;

    TimeEmbedding() = default;
    TimeEmbedding(ParameterStore& store, const std::string& prefix, std::size_t out_dim, Rng& rng,
                  std::size_t freq_dim_ = 128)
        : freq_dim(freq_dim_),
          fc1(store, prefix + ".fc1", freq_dim_, out_dim, rng),
          fc2(store, prefix + ".fc2", out_dim, out_dim, rng) {}

    /// Returns a [1, out_dim] row.
    Tensor operator()(double t) const { return fc2(ops::silu(fc1(sinusoidal_embedding(t, freq_dim)))); }
};

}  // namespace vband
