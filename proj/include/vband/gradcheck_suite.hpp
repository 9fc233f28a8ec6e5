#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vband/gradcheck.hpp"
#include "vband/melody.hpp"
#include "vband/moe.hpp"
#include "vband/nn.hpp"
#include "vband/ops.hpp"
#include "vband/rq.hpp"
#include "vband/transformer.hpp"

namespace vband::gradsuite {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Trial {
    std::vector<Tensor> inputs;
    Fn fn;  // scalar-valued
};

struct Case {
    std::string name;
    std::function<Trial(Rng&)> make;
};

struct CaseResult {
    std::string name;
    double worst_rel_error = 0.0;
    double worst_abs_error = 0.0;
    std::size_t trials = 0;
    std::size_t coordinates = 0;
};

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Tensor uniform_tensor(Shape s, Rng& rng, double lo, double hi) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = uniform(rng, lo, hi);
    return Tensor(std::move(s), std::move(v));
}

/// Reduces a non-scalar op to a scalar with fixed random weights of its output shape.
inline Trial projected(std::vector<Tensor> inputs, std::function<Tensor(const std::vector<Tensor>&)> op, Rng& rng) {
    const auto shape = op(inputs).shape();
    auto w = randn(shape, rng);
    return {std::move(inputs), [op, w](const std::vector<Tensor>& in) { return ops::sum(ops::mul(op(in), w)); }};
}

inline Trial unary_case(Rng& rng, Tensor (*f)(const Tensor&), double lo = -2.0, double hi = 2.0) {
    const Shape s{dim(rng, 1, 5), dim(rng, 1, 6)};
    return projected({uniform_tensor(s, rng, lo, hi)}, [f](const auto& in) { return f(in[0]); }, rng);
}

inline std::vector<Case> all_cases() {
    using In = std::vector<Tensor>;
    std::vector<Case> cases;
    auto add = [&](std::string name, std::function<Trial(Rng&)> make) { cases.push_back({std::move(name), std::move(make)}); };

    add("add", [](Rng& r) {
        Shape s{dim(r, 1, 5), dim(r, 1, 6)};
        return projected({randn(s, r), randn(s, r)}, [](const In& x) { return ops::add(x[0], x[1]); }, r);
    });
    add("sub", [](Rng& r) {
        Shape s{dim(r, 1, 5), dim(r, 1, 6)};
        return projected({randn(s, r), randn(s, r)}, [](const In& x) { return ops::sub(x[0], x[1]); }, r);
    });
    add("mul", [](Rng& r) {
        Shape s{dim(r, 1, 5), dim(r, 1, 6)};
        return projected({randn(s, r), randn(s, r)}, [](const In& x) { return ops::mul(x[0], x[1]); }, r);
    });
    add("scale", [](Rng& r) {
        const double k = normal(r);
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)}, [k](const In& x) { return ops::scale(x[0], k); }, r);
    });
    add("add_scalar", [](Rng& r) {
        const double k = normal(r);
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)},
                         [k](const In& x) { return ops::add_scalar(x[0], k); }, r);
    });
    add("mul_scalar", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r), randn({1}, r)},
                         [](const In& x) { return ops::mul_scalar(x[0], x[1]); }, r);
    });
    add("add_row", [](Rng& r) {
        const auto c = dim(r, 1, 6);
        return projected({randn({dim(r, 1, 5), c}, r), randn({c}, r)},
                         [](const In& x) { return ops::add_row(x[0], x[1]); }, r);
    });
    add("mul_row", [](Rng& r) {
        const auto c = dim(r, 1, 6);
        return projected({randn({dim(r, 1, 5), c}, r), randn({c}, r)},
                         [](const In& x) { return ops::mul_row(x[0], x[1]); }, r);
    });
    add("mul_col", [](Rng& r) {
        const auto n = dim(r, 1, 5);
        return projected({randn({n, dim(r, 1, 6)}, r), randn({n, 1}, r)},
                         [](const In& x) { return ops::mul_col(x[0], x[1]); }, r);
    });
    add("broadcast_rows", [](Rng& r) {
        const auto n = dim(r, 1, 5);
        return projected({randn({dim(r, 1, 6)}, r)}, [n](const In& x) { return ops::broadcast_rows(x[0], n); }, r);
    });
    add("matmul", [](Rng& r) {
        const auto m = dim(r, 1, 5), k = dim(r, 1, 5), n = dim(r, 1, 5);
        return projected({randn({m, k}, r), randn({k, n}, r)}, [](const In& x) { return ops::matmul(x[0], x[1]); }, r);
    });
    add("transpose", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)}, [](const In& x) { return ops::transpose(x[0]); }, r);
    });
    add("reshape", [](Rng& r) {
        const auto a = dim(r, 1, 4), b = dim(r, 1, 4);
        return projected({randn({a, b}, r)}, [a, b](const In& x) { return ops::reshape(x[0], {b, a}); }, r);
    });
    add("concat", [](Rng& r) {
        const std::size_t axis = dim(r, 0, 1), c = dim(r, 1, 5), n = dim(r, 1, 4);
        Shape s1 = axis == 0 ? Shape{n, c} : Shape{c, n};
        Shape s2 = axis == 0 ? Shape{dim(r, 1, 4), c} : Shape{c, dim(r, 1, 4)};
        return projected({randn(s1, r), randn(s2, r)}, [axis](const In& x) { return ops::concat({x[0], x[1]}, axis); },
                         r);
    });
    add("slice", [](Rng& r) {
        const std::size_t axis = dim(r, 0, 1), n = dim(r, 2, 6), c = dim(r, 1, 5);
        const auto b = dim(r, 0, n - 1), e = dim(r, b + 1, n);
        Shape s = axis == 0 ? Shape{n, c} : Shape{c, n};
        return projected({randn(s, r)}, [axis, b, e](const In& x) { return ops::slice(x[0], axis, b, e); }, r);
    });
    add("gather_rows", [](Rng& r) {
        const auto rows = dim(r, 1, 5);
        std::vector<std::size_t> ids(dim(r, 1, 6));
        for (auto& i : ids) i = dim(r, 0, rows - 1);
        return projected({randn({rows, dim(r, 1, 5)}, r)}, [ids](const In& x) { return ops::gather_rows(x[0], ids); },
                         r);
    });
    add("sum", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)}, [](const In& x) { return ops::sum(x[0]); }, r);
    });
    add("mean", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)}, [](const In& x) { return ops::mean(x[0]); }, r);
    });
    add("mean_rows", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)}, [](const In& x) { return ops::mean_rows(x[0]); }, r);
    });
    add("sum_cols", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)}, [](const In& x) { return ops::sum_cols(x[0]); }, r);
    });
    add("tanh", [](Rng& r) { return unary_case(r, &ops::tanh); });
    add("sigmoid", [](Rng& r) { return unary_case(r, &ops::sigmoid); });
    add("silu", [](Rng& r) { return unary_case(r, &ops::silu); });
    add("softplus", [](Rng& r) { return unary_case(r, &ops::softplus); });
    add("exp", [](Rng& r) { return unary_case(r, &ops::exp); });
    add("log", [](Rng& r) { return unary_case(r, &ops::log, 0.5, 2.0); });
    add("square", [](Rng& r) { return unary_case(r, &ops::square); });
    add("relu", [](Rng& r) {
        // keep every coordinate clear of the kink
        auto x = uniform_tensor({dim(r, 1, 5), dim(r, 1, 6)}, r, 0.05, 2.0);
        for (auto& v : x.mutable_data())
            if (uniform(r) < 0.5) v = -v;
        return projected({x}, [](const In& in) { return ops::relu(in[0]); }, r);
    });
    add("softmax", [](Rng& r) {
        const std::size_t axis = dim(r, 0, 1);
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)},
                         [axis](const In& x) { return ops::softmax(x[0], axis); }, r);
    });
    add("log_softmax", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 1, 6)}, r)}, [](const In& x) { return ops::log_softmax(x[0]); },
                         r);
    });
    add("rmsnorm", [](Rng& r) {
        const auto c = dim(r, 1, 6);
        return projected({randn({dim(r, 1, 5), c}, r), randn({c}, r)},
                         [](const In& x) { return ops::rmsnorm(x[0], x[1]); }, r);
    });
    add("layernorm", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 2, 6)}, r)}, [](const In& x) { return ops::layernorm(x[0]); }, r);
    });
    add("adaln", [](Rng& r) {
        const auto c = dim(r, 2, 6);
        return projected({randn({dim(r, 1, 5), c}, r), randn({1, c}, r), randn({1, c}, r)},
                         [](const In& x) { return ops::adaln(x[0], x[1], x[2]); }, r);
    });
    add("conv1d", [](Rng& r) {
        const auto cin = dim(r, 1, 3), cout = dim(r, 1, 3), T = dim(r, 1, 7);
        const std::size_t k = 2 * dim(r, 0, 1) + 1, dil = dim(r, 1, 2);
        return projected({randn({cin, T}, r), randn({cout, cin, k}, r), randn({cout}, r)},
                         [dil](const In& x) { return ops::conv1d(x[0], x[1], x[2], dil); }, r);
    });
    add("cross_entropy", [](Rng& r) {
        const auto n = dim(r, 1, 5), k = dim(r, 2, 6);
        std::vector<std::size_t> t(n);
        for (auto& v : t) v = dim(r, 0, k - 1);
        const auto red = uniform(r) < 0.5 ? ops::Reduction::Mean : ops::Reduction::Sum;
        return Trial{{randn({n, k}, r)}, [t, red](const In& x) { return ops::cross_entropy(x[0], t, red); }};
    });
    add("mse", [](Rng& r) {
        Shape s{dim(r, 1, 5), dim(r, 1, 6)};
        return Trial{{randn(s, r), randn(s, r)}, [](const In& x) { return ops::mse(x[0], x[1]); }};
    });
    add("sdp_attention", [](Rng& r) {
        const auto tq = dim(r, 1, 4), tk = dim(r, 1, 4), d = dim(r, 1, 4), dv = dim(r, 1, 4);
        return projected({randn({tq, d}, r), randn({tk, d}, r), randn({tk, dv}, r)},
                         [](const In& x) { return sdp_attention(x[0], x[1], x[2]); }, r);
    });
    add("rope_rotate", [](Rng& r) {
        return projected({randn({dim(r, 1, 6), 2 * dim(r, 1, 3)}, r)}, [](const In& x) { return rope_rotate(x[0]); },
                         r);
    });
    add("style_alignment_stack", [](Rng& r) {
        const auto d = dim(r, 1, 4), layers = dim(r, 1, 3);
        return projected({randn({dim(r, 1, 4), d}, r), randn({dim(r, 1, 4), d}, r)},
                         [layers](const In& x) { return style_alignment_stack(x[0], x[1], layers); }, r);
    });
    add("phoneme_pool", [](Rng& r) {
        std::vector<std::size_t> lens(dim(r, 1, 4));
        for (auto& l : lens) l = dim(r, 1, 3);
        auto spans = rq::spans_from_durations(lens);
        const auto T = spans.back().second;
        return projected({randn({T, dim(r, 1, 4)}, r)},
                         [spans](const In& x) { return rq::phoneme_pool(x[0], spans); }, r);
    });
    add("length_regulate", [](Rng& r) {
        std::vector<std::size_t> d(dim(r, 1, 4));
        for (auto& v : d) v = dim(r, 1, 3);
        return projected({randn({d.size(), dim(r, 1, 4)}, r)},
                         [d](const In& x) { return melody::length_regulate(x[0], d); }, r);
    });
    add("gumbel_softmax", [](Rng& r) {
        const double tau = std::vector<double>{0.3, 1.0, 2.0}[dim(r, 0, 2)];
        const std::uint64_t seed = r();
        return projected({randn({dim(r, 1, 4), dim(r, 1, 5)}, r)},
                         [tau, seed](const In& x) {
                             Rng noise(seed);  // identical draws on every evaluation
                             return moe::gumbel_softmax(x[0], tau, &noise, moe::GateMode::Dense);
                         },
                         r);
    });
    add("global_mix", [](Rng& r) {
        Shape s{dim(r, 1, 4), dim(r, 1, 5)};
        return projected({randn(s, r), randn(s, r), randn({1, 2}, r)},
                         [](const In& x) { return moe::global_mix(x[0], x[1], ops::softmax(x[2], 1)); }, r);
    });
    add("channel_statistics", [](Rng& r) {
        return projected({randn({dim(r, 1, 5), dim(r, 1, 4)}, r)},
                         [](const In& x) { return moe::channel_statistics(x[0]); }, r);
    });
    add("balance_loss", [](Rng& r) {
        return Trial{{randn({dim(r, 1, 6), dim(r, 1, 4)}, r)},
                     [](const In& x) { return moe::balance_loss({ops::softmax(x[0], 1)}); }};
    });
    add("commit_loss", [](Rng& r) {
        const auto d = dim(r, 1, 4), depth = dim(r, 1, 3), codes = dim(r, 2, 6);
        std::vector<Tensor> tables;
        for (std::size_t n = 0; n < depth; ++n) tables.push_back(randn({codes, d}, r));
        auto book = rq::RQCodebook::from_codes(tables);
        return Trial{{randn({dim(r, 1, 4), d}, r)}, [book](const In& x) { return rq::commit_loss(x[0], book); }};
    });
    add("melody_loss", [](Rng& r) {
        const auto n = dim(r, 1, 5), k = dim(r, 2, 6);
        std::vector<std::size_t> cls(n);
        std::vector<double> dur(n);
        for (std::size_t i = 0; i < n; ++i) {
            cls[i] = dim(r, 0, k - 1);
            dur[i] = uniform(r, 0.25, 2.0);
        }
        return Trial{{randn({n, k}, r), randn({n}, r)},
                     [cls, dur](const In& x) { return melody::melody_loss(x[0], x[1], cls, dur); }};
    });
    add("log_duration_loss", [](Rng& r) {
        std::vector<double> target(dim(r, 1, 6));
        for (auto& t : target) t = uniform(r, 0.0, 4.0);
        return Trial{{randn({target.size()}, r)},
                     [target](const In& x) { return melody::log_duration_loss(x[0], target); }};
    });
    add("linear", [](Rng& r) {
        const auto in = dim(r, 1, 5), out = dim(r, 1, 5);
        return projected({randn({dim(r, 1, 4), in}, r), randn({in, out}, r), randn({out}, r)},
                         [](const In& x) { return ops::add_row(ops::matmul(x[0], x[1]), x[2]); }, r);
    });
    add("band_block", [](Rng& r) {
        // a block with randomised (non-zero) parameters, checked with respect to x and z_p
        auto store = std::make_shared<ParameterStore>();
        const std::size_t heads = dim(r, 1, 2), W = 2 * heads * dim(r, 1, 2), T = dim(r, 1, 4);
        auto block = std::make_shared<BandBlock<PlainFeedForward>>(*store, "b", BandBlockConfig{W, heads}, r, W, W);
        for (const auto& [_, e] : store->entries())
            for (auto& v : e.tensor.mutable_data()) v = normal(r, 0.0, 0.5);
        auto z_v = randn({T, W}, r), z_g = randn({W}, r), temb = randn({1, W}, r);
        return projected({randn({T, W}, r), randn({dim(r, 1, 3), W}, r)},
                         [store, block, z_v, z_g, temb](const In& x) {
                             BlockContext ctx{z_v, x[1], z_g, temb, 0.5};
                             return (*block)(x[0], ctx);
                         },
                         r);
    });
    add("band_moe", [](Rng& r) {
        auto store = std::make_shared<ParameterStore>();
        const std::size_t W = dim(r, 1, 4), T = dim(r, 1, 4), N = dim(r, 1, 3);
        auto state = std::make_shared<moe::RouterState>();
        state->tau = 0.7;
        auto layer = std::make_shared<moe::BandMoe>(*store, "m", moe::MoeConfig{W, W + 1, N, false}, state.get(), r);
        auto z_v = randn({T, W}, r), z_p = randn({dim(r, 1, 3), W}, r), temb = randn({1, W}, r);
        return projected({randn({T, W}, r)},
                         [store, state, layer, z_v, z_p, temb, W](const In& x) {
                             BlockContext ctx{z_v, z_p, Tensor::zeros({W}), temb, 0.5};
                             state->clear_gates();
                             return (*layer)(x[0], ctx);
                         },
                         r);
    });
    return cases;
}

inline constexpr std::size_t kTrialsPerCase = 20;
inline constexpr double kTolerance = 1e-4;

/// Runs every case over `trials` random shapes and reports the worst errors per op.
inline std::vector<CaseResult> run(std::uint64_t seed = 0, std::size_t trials = kTrialsPerCase) {
    std::vector<CaseResult> out;
    for (const auto& c : all_cases()) {
        Rng rng(seed ^ std::hash<std::string>{}(c.name));
        CaseResult res{c.name};
        for (std::size_t i = 0; i < trials; ++i) {
            auto trial = c.make(rng);
            auto g = gradcheck(trial.fn, trial.inputs);
            res.worst_rel_error = std::max(res.worst_rel_error, g.max_rel_error);
            res.worst_abs_error = std::max(res.worst_abs_error, g.max_abs_error);
            res.coordinates += g.checked;
            ++res.trials;
        }
        out.push_back(res);
    }
    return out;
}

}  // namespace vband::gradsuite
