#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vband/band.hpp"
#include "vband/checkpoint.hpp"
#include "vband/config.hpp"
#include "vband/flow.hpp"
#include "vband/melody.hpp"
#include "vband/metrics.hpp"
#include "vband/moe.hpp"
#include "vband/style.hpp"
#include "vband/synth.hpp"

namespace vband {

struct RunConfig {
    ModelKind model = ModelKind::Flow2d;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    std::string out = "run";
    double gamma = 3.0;
    std::string trace;
    double lr = 0.0;
    std::size_t batch = 0;
    std::size_t train_size = 0;
    std::size_t eval_size = 0;
    flow::FlowConfig flow;
    std::size_t warmup = 0;
    Precision precision = Precision::F64;
    BandModelConfig band;
    moe::BalanceForm balance = moe::BalanceForm::Switch;
    double balance_alpha = moe::kBalanceAlpha;
    std::size_t samples = 2000;
    std::string checkpoint;
    std::size_t log_every = 0;
    double vocal_drop = 0.2;
    double text_drop = 0.1;

    std::string checkpoint_path() const { return checkpoint.empty() ? out + "/checkpoint.vbnd" : checkpoint; }

    /// Builds a configuration, filling per-model defaults for keys that are absent.
    static RunConfig from(const ConfigMap& m) {
        m.require_known(known_config_keys());
        RunConfig c;
        c.model = parse_model(m.str("model", "flow2d"));
        struct Defaults {
            std::size_t steps, batch, train, eval, timesteps;
            double lr;
        };
        Defaults d{};
        switch (c.model) {
            case ModelKind::Flow2d: d = {3000, 256, 4000, 0, 100, 2e-3}; break;
            case ModelKind::Accomp: d = {300, 16, 512, 16, 1000, 2e-3}; break;
            case ModelKind::Melody: d = {600, 16, 400, 50, 100, 3e-3}; break;
            case ModelKind::Style: d = {400, 8, 256, 32, 100, 2e-3}; break;
        }
        c.seed = m.count("seed", 0);
        c.steps = m.count("steps", d.steps);
        c.out = m.str("out", "run");
        c.gamma = m.real("gamma", 3.0);
        c.trace = m.str("trace", "");
        c.lr = m.real("lr", d.lr);
        c.batch = m.count("batch", d.batch);
        c.train_size = m.count("train_size", d.train);
        c.eval_size = m.count("eval_size", d.eval);
        c.flow.train_timesteps = m.count("train_timesteps", d.timesteps);
        c.flow.infer_steps = m.count("infer_steps", 25);
        c.flow.cfg_scale = c.gamma;
        c.flow.cond_drop_prob = m.real("cond_drop", 0.2);
        const auto ts = m.str("time_sampling", "grid");
        if (ts == "grid")
            c.flow.time_sampling = flow::TimeSampling::Grid;
        else if (ts == "continuous")
            c.flow.time_sampling = flow::TimeSampling::Continuous;
        else
            throw ConfigError("time_sampling must be grid or continuous");
        c.warmup = m.count("warmup", 0);
        const auto prec = m.str("precision", "f64");
        if (prec != "f64" && prec != "f32") throw ConfigError("precision must be f64 or f32");
        c.precision = prec == "f32" ? Precision::F32 : Precision::F64;
        c.band.experts = m.count("experts", c.band.experts);
        c.band.plain = m.flag("plain", false);
        c.band.width = m.count("width", c.band.width);
        c.band.blocks = m.count("blocks", c.band.blocks);
        c.band.heads = m.count("heads", c.band.heads);
        c.band.expert_hidden = m.count("expert_hidden", c.band.expert_hidden);
        c.band.tags = m.count("tags", c.band.tags);
        const auto bal = m.str("balance", "switch");
        if (bal != "switch" && bal != "literal") throw ConfigError("balance must be switch or literal");
        c.balance = bal == "literal" ? moe::BalanceForm::Literal : moe::BalanceForm::Switch;
        c.balance_alpha = m.real("balance_alpha", moe::kBalanceAlpha);
        c.samples = m.count("samples", 2000);
        c.checkpoint = m.str("checkpoint", "");
        c.log_every = m.count("log_every", 0);
        c.vocal_drop = m.real("vocal_drop", 0.2);
        c.text_drop = m.real("text_drop", 0.1);
        c.validate();
        return c;
    }

    void validate() const {
        flow.validate();
        if (steps == 0) throw ConfigError("steps must be positive");
        if (batch == 0) throw ConfigError("batch must be positive");
        if (!(lr > 0)) throw ConfigError("lr must be positive");
        if (train_size == 0) throw ConfigError("train_size must be positive");
        if (model != ModelKind::Flow2d && eval_size == 0) throw ConfigError("eval_size must be positive");
        if (warmup > steps) throw ConfigError("warmup exceeds steps");
        for (double p : {vocal_drop, text_drop})
            if (p < 0 || p > 1) throw ConfigError("drop probabilities must lie in [0, 1]");
    }
};

/// One row of a training-loss CSV.
struct LossRow {
    std::size_t step = 0;
    double loss = 0.0;
    double aux = 0.0;  // balance loss (accomp) or commitment loss (style)
};

namespace pipeline {

inline void check_finite(double loss, std::size_t step) {
    if (!std::isfinite(loss)) throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
}

/// Linear decay from lr to lr / 10 over the run.
inline double lr_at(const RunConfig& c, std::size_t step) {
    const double p = c.steps > 1 ? static_cast<double>(step) / static_cast<double>(c.steps - 1) : 0.0;
    return c.lr * (1.0 - 0.9 * p);
}

inline void log_step(const RunConfig& c, std::size_t step, double loss) {
    if (c.log_every && (step % c.log_every == 0 || step + 1 == c.steps))
        std::clog << model_name(c.model) << " step " << step << " loss " << loss << '\n';
}

/// Creates `dir` and proves it writable before any work starts.
inline void prepare_output(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir + ": " + ec.message());
    const auto probe = std::filesystem::path(dir) / ".vband_write_probe";
    {
        std::ofstream f(probe);
        if (!f) throw DataError("output directory is not writable: " + dir);
    }
    std::filesystem::remove(probe, ec);
}

inline std::ofstream open_csv(const std::string& path, const std::string& header) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f.precision(10);
    f << header << '\n';
    return f;
}

inline void write_losses(const std::string& path, const std::vector<LossRow>& rows, const std::string& aux_name) {
    auto f = open_csv(path, "step,loss" + (aux_name.empty() ? std::string() : "," + aux_name));
    for (const auto& r : rows) {
        f << r.step << ',' << r.loss;
        if (!aux_name.empty()) f << ',' << r.aux;
        f << '\n';
    }
}

inline void write_route_trace(const std::string& path, const std::vector<moe::RouteEvent>& events) {
    auto f = open_csv(path, "group,unit,expert,entropy,tau,t");
    for (const auto& e : events)
        f << e.group << ',' << e.unit << ',' << e.expert << ',' << e.entropy << ',' << e.tau << ',' << e.t << '\n';
}

inline void write_sample_trace(const std::string& path, const std::vector<flow::TraceRow>& rows) {
    auto f = open_csv(path, "step,t,mean_abs_x,mean_abs_v");
    for (const auto& r : rows) f << r.step << ',' << r.t << ',' << r.mean_abs_x << ',' << r.mean_abs_v << '\n';
}

inline Tensor row_of(const Tensor& m, std::size_t i) { return ops::slice(m, 0, i, i + 1).clone(); }

inline std::size_t pick(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

// Held-out sets use a seed far from the training seed.
inline std::uint64_t eval_seed(std::uint64_t seed) { return seed + 1'000'003; }

}  // namespace pipeline

// ---------------------------------------------------------------------------
// 2-D mixture

struct Flow2dReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double mean_neg[2] = {0, 0};
    double mean_pos[2] = {0, 0};
    double weight_neg = 0.0;
    double weight_pos = 0.0;
};

inline flow::MlpEstimator make_flow2d_model(const RunConfig& c) {
    Rng rng(c.seed);
    return flow::MlpEstimator(flow::MlpEstimator::Config{}, rng);
}

inline std::vector<LossRow> train_flow2d(const RunConfig& c, flow::MlpEstimator& est) {
    const auto data = synth::gen_flow2d(c.seed, c.train_size);
    Rng rng(c.seed + 1);
    Adam adam(AdamConfig{c.lr});
    std::vector<LossRow> rows;
    for (std::size_t step = 0; step < c.steps; ++step) {
        std::vector<flow::FlowSample> batch;
        std::vector<flow::Condition> conds(c.batch);
        for (std::size_t b = 0; b < c.batch; ++b)
            batch.push_back(flow::make_flow_sample(pipeline::row_of(data, pipeline::pick(rng, c.train_size)), rng, c.flow));
        Tape tape;
        auto loss = flow::cfm_loss(est, batch, conds);
        pipeline::check_finite(loss.item(), step);
        tape.backward(loss);
        adam.set_lr(pipeline::lr_at(c, step));
        adam.step(est.parameters(), c.precision);
        est.parameters().zero_grad();
        rows.push_back({step, loss.item(), 0.0});
        pipeline::log_step(c, step, loss.item());
    }
    return rows;
}

inline Tensor sample_flow2d(const RunConfig& c, const flow::MlpEstimator& est,
                            std::vector<flow::TraceRow>* trace = nullptr) {
    Rng rng(pipeline::eval_seed(c.seed));
    flow::SampleOptions opt;
    opt.trace = trace;
    return flow::euler_sample(est, randn({c.samples, 2}, rng), flow::Condition{}, c.flow, opt);
}

inline Flow2dReport mode_statistics(const Tensor& samples) {
    Flow2dReport r;
    std::size_t nn = 0, np = 0;
    for (std::size_t i = 0; i < samples.dim(0); ++i) {
        const double x = samples[2 * i], y = samples[2 * i + 1];
        double* m = x < 0 ? r.mean_neg : r.mean_pos;
        m[0] += x;
        m[1] += y;
        ++(x < 0 ? nn : np);
    }
    for (int k = 0; k < 2; ++k) {
        if (nn) r.mean_neg[k] /= static_cast<double>(nn);
        if (np) r.mean_pos[k] /= static_cast<double>(np);
    }
    r.weight_neg = static_cast<double>(nn) / static_cast<double>(samples.dim(0));
    r.weight_pos = static_cast<double>(np) / static_cast<double>(samples.dim(0));
    return r;
}

inline double tail_mean(const std::vector<LossRow>& rows, std::size_t n = 50) {
    if (rows.empty()) return 0.0;
    n = std::min(n, rows.size());
    double s = 0;
    for (std::size_t i = rows.size() - n; i < rows.size(); ++i) s += rows[i].loss;
    return s / static_cast<double>(n);
}

inline Flow2dReport run_flow2d(const RunConfig& c) {
    pipeline::prepare_output(c.out);
    auto est = make_flow2d_model(c);
    const auto rows = train_flow2d(c, est);
    est.parameters().round_to_f32();
    checkpoint::save(c.checkpoint_path(), est.parameters());
    pipeline::write_losses(c.out + "/losses.csv", rows, "");
    std::vector<flow::TraceRow> trace;
    auto samples = sample_flow2d(c, est, c.trace.empty() ? nullptr : &trace);
    if (!c.trace.empty()) pipeline::write_sample_trace(c.trace, trace);
    auto r = mode_statistics(samples);
    r.initial_loss = rows.front().loss;
    r.final_loss = tail_mean(rows);
    auto f = pipeline::open_csv(c.out + "/metrics.csv",
                                "mean_neg_x,mean_neg_y,mean_pos_x,mean_pos_y,weight_neg,weight_pos");
    f << r.mean_neg[0] << ',' << r.mean_neg[1] << ',' << r.mean_pos[0] << ',' << r.mean_pos[1] << ','
      << r.weight_neg << ',' << r.weight_pos << '\n';
    return r;
}

// ---------------------------------------------------------------------------
// Band-MOE accompaniment

struct AccompEval {
    double pearson = 0.0;      // mean per-item correlation with the tag-true transform
    double consistency = 0.0;  // fraction of items whose nearest tag transform is the true tag
};

struct AccompReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    AccompEval guided;       // at the configured gamma
    AccompEval unguided;     // gamma = 1
    AccompEval strong;       // gamma = 3
    double alpha_early = 0.0;  // mean global alpha for t < 0.25
    double alpha_late = 0.0;   // mean global alpha for t > 0.75
};

inline synth::PairConfig pair_config(const RunConfig& c) {
    synth::PairConfig pc;
    pc.channels = c.band.channels;
    pc.tags = c.band.tags;
    return pc;
}

inline std::unique_ptr<BandModel> make_accomp_model(const RunConfig& c) {
    Rng rng(c.seed);
    return std::make_unique<BandModel>(c.band, rng);
}

inline std::vector<LossRow> train_accomp(const RunConfig& c, BandModel& model) {
    const auto pc = pair_config(c);
    const auto data = synth::gen_toy_pairs(c.seed, c.train_size, pc);
    Rng rng(c.seed + 1);
    Adam adam(AdamConfig{c.lr});
    auto& router = model.router();
    std::vector<LossRow> rows;
    for (std::size_t step = 0; step < c.steps; ++step) {
        const double progress = c.steps > 1 ? static_cast<double>(step) / static_cast<double>(c.steps - 1) : 1.0;
        router.tau = moe::tau_schedule(progress);
        router.mode = moe::GateMode::Dense;
        router.rng = &rng;
        router.trace = nullptr;
        router.clear_gates();
        std::vector<flow::FlowSample> batch;
        std::vector<flow::Condition> conds;
        for (std::size_t b = 0; b < c.batch; ++b) {
            const auto& p = data[pipeline::pick(rng, data.size())];
            batch.push_back(flow::make_flow_sample(p.a, rng, c.flow));
            conds.push_back({p.v, {p.tag}});
        }
        Tape tape;
        auto fm = flow::cfm_loss(model, batch, conds, c.flow.cond_drop_prob, &rng);
        auto bal = model.balance_loss(c.balance_alpha, c.balance);
        auto loss = ops::add(fm, bal);
        pipeline::check_finite(loss.item(), step);
        tape.backward(loss);
        model.parameters().clip_grad_norm(1.0);
        adam.set_lr(pipeline::lr_at(c, step));
        adam.step(model.parameters(), c.precision);
        model.parameters().zero_grad();
        rows.push_back({step, loss.item(), bal.item()});
        pipeline::log_step(c, step, loss.item());
    }
    router.rng = nullptr;
    router.clear_gates();
    return rows;
}

/// Inference routing: hard expert choice, final temperature, no noise.
inline void set_inference_routing(BandModel& model, std::vector<moe::RouteEvent>* trace = nullptr) {
    auto& r = model.router();
    r.mode = moe::GateMode::Hard;
    r.tau = moe::kTauEnd;
    r.rng = nullptr;
    r.trace = trace;
    r.clear_gates();
}

inline Tensor generate_accomp(const RunConfig& c, const BandModel& model, const synth::ToyPair& item, double gamma,
                              std::uint64_t noise_seed, std::vector<flow::TraceRow>* trace = nullptr) {
    Rng rng(noise_seed);
    auto fc = c.flow;
    fc.cfg_scale = gamma;
    flow::SampleOptions opt;
    opt.guidance = gamma != 1.0;
    opt.trace = trace;
    auto out = flow::euler_sample(model, randn(item.a.shape(), rng), flow::Condition{item.v, {item.tag}}, fc, opt);
    model.router().clear_gates();
    return out;
}

inline std::size_t nearest_tag(const Tensor& gen, const Tensor& v, const synth::PairConfig& pc) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < pc.tags; ++k) {
        const auto ref = synth::tag_transform(v, k, pc);
        double d = 0;
        for (std::size_t i = 0; i < gen.numel(); ++i) d += (gen[i] - ref[i]) * (gen[i] - ref[i]);
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

inline AccompEval evaluate_accomp(const RunConfig& c, BandModel& model, const std::vector<synth::ToyPair>& items,
                                  double gamma) {
    set_inference_routing(model);
    const auto pc = pair_config(c);
    AccompEval e;
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto gen = generate_accomp(c, model, items[i], gamma, pipeline::eval_seed(c.seed) + i);
        e.pearson += synth::pearson(gen, synth::tag_transform(items[i].v, items[i].tag, pc));
        e.consistency += nearest_tag(gen, items[i].v, pc) == items[i].tag ? 1.0 : 0.0;
    }
    e.pearson /= static_cast<double>(items.size());
    e.consistency /= static_cast<double>(items.size());
    return e;
}

/// Mean global-router alpha at early and late flow times over the held-out items.
inline std::pair<double, double> alpha_by_time(const RunConfig& c, BandModel& model,
                                               const std::vector<synth::ToyPair>& items) {
    set_inference_routing(model);
    Rng rng(pipeline::eval_seed(c.seed) + 17);
    double early = 0, late = 0;
    std::size_t ne = 0, nl = 0;
    for (const auto& item : items)
        for (double t : {0.05, 0.1, 0.15, 0.2, 0.8, 0.85, 0.9, 0.95}) {
            auto s = flow::make_flow_sample(item.a, randn(item.a.shape(), rng), t);
            model.forward(s.xt, t, flow::Condition{item.v, {item.tag}});
            for (const auto& g : model.router().global_gates) (t < 0.25 ? early : late) += g[0];
            (t < 0.25 ? ne : nl) += model.router().global_gates.size();
            model.router().clear_gates();
        }
    return {early / static_cast<double>(ne), late / static_cast<double>(nl)};
}

/// Routing trace of one held-out generation.
inline std::vector<moe::RouteEvent> trace_routes(const RunConfig& c, BandModel& model, const synth::ToyPair& item) {
    std::vector<moe::RouteEvent> events;
    set_inference_routing(model, &events);
    generate_accomp(c, model, item, c.gamma, pipeline::eval_seed(c.seed));
    model.router().trace = nullptr;
    return events;
}

inline std::vector<synth::ToyPair> accomp_eval_set(const RunConfig& c) {
    return synth::gen_toy_pairs(pipeline::eval_seed(c.seed), c.eval_size, pair_config(c));
}

inline AccompReport run_accomp(const RunConfig& c) {
    pipeline::prepare_output(c.out);
    auto model = make_accomp_model(c);
    const auto rows = train_accomp(c, *model);
    model->parameters().round_to_f32();
    checkpoint::save(c.checkpoint_path(), model->parameters());
    pipeline::write_losses(c.out + "/losses.csv", rows, "balance");
    const auto held = accomp_eval_set(c);
    AccompReport r;
    r.initial_loss = rows.front().loss;
    r.final_loss = tail_mean(rows);
    r.unguided = evaluate_accomp(c, *model, held, 1.0);
    r.strong = evaluate_accomp(c, *model, held, 3.0);
    r.guided = c.gamma == 1.0 ? r.unguided : c.gamma == 3.0 ? r.strong : evaluate_accomp(c, *model, held, c.gamma);
    std::tie(r.alpha_early, r.alpha_late) = alpha_by_time(c, *model, held);
    pipeline::write_route_trace(c.trace.empty() ? c.out + "/route_trace.csv" : c.trace,
                                trace_routes(c, *model, held.front()));
    auto f = pipeline::open_csv(c.out + "/metrics.csv",
                                "gamma,pearson,tag_consistency,pearson_g1,tag_consistency_g1,pearson_g3,"
                                "tag_consistency_g3,alpha_early,alpha_late");
    f << c.gamma << ',' << r.guided.pearson << ',' << r.guided.consistency << ',' << r.unguided.pearson << ','
      << r.unguided.consistency << ',' << r.strong.pearson << ',' << r.strong.consistency << ',' << r.alpha_early
      << ',' << r.alpha_late << '\n';
    return r;
}

struct ReductionCheck {
    bool bitwise = false;
    double max_abs_diff = 0.0;
};

/// Trains a one-expert model briefly, ties its parameters into the gating-free reference and
/// compares the two on held-out inputs.
inline ReductionCheck reduction_check(RunConfig c, std::size_t steps = 3) {
    c.band.experts = 1;
    c.band.plain = false;
    c.steps = steps;
    auto moe_model = make_accomp_model(c);
    train_accomp(c, *moe_model);
    auto ref_cfg = c;
    ref_cfg.band.plain = true;
    auto ref = make_accomp_model(ref_cfg);
    ref->parameters().copy_values_from(moe_model->parameters());
    set_inference_routing(*moe_model);
    set_inference_routing(*ref);
    ReductionCheck r{true, 0.0};
    const auto held = accomp_eval_set(c);
    Rng rng(c.seed + 5);
    for (std::size_t i = 0; i < std::min<std::size_t>(4, held.size()); ++i)
        for (double t : {0.0, 0.3, 0.9}) {
            auto s = flow::make_flow_sample(held[i].a, randn(held[i].a.shape(), rng), t);
            for (const auto& cond : {flow::Condition{held[i].v, {held[i].tag}}, flow::Condition{held[i].v, {}}}) {
                auto y1 = moe_model->forward(s.xt, t, cond);
                auto y2 = ref->forward(s.xt, t, cond);
                for (std::size_t k = 0; k < y1.numel(); ++k) {
                    if (y1[k] != y2[k]) r.bitwise = false;
                    r.max_abs_diff = std::max(r.max_abs_diff, std::abs(y1[k] - y2[k]));
                }
            }
            moe_model->router().clear_gates();
            ref->router().clear_gates();
        }
    return r;
}

// ---------------------------------------------------------------------------
// Melody

struct MelodyRunReport {
    double pitch_accuracy = 0.0;
    metrics::MelodyReport model;
    metrics::MelodyReport random;
};

inline std::unique_ptr<melody::MelodyModel> make_melody_model(const RunConfig& c) {
    Rng rng(c.seed);
    return std::make_unique<melody::MelodyModel>(melody::MelodyConfig{}, rng);
}

inline std::vector<LossRow> train_melody(const RunConfig& c, melody::MelodyModel& model) {
    const auto songs = synth::gen_melody(c.seed, c.train_size);
    Rng rng(c.seed + 1);
    Adam adam(AdamConfig{c.lr});
    std::vector<LossRow> rows;
    for (std::size_t step = 0; step < c.steps; ++step) {
        Tape tape;
        Tensor total;
        std::size_t notes = 0;
        for (std::size_t b = 0; b < c.batch; ++b) {
            const auto& s = songs[pipeline::pick(rng, songs.size())];
            auto out = model.forward(s.input);
            auto l = melody::melody_loss(out.logits, out.durations, s.notes);
            total = b == 0 ? l : ops::add(total, l);
            notes += s.notes.size();
        }
        auto loss = ops::scale(total, 1.0 / static_cast<double>(notes));
        pipeline::check_finite(loss.item(), step);
        tape.backward(loss);
        adam.set_lr(pipeline::lr_at(c, step));
        adam.step(model.parameters(), c.precision);
        model.parameters().zero_grad();
        rows.push_back({step, loss.item(), 0.0});
        pipeline::log_step(c, step, loss.item());
    }
    return rows;
}

inline std::vector<synth::MelodySong> melody_eval_set(const RunConfig& c) {
    return synth::gen_melody(pipeline::eval_seed(c.seed), c.eval_size);
}

/// Uniformly random pitches in [48, 96) with the ground-truth rhythm.
inline melody::NoteSequence random_melody(const melody::NoteSequence& gt, Rng& rng) {
    auto seq = gt;
    for (auto& p : seq.pitches) p = std::uniform_int_distribution<int>(48, 95)(rng);
    return seq;
}

inline MelodyRunReport evaluate_melody(const RunConfig& c, const melody::MelodyModel& model,
                                       const std::vector<synth::MelodySong>& songs,
                                       std::vector<melody::NoteSequence>* generated = nullptr) {
    MelodyRunReport r;
    std::size_t correct = 0, total = 0;
    std::vector<metrics::MelodyReport> per_model, per_random;
    Rng rng(pipeline::eval_seed(c.seed) + 29);
    for (const auto& s : songs) {
        auto gen = model.predict(s.input, s.notes.tempo);
        for (std::size_t i = 0; i < gen.size(); ++i) correct += gen.pitches[i] == s.notes.pitches[i];
        total += gen.size();
        const metrics::Key key{synth::grammar_tonic(s.tag), metrics::Mode::Major};
        per_model.push_back(metrics::evaluate_song(gen, s.notes, key));
        per_random.push_back(metrics::evaluate_song(random_melody(s.notes, rng), s.notes, key));
        if (generated) generated->push_back(std::move(gen));
    }
    r.pitch_accuracy = static_cast<double>(correct) / static_cast<double>(total);
    r.model = metrics::average(per_model);
    r.random = metrics::average(per_random);
    return r;
}

inline void write_melody_report(const std::string& path, const MelodyRunReport& r) {
    auto f = pipeline::open_csv(path, std::string("system,") + metrics::kReportHeader);
    f << "model," << metrics::report_row(r.model) << '\n';
    f << "random," << metrics::report_row(r.random) << '\n';
}

inline MelodyRunReport run_melody(const RunConfig& c) {
    pipeline::prepare_output(c.out);
    auto model = make_melody_model(c);
    const auto rows = train_melody(c, *model);
    model->parameters().round_to_f32();
    checkpoint::save(c.checkpoint_path(), model->parameters());
    pipeline::write_losses(c.out + "/losses.csv", rows, "");
    auto r = evaluate_melody(c, *model, melody_eval_set(c));
    write_melody_report(c.out + "/report.csv", r);
    auto f = pipeline::open_csv(c.out + "/metrics.csv", "pitch_accuracy,ka_model,ka_random");
    f << r.pitch_accuracy << ',' << r.model.ka << ',' << r.random.ka << '\n';
    return r;
}

// ---------------------------------------------------------------------------
// Style predictor

struct StyleReport {
    double initial_eval_loss = 0.0;
    double final_eval_loss = 0.0;
};

inline constexpr double kCommitWeight = 0.25;

inline std::unique_ptr<StylePredictor> make_style_model(const RunConfig& c) {
    Rng rng(c.seed);
    return std::make_unique<StylePredictor>(StylePredictorConfig{}, rng);
}

inline std::vector<synth::StyleItem> style_eval_set(const RunConfig& c) {
    return synth::gen_style_toy(pipeline::eval_seed(c.seed), c.eval_size);
}

/// Flow loss on held-out items with full prompts and a fixed noise/time draw.
inline double style_eval_loss(const RunConfig& c, const StylePredictor& model,
                              const std::vector<synth::StyleItem>& items) {
    Rng rng(pipeline::eval_seed(c.seed) + 41);
    double sse = 0.0;
    std::size_t n = 0;
    for (const auto& item : items) {
        const auto s = flow::make_flow_sample(item.target, rng, c.flow);
        const auto v = model.field(s.xt, s.t, model.condition(item));
        for (std::size_t i = 0; i < v.numel(); ++i) sse += (v[i] - s.u[i]) * (v[i] - s.u[i]);
        n += v.numel();
    }
    return sse / static_cast<double>(n);
}

/// During the first `warmup` steps only the encoder side trains; the flow estimator stays frozen.
inline std::vector<LossRow> train_style(const RunConfig& c, StylePredictor& model) {
    const auto items = synth::gen_style_toy(c.seed, c.train_size);
    Rng rng(c.seed + 1);
    Adam enc_opt(AdamConfig{c.lr}), est_opt(AdamConfig{c.lr});
    std::bernoulli_distribution vocal_drop(c.vocal_drop), text_drop(c.text_drop);
    std::vector<LossRow> rows;
    for (std::size_t step = 0; step < c.steps; ++step) {
        Tape tape;
        Tensor fm, commit;
        std::size_t elements = 0, commit_elements = 0;
        std::vector<rq::StyleCode> codes;
        for (std::size_t b = 0; b < c.batch; ++b) {
            const auto& item = items[pipeline::pick(rng, items.size())];
            PromptDrop drop{vocal_drop(rng), text_drop(rng)};
            auto cond = model.condition(item, drop);
            auto s = flow::make_flow_sample(item.target, rng, c.flow);
            auto v = model.field(s.xt, s.t, cond);
            auto term = ops::sum(ops::square(ops::sub(v, s.u)));
            fm = b == 0 ? term : ops::add(fm, term);
            elements += v.numel();
            if (!cond.z_e.empty()) {
                auto cl = rq::commit_loss(cond.z_e, cond.code);
                commit = commit.empty() ? cl : ops::add(commit, cl);
                commit_elements += cond.z_e.numel();
                codes.push_back(std::move(cond.code));
            }
        }
        auto loss = ops::scale(fm, 1.0 / static_cast<double>(elements));
        double commit_value = 0.0;
        if (!commit.empty()) {
            auto cm = ops::scale(commit, kCommitWeight / static_cast<double>(commit_elements));
            commit_value = cm.item();
            loss = ops::add(loss, cm);
        }
        pipeline::check_finite(loss.item(), step);
        tape.backward(loss);
        const double lr = pipeline::lr_at(c, step);
        enc_opt.set_lr(lr);
        enc_opt.step(model.encoder_parameters(), c.precision);
        if (step >= c.warmup) {
            est_opt.set_lr(lr);
            est_opt.step(model.estimator_parameters(), c.precision);
        }
        model.encoder_parameters().zero_grad();
        model.estimator_parameters().zero_grad();
        if (!codes.empty()) rq::codebook_update(model.codebook(), codes);
        rows.push_back({step, loss.item(), commit_value});
        pipeline::log_step(c, step, loss.item());
    }
    return rows;
}

inline void round_style_to_f32(StylePredictor& m) {
    m.encoder_parameters().round_to_f32();
    m.estimator_parameters().round_to_f32();
}

inline StyleReport run_style(const RunConfig& c) {
    pipeline::prepare_output(c.out);
    auto model = make_style_model(c);
    const auto held = style_eval_set(c);
    StyleReport r;
    r.initial_eval_loss = style_eval_loss(c, *model, held);
    const auto rows = train_style(c, *model);
    round_style_to_f32(*model);
    r.final_eval_loss = style_eval_loss(c, *model, held);
    checkpoint::save(c.checkpoint_path(), model->snapshot_store());
    pipeline::write_losses(c.out + "/losses.csv", rows, "commit");
    auto f = pipeline::open_csv(c.out + "/metrics.csv", "initial_eval_loss,final_eval_loss");
    f << r.initial_eval_loss << ',' << r.final_eval_loss << '\n';
    return r;
}

}  // namespace vband
