#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vband/checkpoint.hpp"
#include "vband/config.hpp"
#include "vband/gradcheck_suite.hpp"
#include "vband/metrics.hpp"
#include "vband/parallel.hpp"
#include "vband/pipelines.hpp"

namespace fs = std::filesystem;
using namespace vband;

namespace {

/// Flags shared by the run-style subcommands; unset flags leave config-file values alone.
struct RunFlags {
    std::string config;
    std::uint64_t seed = 0;
    std::string model, out, trace;
    std::size_t steps = 0;
    double gamma = 0.0;
    CLI::Option *o_seed = nullptr, *o_model = nullptr, *o_steps = nullptr, *o_out = nullptr, *o_gamma = nullptr,
                *o_trace = nullptr;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "key=value settings file")->check(CLI::ExistingFile);
        o_seed = app->add_option("--seed", seed, "random seed");
        o_model = app->add_option("--model", model, "flow2d | accomp | melody | style");
        o_steps = app->add_option("--steps", steps, "training steps");
        o_out = app->add_option("--out", out, "output directory");
        o_gamma = app->add_option("--gamma", gamma, "classifier-free guidance scale");
        o_trace = app->add_option("--trace", trace, "trace CSV path");
    }

    RunConfig resolve() const {
        ConfigMap m = config.empty() ? ConfigMap{} : ConfigMap::load(config);
        if (o_seed->count()) m.set("seed", std::to_string(seed));
        if (o_model->count()) m.set("model", model);
        if (o_steps->count()) m.set("steps", std::to_string(steps));
        if (o_out->count()) m.set("out", out);
        if (o_gamma->count()) m.set("gamma", o_gamma->as<std::string>());
        if (o_trace->count()) m.set("trace", trace);
        return RunConfig::from(m);
    }
};

std::string pad(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05zu", i);
    return buf;
}

Tensor ids_tensor(const std::vector<std::size_t>& ids) {
    std::vector<double> v(ids.begin(), ids.end());
    return Tensor::vector(std::move(v));
}

int gen_data(const RunConfig& c) {
    pipeline::prepare_output(c.out);
    std::size_t count = 0;
    switch (c.model) {
        case ModelKind::Flow2d: {
            const auto pts = synth::gen_flow2d(c.seed, c.train_size);
            auto f = pipeline::open_csv(c.out + "/flow2d.csv", "x,y");
            f.precision(17);
            for (std::size_t i = 0; i < pts.dim(0); ++i) f << pts[2 * i] << ',' << pts[2 * i + 1] << '\n';
            count = pts.dim(0);
            break;
        }
        case ModelKind::Accomp: {
            std::vector<checkpoint::NamedTensor> out;
            const auto pairs = synth::gen_toy_pairs(c.seed, c.train_size, pair_config(c));
            for (std::size_t i = 0; i < pairs.size(); ++i) {
                out.push_back({"pair" + pad(i) + ".a", pairs[i].a});
                out.push_back({"pair" + pad(i) + ".tag", Tensor::scalar(static_cast<double>(pairs[i].tag))});
                out.push_back({"pair" + pad(i) + ".v", pairs[i].v});
            }
            checkpoint::write_file(c.out + "/pairs.vbnd", checkpoint::encode(out));
            count = pairs.size();
            break;
        }
        case ModelKind::Melody: {
            const auto songs = synth::gen_melody(c.seed, c.train_size);
            const std::string dir = c.out + "/songs";
            fs::create_directories(dir);
            parallel_for(songs.size(), [&](std::size_t i) {
                melody::write_notes(dir + "/song_" + pad(i) + ".notes", songs[i].notes);
            });
            auto f = pipeline::open_csv(dir + "/index.csv", "song,tag,phonemes");
            for (std::size_t i = 0; i < songs.size(); ++i) {
                f << "song_" << pad(i) << ',' << songs[i].tag << ',';
                for (std::size_t k = 0; k < songs[i].input.phonemes.size(); ++k)
                    f << (k ? " " : "") << songs[i].input.phonemes[k];
                f << '\n';
            }
            count = songs.size();
            break;
        }
        case ModelKind::Style: {
            std::vector<checkpoint::NamedTensor> out;
            const auto items = synth::gen_style_toy(c.seed, c.train_size);
            for (std::size_t i = 0; i < items.size(); ++i) {
                const auto p = "item" + pad(i);
                std::vector<std::size_t> bounds;
                for (const auto& [b, e] : items[i].prompt_spans) bounds.push_back(e);
                out.push_back({p + ".phonemes", ids_tensor(items[i].phonemes)});
                out.push_back({p + ".prompt", items[i].prompt});
                out.push_back({p + ".span_ends", ids_tensor(bounds)});
                out.push_back({p + ".style", Tensor::scalar(static_cast<double>(items[i].style))});
                out.push_back({p + ".target", items[i].target});
            }
            checkpoint::write_file(c.out + "/style.vbnd", checkpoint::encode(out));
            count = items.size();
            break;
        }
    }
    std::cout << "wrote " << count << ' ' << model_name(c.model) << " items to " << c.out << '\n';
    return 0;
}

int train(const RunConfig& c) {
    std::cout.precision(6);
    switch (c.model) {
        case ModelKind::Flow2d: {
            const auto r = run_flow2d(c);
            std::cout << "loss " << r.initial_loss << " -> " << r.final_loss << "\nmode(-) mean (" << r.mean_neg[0]
                      << ", " << r.mean_neg[1] << ") weight " << r.weight_neg << "\nmode(+) mean (" << r.mean_pos[0]
                      << ", " << r.mean_pos[1] << ") weight " << r.weight_pos << '\n';
            break;
        }
        case ModelKind::Accomp: {
            const auto r = run_accomp(c);
            std::cout << "loss " << r.initial_loss << " -> " << r.final_loss << "\npearson(gamma=" << c.gamma
                      << ") " << r.guided.pearson << "\ntag consistency gamma=1 " << r.unguided.consistency
                      << " gamma=3 " << r.strong.consistency << "\nglobal alpha t<0.25 " << r.alpha_early
                      << " t>0.75 " << r.alpha_late << '\n';
            break;
        }
        case ModelKind::Melody: {
            const auto r = run_melody(c);
            std::cout << "pitch accuracy " << r.pitch_accuracy << "\n" << "system," << metrics::kReportHeader
                      << "\nmodel," << metrics::report_row(r.model) << "\nrandom," << metrics::report_row(r.random)
                      << '\n';
            break;
        }
        case ModelKind::Style: {
            const auto r = run_style(c);
            std::cout << "eval loss " << r.initial_eval_loss << " -> " << r.final_eval_loss << '\n';
            break;
        }
    }
    std::cout << "checkpoint " << c.checkpoint_path() << '\n';
    return 0;
}

int sample(const RunConfig& c) {
    pipeline::prepare_output(c.out);
    std::vector<flow::TraceRow> trace;
    auto* tr = c.trace.empty() ? nullptr : &trace;
    switch (c.model) {
        case ModelKind::Flow2d: {
            auto est = make_flow2d_model(c);
            checkpoint::load_into(c.checkpoint_path(), est.parameters());
            const auto s = sample_flow2d(c, est, tr);
            auto f = pipeline::open_csv(c.out + "/samples.csv", "x,y");
            for (std::size_t i = 0; i < s.dim(0); ++i) f << s[2 * i] << ',' << s[2 * i + 1] << '\n';
            const auto r = mode_statistics(s);
            std::cout << "mode(-) mean (" << r.mean_neg[0] << ", " << r.mean_neg[1] << ") weight " << r.weight_neg
                      << "\nmode(+) mean (" << r.mean_pos[0] << ", " << r.mean_pos[1] << ") weight " << r.weight_pos
                      << '\n';
            break;
        }
        case ModelKind::Accomp: {
            auto model = make_accomp_model(c);
            checkpoint::load_into(c.checkpoint_path(), model->parameters());
            set_inference_routing(*model);
            const auto held = accomp_eval_set(c);
            const auto pc = pair_config(c);
            std::vector<checkpoint::NamedTensor> out;
            double corr = 0;
            for (std::size_t i = 0; i < held.size(); ++i) {
                auto g = generate_accomp(c, *model, held[i], c.gamma, pipeline::eval_seed(c.seed) + i,
                                         i == 0 ? tr : nullptr);
                corr += synth::pearson(g, synth::tag_transform(held[i].v, held[i].tag, pc));
                out.push_back({"sample" + pad(i), g});
            }
            checkpoint::write_file(c.out + "/samples.vbnd", checkpoint::encode(out));
            std::cout << "pearson(gamma=" << c.gamma << ") " << corr / static_cast<double>(held.size()) << '\n';
            break;
        }
        case ModelKind::Melody: {
            auto model = make_melody_model(c);
            checkpoint::load_into(c.checkpoint_path(), model->parameters());
            const auto songs = melody_eval_set(c);
            std::vector<melody::NoteSequence> gen;
            const auto r = evaluate_melody(c, *model, songs, &gen);
            fs::create_directories(c.out + "/gen");
            fs::create_directories(c.out + "/gt");
            for (std::size_t i = 0; i < songs.size(); ++i) {
                melody::write_notes(c.out + "/gen/song_" + pad(i) + ".notes", gen[i]);
                melody::write_notes(c.out + "/gt/song_" + pad(i) + ".notes", songs[i].notes);
            }
            std::cout << "pitch accuracy " << r.pitch_accuracy << '\n';
            break;
        }
        case ModelKind::Style: {
            auto model = make_style_model(c);
            auto all = model->snapshot_store();
            checkpoint::load_into(c.checkpoint_path(), all);
            model->load_from(all);
            const auto held = style_eval_set(c);
            std::vector<checkpoint::NamedTensor> out;
            double mse = 0;
            std::size_t n = 0;
            for (std::size_t i = 0; i < held.size(); ++i) {
                Rng rng(pipeline::eval_seed(c.seed) + i);
                auto fc = c.flow;
                const auto g = model->sample(held[i], rng, fc, c.gamma != 1.0);
                for (std::size_t k = 0; k < g.numel(); ++k) mse += (g[k] - held[i].target[k]) * (g[k] - held[i].target[k]);
                n += g.numel();
                out.push_back({"sample" + pad(i), g});
            }
            checkpoint::write_file(c.out + "/style_samples.vbnd", checkpoint::encode(out));
            std::cout << "mse vs target " << mse / static_cast<double>(n) << '\n';
            break;
        }
    }
    if (tr) pipeline::write_sample_trace(c.trace, trace);
    return 0;
}

int route_trace(const RunConfig& c) {
    if (c.model != ModelKind::Accomp) throw ConfigError("route-trace needs --model accomp");
    auto model = make_accomp_model(c);
    checkpoint::load_into(c.checkpoint_path(), model->parameters());
    const auto held = accomp_eval_set(c);
    const auto events = trace_routes(c, *model, held.front());
    const auto path = c.trace.empty() ? c.out + "/route_trace.csv" : c.trace;
    if (c.trace.empty()) pipeline::prepare_output(c.out);
    pipeline::write_route_trace(path, events);
    std::cout << "wrote " << events.size() << " routing decisions to " << path << '\n';
    return 0;
}

/// (name, gen path, gt path) triples from two files or two directories of .notes files.
std::vector<std::array<std::string, 3>> note_pairs(const std::string& gen, const std::string& gt) {
    std::vector<std::array<std::string, 3>> out;
    if (fs::is_directory(gt)) {
        if (!fs::is_directory(gen)) throw DataError("eval-melody: " + gt + " is a directory but " + gen + " is not");
        for (const auto& e : fs::directory_iterator(gt))
            if (e.is_regular_file() && e.path().extension() == ".notes") {
                const auto name = e.path().filename().string();
                const auto g = fs::path(gen) / name;
                if (!fs::exists(g)) throw DataError("eval-melody: no generated file for " + name);
                out.push_back({e.path().stem().string(), g.string(), e.path().string()});
            }
        std::sort(out.begin(), out.end());
        if (out.empty()) throw DataError("eval-melody: no .notes files in " + gt);
    } else {
        out.push_back({fs::path(gt).stem().string(), gen, gt});
    }
    return out;
}

int eval_melody(const std::string& gen, const std::string& gt, const std::string& out_path) {
    const auto pairs = note_pairs(gen, gt);
    std::vector<metrics::MelodyReport> reports(pairs.size());
    std::vector<char> skipped(pairs.size(), 0);
    parallel_for(pairs.size(), [&](std::size_t i) {
        const auto g = melody::read_notes(pairs[i][1]);
        const auto t = melody::read_notes(pairs[i][2]);
        if (g.empty() || t.empty()) {
            skipped[i] = 1;
            return;
        }
        reports[i] = metrics::evaluate_song(g, t);
    });
    std::ostringstream csv;
    csv.precision(10);
    csv << "song," << metrics::kReportHeader << '\n';
    std::vector<metrics::MelodyReport> kept;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (skipped[i]) {
            std::cerr << "warning: " << pairs[i][0] << " has an empty sequence; excluded\n";
            continue;
        }
        csv << pairs[i][0] << ',' << metrics::report_row(reports[i]) << '\n';
        kept.push_back(reports[i]);
    }
    if (kept.empty()) throw DataError("eval-melody: every song was empty");
    csv << "mean," << metrics::report_row(metrics::average(kept)) << '\n';
    std::cout << csv.str();
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        if (!f) throw DataError("cannot write " + out_path);
        f << csv.str();
    }
    return 0;
}

int eval_f0(const std::string& gen, const std::string& gt) {
    std::cout << "FFE," << metrics::f0_frame_error(metrics::read_f0_csv(gen), metrics::read_f0_csv(gt)) << '\n';
    return 0;
}

int gradcheck_cmd(std::uint64_t seed) {
    const auto results = gradsuite::run(seed);
    bool ok = true;
    std::cout << "op,trials,coordinates,max_rel_error,max_abs_error\n";
    for (const auto& r : results) {
        std::cout << r.name << ',' << r.trials << ',' << r.coordinates << ',' << r.worst_rel_error << ','
                  << r.worst_abs_error << '\n';
        ok = ok && r.worst_rel_error < gradsuite::kTolerance;
    }
    if (!ok) {
        std::cerr << "gradcheck: at least one op exceeds relative error " << gradsuite::kTolerance << '\n';
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vband: flow-matching band toolkit (toy pipelines, metrics, gradient checks)"};
    app.require_subcommand(1);

    RunFlags gen_flags, train_flags, sample_flags, trace_flags;
    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
    gen_flags.attach(gen);
    auto* tr = app.add_subcommand("train", "train a toy model and write checkpoint, losses and metrics");
    train_flags.attach(tr);
    auto* smp = app.add_subcommand("sample", "generate from a trained checkpoint");
    sample_flags.attach(smp);
    auto* rt = app.add_subcommand("route-trace", "dump Band-MOE routing decisions of one held-out generation");
    trace_flags.attach(rt);

    std::string em_gen, em_gt, em_out;
    auto* em = app.add_subcommand("eval-melody", "objective melody metrics for note files or directories");
    em->add_option("gen", em_gen, "generated .notes file or directory")->required();
    em->add_option("gt", em_gt, "ground-truth .notes file or directory")->required();
    em->add_option("--out", em_out, "also write the CSV here");

    std::string f0_gen, f0_gt;
    auto* ef = app.add_subcommand("eval-f0", "F0 frame error between two frame_index,hz tracks");
    ef->add_option("gen", f0_gen, "generated F0 CSV")->required()->check(CLI::ExistingFile);
    ef->add_option("gt", f0_gt, "ground-truth F0 CSV")->required()->check(CLI::ExistingFile);

    std::uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
    gc->add_option("--seed", gc_seed, "random seed for shapes and values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) return gen_data(gen_flags.resolve());
        if (*tr) return train(train_flags.resolve());
        if (*smp) return sample(sample_flags.resolve());
        if (*rt) return route_trace(trace_flags.resolve());
        if (*em) return eval_melody(em_gen, em_gt, em_out);
        if (*ef) return eval_f0(f0_gen, f0_gt);
        if (*gc) return gradcheck_cmd(gc_seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
