#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vband/melody.hpp"
#include "vband/nn.hpp"
#include "vband/rq.hpp"

namespace vband::synth {

// ---------------------------------------------------------------------------
// 2-D two-mode mixture

inline constexpr double kModeOffset = 2.0;
inline constexpr double kModeSigma = 0.3;

/// n points from 0.5 N((-2, 0), 0.3^2 I) + 0.5 N((2, 0), 0.3^2 I), as [n, 2].
inline Tensor gen_flow2d(std::uint64_t seed, std::size_t n) {
    if (n < 100) throw ConfigError("gen_flow2d: need at least 100 points");
    Rng rng(seed);
    std::bernoulli_distribution side(0.5);
    std::vector<double> v(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const double cx = side(rng) ? kModeOffset : -kModeOffset;
        v[2 * i] = cx + normal(rng, 0.0, kModeSigma);
        v[2 * i + 1] = normal(rng, 0.0, kModeSigma);
    }
    return Tensor({n, 2}, std::move(v));
}

// ---------------------------------------------------------------------------
// Vocal / accompaniment toy pairs

struct ToyPair {
    Tensor v;  // [T, d] vocal-like track
    Tensor a;  // [T, d] accompaniment-like target
    std::size_t tag = 0;
};

struct PairConfig {
    std::size_t frames = 64;
    std::size_t channels = 8;
    std::size_t tags = 4;
    double offset_amplitude = 0.4;
};

/// Per-channel gain of tag k: positive, spread over [0.7, 1.3].
inline double tag_gain(std::size_t tag, std::size_t channel, const PairConfig& cfg) {
    const double spread = cfg.tags > 1 ? static_cast<double>(tag) / static_cast<double>(cfg.tags - 1) : 0.5;
    return 0.7 + 0.6 * spread + 0.05 * std::cos(static_cast<double>(channel + tag));
}

/// Tag-specific offset pattern: a sinusoid whose frequency and phase depend on the tag.
inline double tag_offset(std::size_t tag, std::size_t frame, std::size_t channel, const PairConfig& cfg) {
    const double f = static_cast<double>(tag + 1);
    const double phase = 0.7 * static_cast<double>(channel) + 1.3 * static_cast<double>(tag);
    return cfg.offset_amplitude *
           std::sin(2.0 * std::numbers::pi * f * static_cast<double>(frame) / static_cast<double>(cfg.frames) + phase);
}

/// The ground-truth accompaniment of `v` under `tag`: gain * (0.6 v[t] + 0.4 v[t-1]) + offset.
inline Tensor tag_transform(const Tensor& v, std::size_t tag, const PairConfig& cfg) {
    const std::size_t T = v.dim(0), d = v.dim(1);
    std::vector<double> a(T * d);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < d; ++c) {
            const double prev = t > 0 ? v[(t - 1) * d + c] : v[c];
            a[t * d + c] = tag_gain(tag, c, cfg) * (0.6 * v[t * d + c] + 0.4 * prev) + tag_offset(tag, t, c, cfg);
        }
    return Tensor({T, d}, std::move(a));
}

/// Random walk per channel, smoothed by a 5-frame moving average and standardised per channel.
inline Tensor smooth_walk(Rng& rng, std::size_t T, std::size_t d) {
    std::vector<double> walk(T * d), out(T * d);
    for (std::size_t c = 0; c < d; ++c) {
        double x = normal(rng);
        for (std::size_t t = 0; t < T; ++t) {
            x += 0.3 * normal(rng);
            walk[t * d + c] = x;
        }
    }
    for (std::size_t c = 0; c < d; ++c) {
        double mean = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t lo = t >= 2 ? t - 2 : 0, hi = std::min(T - 1, t + 2);
            double s = 0.0;
            for (std::size_t k = lo; k <= hi; ++k) s += walk[k * d + c];
            out[t * d + c] = s / static_cast<double>(hi - lo + 1);
            mean += out[t * d + c];
        }
        mean /= static_cast<double>(T);
        double var = 0.0;
        for (std::size_t t = 0; t < T; ++t) var += (out[t * d + c] - mean) * (out[t * d + c] - mean);
        const double sd = std::sqrt(var / static_cast<double>(T));
        for (std::size_t t = 0; t < T; ++t) out[t * d + c] = (out[t * d + c] - mean) / (sd > 1e-9 ? sd : 1.0);
    }
    return Tensor({T, d}, std::move(out));
}

inline std::vector<ToyPair> gen_toy_pairs(std::uint64_t seed, std::size_t n, const PairConfig& cfg = {}) {
    if (cfg.tags < 2) throw ConfigError("gen_toy_pairs: need at least two style tags");
    Rng rng(seed);
    std::vector<ToyPair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto v = smooth_walk(rng, cfg.frames, cfg.channels);
        const auto tag = std::uniform_int_distribution<std::size_t>(0, cfg.tags - 1)(rng);
        out.push_back({v, tag_transform(v, tag, cfg), tag});
    }
    return out;
}

/// Pearson correlation over all elements of two equally shaped tensors.
inline double pearson(const Tensor& x, const Tensor& y) {
    detail::require_same_shape(x, y, "pearson");
    const double n = static_cast<double>(x.numel());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Diatonic melody grammar

struct MelodyGrammar {
    std::size_t phonemes = 16;  // ids below 14 are sung, 14 and 15 are rests
    std::size_t tags = 8;       // key tags; tag k selects tonic kTonics[k]
    std::size_t min_notes = 8;
    std::size_t max_notes = 16;
};

inline constexpr std::array<int, 7> kMajorSteps = {0, 2, 4, 5, 7, 9, 11};
inline constexpr std::array<int, 8> kTonics = {0, 7, 2, 9, 4, 5, 10, 3};
inline constexpr std::array<double, 3> kTempi = {90.0, 120.0, 140.0};
inline constexpr std::array<double, 4> kBeatValues = {0.5, 1.0, 1.0, 2.0};
inline constexpr std::size_t kSungPhonemes = 14;

inline int grammar_tonic(std::size_t tag) { return kTonics[tag % kTonics.size()]; }

/// Pitch of phoneme `id` in the key of `tag`: scale degree id mod 7, octave id / 7 above C4.
inline int grammar_pitch(std::size_t id, std::size_t tag) {
    if (id >= kSungPhonemes) return melody::kRest;
    return 60 + grammar_tonic(tag) + kMajorSteps[id % 7] + 12 * static_cast<int>(id / 7);
}

inline double grammar_duration(std::size_t id) { return kBeatValues[(id / 2) % kBeatValues.size()]; }

struct MelodySong {
    melody::MelodyInput input;
    melody::NoteSequence notes;
    std::size_t tag = 0;
};

inline std::vector<MelodySong> gen_melody(std::uint64_t seed, std::size_t n, const MelodyGrammar& g = {}) {
    if (g.tags > kTonics.size()) throw ConfigError("melody grammar: at most 8 key tags");
    if (g.min_notes == 0 || g.max_notes < g.min_notes) throw ConfigError("melody grammar: bad note-count range");
    Rng rng(seed);
    std::vector<MelodySong> out;
    for (std::size_t s = 0; s < n; ++s) {
        MelodySong song;
        song.tag = std::uniform_int_distribution<std::size_t>(0, g.tags - 1)(rng);
        const auto len = std::uniform_int_distribution<std::size_t>(g.min_notes, g.max_notes)(rng);
        song.notes.tempo = kTempi[std::uniform_int_distribution<std::size_t>(0, kTempi.size() - 1)(rng)];
        song.input.tags = {song.tag};
        for (std::size_t i = 0; i < len; ++i) {
            // rests are rarer than sung syllables
            const bool rest = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.08;
            const std::size_t id =
                rest ? kSungPhonemes + (i % 2)
                     : std::uniform_int_distribution<std::size_t>(0, kSungPhonemes - 1)(rng);
            song.input.phonemes.push_back(id);
            song.notes.pitches.push_back(grammar_pitch(id, song.tag));
            song.notes.durations.push_back(grammar_duration(id));
        }
        out.push_back(std::move(song));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Phoneme-level style toy for the style predictor

struct StyleToyConfig {
    std::size_t phonemes = 12;      // phoneme vocabulary
    std::size_t styles = 4;         // style tags
    std::size_t style_dim = 8;      // width of per-phoneme style targets
    std::size_t target_len = 12;    // phonemes per target
    std::size_t prompt_len = 8;     // phonemes in the vocal prompt
    double prompt_noise = 0.05;
};

struct StyleItem {
    std::vector<std::size_t> phonemes;  // target content
    Tensor target;                      // [P, style_dim] phoneme-level style x1
    Tensor prompt;                      // [T_prompt, style_dim] frame-level vocal prompt in the same style
    std::vector<rq::Span> prompt_spans; // phoneme boundaries of the prompt
    std::size_t style = 0;
};

/// Fixed content vector of a phoneme.
inline double style_content(std::size_t phoneme, std::size_t j) {
    return std::sin(1.7 * static_cast<double>(phoneme + 1) * static_cast<double>(j + 1));
}

/// x = gain_s * content(phoneme) + offset_s, per channel.
inline double style_value(std::size_t style, std::size_t phoneme, std::size_t j, const StyleToyConfig& cfg) {
    const double s = static_cast<double>(style) / static_cast<double>(std::max<std::size_t>(1, cfg.styles - 1));
    const double gain = 0.5 + s;
    const double offset = 0.8 * std::cos(2.1 * static_cast<double>(style) + 0.9 * static_cast<double>(j));
    return gain * style_content(phoneme, j) + offset;
}

inline std::vector<StyleItem> gen_style_toy(std::uint64_t seed, std::size_t n, const StyleToyConfig& cfg = {}) {
    if (cfg.styles < 2) throw ConfigError("style toy: need at least two styles");
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick_ph(0, cfg.phonemes - 1), pick_style(0, cfg.styles - 1),
        pick_len(1, 3);
    std::vector<StyleItem> out;
    for (std::size_t i = 0; i < n; ++i) {
        StyleItem item;
        item.style = pick_style(rng);
        std::vector<double> target;
        for (std::size_t p = 0; p < cfg.target_len; ++p) {
            const auto ph = pick_ph(rng);
            item.phonemes.push_back(ph);
            for (std::size_t j = 0; j < cfg.style_dim; ++j) target.push_back(style_value(item.style, ph, j, cfg));
        }
        item.target = Tensor({cfg.target_len, cfg.style_dim}, std::move(target));
        std::vector<double> frames;
        std::size_t pos = 0;
        for (std::size_t p = 0; p < cfg.prompt_len; ++p) {
            const auto ph = pick_ph(rng);
            const auto len = pick_len(rng);
            for (std::size_t f = 0; f < len; ++f)
                for (std::size_t j = 0; j < cfg.style_dim; ++j)
                    frames.push_back(style_value(item.style, ph, j, cfg) + normal(rng, 0.0, cfg.prompt_noise));
            item.prompt_spans.emplace_back(pos, pos + len);
            pos += len;
        }
        item.prompt = Tensor({pos, cfg.style_dim}, std::move(frames));
        out.push_back(std::move(item));
    }
    return out;
}

}  // namespace vband::synth
