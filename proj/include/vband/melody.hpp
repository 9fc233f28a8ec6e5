#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vband/nn.hpp"
#include "vband/ops.hpp"
#include "vband/transformer.hpp"

namespace vband::melody {

inline constexpr int kRest = -1;
/// Pitch classes predicted by the melody head: MIDI 0..127 plus one rest class.
inline constexpr std::size_t kPitchClasses = 129;

/// Phoneme-aligned notes. Pitch is a MIDI number or kRest; durations are in beats.
struct NoteSequence {
    std::vector<int> pitches;
    std::vector<double> durations;
    std::optional<double> tempo;

    std::size_t size() const { return pitches.size(); }
    bool empty() const { return pitches.empty(); }

    void validate() const {
        if (pitches.size() != durations.size()) throw DataError("note sequence: pitch/duration length mismatch");
        for (int p : pitches)
            if (p != kRest && (p < 0 || p > 127)) throw DataError("note sequence: pitch out of MIDI range");
        for (double d : durations)
            if (!(d > 0)) throw DataError("note sequence: durations must be positive");
        if (tempo && !(*tempo > 0)) throw DataError("note sequence: tempo must be positive");
    }

    double total_beats() const {
        double s = 0.0;
        for (double d : durations) s += d;
        return s;
    }
};

inline std::size_t note_class(int pitch) {
    return pitch == kRest ? kPitchClasses - 1 : static_cast<std::size_t>(pitch);
}

inline int class_pitch(std::size_t cls) { return cls == kPitchClasses - 1 ? kRest : static_cast<int>(cls); }

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& s, const std::string& what) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("cannot parse " + what + ": '" + s + "'");
    return v;
}

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace detail

/// Line format: optional "tempo=<bpm>" header, then "pitch,duration_beats" or "R,duration_beats".
inline NoteSequence parse_notes(std::istream& in) {
    NoteSequence seq;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line.rfind("tempo=", 0) == 0) {
            seq.tempo = detail::parse_double(detail::trim(line.substr(6)), "tempo");
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError("notes line " + std::to_string(lineno) + ": missing comma");
        const auto p = detail::trim(line.substr(0, comma));
        const auto d = detail::trim(line.substr(comma + 1));
        if (p == "R" || p == "r") {
            seq.pitches.push_back(kRest);
        } else {
            int pitch = 0;
            auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), pitch);
            if (ec != std::errc() || ptr != p.data() + p.size())
                throw DataError("notes line " + std::to_string(lineno) + ": bad pitch '" + p + "'");
            seq.pitches.push_back(pitch);
        }
        seq.durations.push_back(detail::parse_double(d, "duration"));
    }
    seq.validate();
    return seq;
}

inline NoteSequence read_notes(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open notes file: " + path);
    return parse_notes(f);
}

inline std::string format_notes(const NoteSequence& seq) {
    std::ostringstream os;
    if (seq.tempo) os << "tempo=" << detail::format_double(*seq.tempo) << '\n';
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq.pitches[i] == kRest)
            os << 'R';
        else
            os << seq.pitches[i];
        os << ',' << detail::format_double(seq.durations[i]) << '\n';
    }
    return os.str();
}

inline void write_notes(const std::string& path, const NoteSequence& seq) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write notes file: " + path);
    f << format_notes(seq);
}

// ---------------------------------------------------------------------------
// Duration utilities

/// Repeats row p of `features` durations[p] times: [P, d] -> [sum(durations), d].
inline Tensor length_regulate(const Tensor& features, const std::vector<std::size_t>& durations) {
    vband::detail::require_rank(features, 2, "length_regulate");
    if (durations.size() != features.dim(0))
        throw DimensionError("length_regulate: " + std::to_string(durations.size()) + " durations for " +
                             std::to_string(features.dim(0)) + " phonemes");
    std::vector<std::size_t> ids;
    for (std::size_t p = 0; p < durations.size(); ++p) ids.insert(ids.end(), durations[p], p);
    if (ids.empty()) throw DataError("length_regulate: total duration is zero");
    return ops::gather_rows(features, ids);
}

/// mean((predicted - log(target + 1))^2); predictions are log-durations.
inline Tensor log_duration_loss(const Tensor& predicted, const std::vector<double>& target) {
    if (predicted.numel() != target.size()) throw DimensionError("log_duration_loss: length mismatch");
    std::vector<double> lt(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (!(target[i] >= 0) || !std::isfinite(target[i]))
            throw DataError("log_duration_loss: negative or non-finite target duration");
        lt[i] = std::log(target[i] + 1.0);
    }
    return ops::mse(ops::reshape(predicted, {target.size()}), Tensor::vector(std::move(lt)));
}

/// Cross-entropy over pitch classes plus squared error over durations, both summed.
inline Tensor melody_loss(const Tensor& logits, const Tensor& durations, const std::vector<std::size_t>& pitch_classes,
                          const std::vector<double>& target_durations) {
    if (durations.numel() != target_durations.size() || logits.dim(0) != pitch_classes.size())
        throw DimensionError("melody_loss: prediction/target length mismatch");
    auto pitch = ops::cross_entropy(logits, pitch_classes, ops::Reduction::Sum);
    auto dur = ops::sum(ops::square(
        ops::sub(ops::reshape(durations, {target_durations.size()}), Tensor::vector(target_durations))));
    return ops::add(pitch, dur);
}

inline Tensor melody_loss(const Tensor& logits, const Tensor& durations, const NoteSequence& target) {
    std::vector<std::size_t> cls;
    for (int p : target.pitches) cls.push_back(note_class(p));
    return melody_loss(logits, durations, cls, target.durations);
}

// ---------------------------------------------------------------------------
// Non-autoregressive note model

struct MelodyConfig {
    std::size_t phonemes = 16;
    std::size_t tags = 8;
    std::size_t width = 32;
    std::size_t heads = 2;
    std::size_t layers = 2;
    std::size_t timbre_dim = 8;
    std::size_t classes = kPitchClasses;
};

/// One training/inference item. Tag ids stand in for text-prompt tokens; empty means null prompt.
struct MelodyInput {
    std::vector<std::size_t> phonemes;
    std::vector<std::size_t> tags;
    std::optional<std::vector<double>> timbre;
};

struct MelodyOutput {
    Tensor logits;     // [N, classes]
    Tensor durations;  // [N], positive
};

/// Phoneme (+timbre) encoder with RoPE self-attention and cross-attention onto prompt tags,
/// a softmax pitch head and a softplus duration head.
class MelodyModel {
public:
    MelodyModel(MelodyConfig cfg, Rng& rng) : cfg_(cfg) {
        phoneme_emb_ = store_.add_normal("phoneme_emb", {cfg.phonemes, cfg.width}, rng, 1.0);
        tag_emb_ = store_.add_normal("tag_emb", {cfg.tags + 1, cfg.width}, rng, 1.0);  // row 0 = null prompt
        timbre_ = Linear(store_, "timbre", cfg.timbre_dim, cfg.width, rng);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const auto p = "layer" + std::to_string(l);
            Layer L;
            L.n1 = store_.add_ones(p + ".n1", {cfg.width});
            L.n2 = store_.add_ones(p + ".n2", {cfg.width});
            L.n3 = store_.add_ones(p + ".n3", {cfg.width});
            L.self = MultiHeadAttention(store_, p + ".self", cfg.width, cfg.heads, true, rng);
            L.cross = MultiHeadAttention(store_, p + ".cross", cfg.width, cfg.heads, false, rng);
            L.ffn = FeedForward(store_, p + ".ffn", cfg.width, 2 * cfg.width, rng);
            layers_.push_back(std::move(L));
        }
        final_norm_ = store_.add_ones("final_norm", {cfg.width});
        pitch_head_ = Linear(store_, "pitch_head", cfg.width, cfg.classes, rng);
        dur_head_ = Linear(store_, "dur_head", cfg.width, 1, rng);
    }

    MelodyModel(const MelodyModel&) = delete;
    MelodyModel& operator=(const MelodyModel&) = delete;

    ParameterStore& parameters() { return store_; }
    const ParameterStore& parameters() const { return store_; }
    const MelodyConfig& config() const { return cfg_; }

    MelodyOutput forward(const MelodyInput& in) const {
        if (in.phonemes.empty()) throw DimensionError("melody model: empty phoneme sequence");
        for (auto id : in.phonemes)
            if (id >= cfg_.phonemes) throw BoundsError("melody model: phoneme id " + std::to_string(id) + " out of range");
        std::vector<std::size_t> tag_rows;
        for (auto id : in.tags) {
            if (id >= cfg_.tags) throw BoundsError("melody model: tag id " + std::to_string(id) + " out of range");
            tag_rows.push_back(id + 1);
        }
        if (tag_rows.empty()) tag_rows.push_back(0);
        const std::size_t N = in.phonemes.size();
        auto x = ops::gather_rows(phoneme_emb_, in.phonemes);
        if (in.timbre) {
            if (in.timbre->size() != cfg_.timbre_dim) throw DimensionError("melody model: timbre width mismatch");
            auto zt = timbre_(Tensor({1, cfg_.timbre_dim}, *in.timbre));
            x = ops::add_row(x, ops::reshape(zt, {cfg_.width}));
        }
        auto z_p = ops::gather_rows(tag_emb_, tag_rows);
        for (const auto& L : layers_) {
            auto a = ops::rmsnorm(x, L.n1);
            x = ops::add(x, L.self(a, a));
            x = ops::add(x, L.cross(ops::rmsnorm(x, L.n2), z_p));
            x = ops::add(x, L.ffn(ops::rmsnorm(x, L.n3)));
        }
        x = ops::rmsnorm(x, final_norm_);
        auto logits = pitch_head_(x);
        auto dur = ops::reshape(ops::softplus(dur_head_(x)), {N});
        return {logits, dur};
    }

    /// Argmax pitches and predicted durations as a note sequence.
    NoteSequence predict(const MelodyInput& in, std::optional<double> tempo = std::nullopt) const {
        auto out = forward(in);
        NoteSequence seq;
        seq.tempo = tempo;
        const std::size_t K = cfg_.classes;
        for (std::size_t i = 0; i < in.phonemes.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (out.logits[i * K + k] > out.logits[i * K + best]) best = k;
            seq.pitches.push_back(K == kPitchClasses ? class_pitch(best) : static_cast<int>(best));
            seq.durations.push_back(std::max(out.durations[i], 1e-6));
        }
        return seq;
    }

private:
    struct Layer {
        Tensor n1, n2, n3;
        MultiHeadAttention self, cross;
        FeedForward ffn;
    };

    MelodyConfig cfg_;
    ParameterStore store_;
    Tensor phoneme_emb_, tag_emb_;
    Linear timbre_;
    std::vector<Layer> layers_;
    Tensor final_norm_;
    Linear pitch_head_, dur_head_;
};

}  // namespace vband::melody
