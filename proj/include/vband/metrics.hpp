#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vband/melody.hpp"
#include "vband/tensor.hpp"

#ifndef VBND_DATA_DIR
#define VBND_DATA_DIR "data"
#endif

namespace vband::metrics {

using melody::kRest;
using melody::NoteSequence;

enum class Mode { Major, Minor };

struct Key {
    int tonic = 0;  // pitch class 0..11, C = 0
    Mode mode = Mode::Major;

    bool operator==(const Key&) const = default;
    std::string name() const {
        static const char* names[12] = {"C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"};
        return std::string(names[((tonic % 12) + 12) % 12]) + (mode == Mode::Major ? " major" : " minor");
    }
};

using PitchProfile = std::array<double, 12>;

/// Major/minor reference profiles for C; other keys are exact index rotations.
class KeyProfileTable {
public:
    KeyProfileTable(PitchProfile major, PitchProfile minor) : major_(major), minor_(minor) {}

    /// Parses lines "major v0 .. v11" and "minor v0 .. v11"; '#' starts a comment.
    static KeyProfileTable parse(std::istream& in) {
        std::optional<PitchProfile> maj, min;
        std::string line;
        while (std::getline(in, line)) {
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            std::istringstream ls(line);
            std::string label;
            if (!(ls >> label)) continue;
            PitchProfile p{};
            for (auto& v : p)
                if (!(ls >> v)) throw DataError("key profile '" + label + "' needs 12 values");
            if (double extra; ls >> extra) throw DataError("key profile '" + label + "' has more than 12 values");
            if (label == "major")
                maj = p;
            else if (label == "minor")
                min = p;
            else
                throw DataError("unknown key profile label: " + label);
        }
        if (!maj || !min) throw DataError("key profile table needs both major and minor rows");
        return KeyProfileTable(*maj, *min);
    }

    static KeyProfileTable load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw DataError("cannot open key profile table: " + path);
        return parse(f);
    }

    /// Table shipped in the data directory ($VBND_DATA_DIR overrides the compiled-in path).
    static const KeyProfileTable& standard() {
        static const KeyProfileTable table = [] {
            const char* env = std::getenv("VBND_DATA_DIR");
            const std::string dir = env ? env : VBND_DATA_DIR;
            return load(dir + "/krumhansl_kessler.txt");
        }();
        return table;
    }

    PitchProfile profile(const Key& key) const {
        const auto& base = key.mode == Mode::Major ? major_ : minor_;
        PitchProfile out{};
        for (int pc = 0; pc < 12; ++pc) out[pc] = base[((pc - key.tonic) % 12 + 12) % 12];
        return out;
    }

    static std::vector<Key> all_keys() {
        std::vector<Key> keys;
        for (auto m : {Mode::Major, Mode::Minor})
            for (int t = 0; t < 12; ++t) keys.push_back({t, m});
        return keys;
    }

private:
    PitchProfile major_, minor_;
};

/// Duration-weighted pitch-class histogram, normalised to sum 1 (rests ignored).
inline PitchProfile pitch_class_histogram(const NoteSequence& notes) {
    PitchProfile h{};
    double total = 0.0;
    for (std::size_t i = 0; i < notes.size(); ++i) {
        if (notes.pitches[i] == kRest) continue;
        h[notes.pitches[i] % 12] += notes.durations[i];
        total += notes.durations[i];
    }
    if (total > 0)
        for (auto& v : h) v /= total;
    return h;
}

inline double pearson(const PitchProfile& a, const PitchProfile& b) {
    double ma = 0, mb = 0;
    for (int i = 0; i < 12; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= 12;
    mb /= 12;
    double sab = 0, saa = 0, sbb = 0;
    for (int i = 0; i < 12; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0 || sbb == 0) throw NumericError("pearson correlation undefined for a constant histogram");
    return sab / std::sqrt(saa * sbb);
}

inline double key_correlation(const NoteSequence& notes, const Key& key,
                              const KeyProfileTable& table = KeyProfileTable::standard()) {
    return pearson(pitch_class_histogram(notes), table.profile(key));
}

/// Krumhansl-Schmuckler: key with the highest profile correlation.
inline Key best_key(const NoteSequence& notes, const KeyProfileTable& table = KeyProfileTable::standard()) {
    Key best;
    double best_r = -std::numeric_limits<double>::infinity();
    for (const auto& k : KeyProfileTable::all_keys()) {
        const double r = key_correlation(notes, k, table);
        if (r > best_r) {
            best_r = r;
            best = k;
        }
    }
    return best;
}

/// r(gen, key) / r(gt, key). nullopt when r(gt, key) is zero or undefined (sample excluded).
/// A generated sequence with a constant histogram carries no key evidence and scores 0.
inline std::optional<double> key_accuracy(const NoteSequence& gen, const NoteSequence& gt, const Key& gt_key,
                                          const KeyProfileTable& table = KeyProfileTable::standard()) {
    double r = 0.0;
    try {
        r = key_correlation(gt, gt_key, table);
    } catch (const NumericError&) {
        return std::nullopt;
    }
    if (r == 0.0) return std::nullopt;
    double r_hat = 0.0;
    try {
        r_hat = key_correlation(gen, gt_key, table);
    } catch (const NumericError&) {
        r_hat = 0.0;
    }
    return r_hat / r;
}

inline double mean_pitch(const NoteSequence& s) {
    double sum = 0;
    std::size_t n = 0;
    for (int p : s.pitches)
        if (p != kRest) {
            sum += p;
            ++n;
        }
    if (n == 0) throw DataError("mean pitch of a sequence without pitched notes");
    return sum / static_cast<double>(n);
}

inline double seconds(const NoteSequence& s) {
    if (!s.tempo) throw ConfigError("note sequence has no tempo; cannot convert beats to seconds");
    return s.total_beats() * 60.0 / *s.tempo;
}

struct PitchDurationGap {
    double apd = 0.0;  // |mean pitch difference| in semitones
    double td = 0.0;   // |total duration difference| in seconds
};

inline PitchDurationGap apd_td(const NoteSequence& gen, const NoteSequence& gt) {
    if (gen.empty() || gt.empty()) throw DataError("apd_td: empty sequence");
    return {std::abs(mean_pitch(gen) - mean_pitch(gt)), std::abs(seconds(gen) - seconds(gt))};
}

inline constexpr std::size_t kPitchBins = 128;
inline constexpr std::size_t kDurationBins = 32;
inline constexpr double kDurationRange = 4.0;  // beats

/// Frequency histogram of note pitches over 128 MIDI bins (rests ignored).
inline std::vector<double> pitch_histogram(const NoteSequence& s) {
    std::vector<double> h(kPitchBins, 0.0);
    double n = 0;
    for (int p : s.pitches)
        if (p != kRest) {
            h[static_cast<std::size_t>(p)] += 1;
            n += 1;
        }
    if (n > 0)
        for (auto& v : h) v /= n;
    return h;
}

/// Frequency histogram of durations over 32 uniform bins on [0, 4] beats; longer notes land in the last bin.
inline std::vector<double> duration_histogram(const NoteSequence& s) {
    std::vector<double> h(kDurationBins, 0.0);
    const double width = kDurationRange / static_cast<double>(kDurationBins);
    for (double d : s.durations) {
        auto b = static_cast<std::size_t>(std::floor(d / width));
        h[std::min(b, kDurationBins - 1)] += 1;
    }
    if (!s.durations.empty())
        for (auto& v : h) v /= static_cast<double>(s.durations.size());
    return h;
}

/// Overlapped area sum_b min(p_b, q_b).
inline double overlap_area(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw DimensionError("overlap_area: histogram sizes differ");
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::min(p[i], q[i]);
    return s;
}

struct DistributionSimilarity {
    double pd = 0.0;
    double dd = 0.0;
    std::size_t excluded = 0;  // song pairs skipped because a sequence was empty
};

inline DistributionSimilarity dist_similarity(const std::vector<NoteSequence>& gen,
                                              const std::vector<NoteSequence>& gt) {
    if (gen.size() != gt.size()) throw DimensionError("dist_similarity: song counts differ");
    DistributionSimilarity out;
    std::size_t used = 0;
    for (std::size_t i = 0; i < gen.size(); ++i) {
        if (gen[i].empty() || gt[i].empty()) {
            ++out.excluded;
            continue;
        }
        out.pd += overlap_area(pitch_histogram(gen[i]), pitch_histogram(gt[i]));
        out.dd += overlap_area(duration_histogram(gen[i]), duration_histogram(gt[i]));
        ++used;
    }
    if (used > 0) {
        out.pd /= static_cast<double>(used);
        out.dd /= static_cast<double>(used);
    }
    return out;
}

/// Sixteenth-note grid expansion, in beats (quarter-note beat).
inline constexpr double kSixteenth = 0.25;

/// Pitch time series on a 1/16-note grid, mean-centred. Rests contribute no samples.
inline std::vector<double> pitch_series(const NoteSequence& s) {
    std::vector<double> out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.pitches[i] == kRest) continue;
        const auto steps = std::max<long>(1, std::lround(s.durations[i] / kSixteenth));
        out.insert(out.end(), static_cast<std::size_t>(steps), static_cast<double>(s.pitches[i]));
    }
    if (out.empty()) throw DataError("melody_distance: sequence expands to nothing");
    double m = 0;
    for (double v : out) m += v;
    m /= static_cast<double>(out.size());
    for (auto& v : out) v -= m;
    return out;
}

/// DTW with |a - b| cost and steps (1,0), (0,1), (1,1).
inline double dtw(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw DataError("dtw: empty series");
    const std::size_t n = a.size(), m = b.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(m, inf), cur(m, inf);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double c = std::abs(a[i] - b[j]);
            double best;
            if (i == 0 && j == 0)
                best = 0.0;
            else {
                best = inf;
                if (i > 0) best = std::min(best, prev[j]);
                if (j > 0) best = std::min(best, cur[j - 1]);
                if (i > 0 && j > 0) best = std::min(best, prev[j - 1]);
            }
            cur[j] = c + best;
        }
        std::swap(prev, cur);
    }
    return prev[m - 1];
}

inline double melody_distance(const NoteSequence& gen, const NoteSequence& gt) {
    return dtw(pitch_series(gen), pitch_series(gt));
}

/// F0 per frame in Hz; 0 marks an unvoiced frame.
using F0Track = std::vector<double>;

inline constexpr double kF0Tolerance = 0.2;

/// Fraction of frames with a voicing mismatch or a voiced pitch off by more than 20%.
inline double f0_frame_error(const F0Track& gen, const F0Track& gt) {
    if (gen.size() != gt.size())
        throw DimensionError("f0_frame_error: " + std::to_string(gen.size()) + " vs " + std::to_string(gt.size()) +
                             " frames");
    if (gt.empty()) throw DataError("f0_frame_error: empty tracks");
    std::size_t errors = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const bool vg = gen[i] > 0, vt = gt[i] > 0;
        if (vg != vt)
            ++errors;
        else if (vg && std::abs(gen[i] - gt[i]) > kF0Tolerance * gt[i])
            ++errors;
    }
    return static_cast<double>(errors) / static_cast<double>(gt.size());
}

/// Reads "frame_index,hz" rows (header line optional).
inline F0Track read_f0_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open F0 track: " + path);
    F0Track track;
    std::string line;
    while (std::getline(f, line)) {
        line = melody::detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError("F0 track line without comma: " + line);
        const auto idx = melody::detail::trim(line.substr(0, comma));
        if (!idx.empty() && !(std::isdigit(static_cast<unsigned char>(idx[0])))) continue;  // header
        const auto frame = static_cast<std::size_t>(melody::detail::parse_double(idx, "frame index"));
        if (frame != track.size()) throw DataError("F0 track frames must be consecutive from 0");
        track.push_back(melody::detail::parse_double(melody::detail::trim(line.substr(comma + 1)), "F0"));
    }
    return track;
}

/// Per-song objective melody scores, in Table-1 column order.
struct MelodyReport {
    double ka = 0.0;
    double apd = 0.0;
    double td = 0.0;
    double pd = 0.0;
    double dd = 0.0;
    double md = 0.0;
    std::size_t songs = 0;
    std::size_t ka_valid = 0;
};

inline const char* kReportHeader = "KA,APD,TD,PD,DD,MD";

/// Evaluates one song. `gt_key` defaults to the Krumhansl-Schmuckler estimate of the ground truth.
inline MelodyReport evaluate_song(const NoteSequence& gen, const NoteSequence& gt,
                                  std::optional<Key> gt_key = std::nullopt,
                                  const KeyProfileTable& table = KeyProfileTable::standard()) {
    MelodyReport r;
    r.songs = 1;
    const Key key = gt_key ? *gt_key : best_key(gt, table);
    if (auto ka = key_accuracy(gen, gt, key, table)) {
        r.ka = *ka;
        r.ka_valid = 1;
    }
    const auto gap = apd_td(gen, gt);
    r.apd = gap.apd;
    r.td = gap.td;
    const auto ds = dist_similarity({gen}, {gt});
    r.pd = ds.pd;
    r.dd = ds.dd;
    r.md = melody_distance(gen, gt);
    return r;
}

/// Averages per-song reports (KA only over songs where it is defined).
inline MelodyReport average(const std::vector<MelodyReport>& songs) {
    MelodyReport out;
    for (const auto& s : songs) {
        if (s.ka_valid) {
            out.ka += s.ka;
            ++out.ka_valid;
        }
        out.apd += s.apd;
        out.td += s.td;
        out.pd += s.pd;
        out.dd += s.dd;
        out.md += s.md;
        ++out.songs;
    }
    if (out.ka_valid) out.ka /= static_cast<double>(out.ka_valid);
    if (out.songs) {
        const double n = static_cast<double>(out.songs);
        out.apd /= n;
        out.td /= n;
        out.pd /= n;
        out.dd /= n;
        out.md /= n;
    }
    return out;
}

inline std::string report_row(const MelodyReport& r) {
    std::ostringstream os;
    os.precision(10);
    os << r.ka << ',' << r.apd << ',' << r.td << ',' << r.pd << ',' << r.dd << ',' << r.md;
    return os.str();
}

}  // namespace vband::metrics
