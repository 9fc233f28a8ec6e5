#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>

#include "support.hpp"
#include "vband/metrics.hpp"

using namespace vband;
using namespace vband::metrics;

namespace {

const KeyProfileTable& table() { return KeyProfileTable::standard(); }

/// One note per pitch class (C4 upward) with the given durations; zero entries are skipped.
NoteSequence from_histogram(const std::array<double, 12>& h, double tempo = 120.0) {
    NoteSequence s;
    s.tempo = tempo;
    for (int pc = 0; pc < 12; ++pc)
        if (h[pc] > 0) {
            s.pitches.push_back(60 + pc);
            s.durations.push_back(h[pc]);
        }
    return s;
}

NoteSequence random_song(Rng& rng, std::size_t n) {
    NoteSequence s;
    s.tempo = 120.0;
    for (std::size_t i = 0; i < n; ++i) {
        s.pitches.push_back(std::uniform_int_distribution<int>(48, 84)(rng));
        s.durations.push_back(0.25 * std::uniform_int_distribution<int>(1, 8)(rng));
    }
    return s;
}

using Vec12 = std::array<double, 12>;

double dot(const Vec12& a, const Vec12& b) { return std::inner_product(a.begin(), a.end(), b.begin(), 0.0); }

Vec12 centred(Vec12 v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / 12.0;
    for (auto& x : v) x -= m;
    return v;
}

Vec12 remove_component(Vec12 v, const Vec12& dir) {
    const double k = dot(v, dir) / dot(dir, dir);
    for (int i = 0; i < 12; ++i) v[i] -= k * dir[i];
    return v;
}

/// Minimum-cost monotone alignment found by walking every path.
double dtw_brute(const std::vector<double>& a, const std::vector<double>& b) {
    double best = std::numeric_limits<double>::infinity();
    std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
        acc += std::abs(a[i] - b[j]);
        if (i + 1 == a.size() && j + 1 == b.size()) {
            best = std::min(best, acc);
            return;
        }
        if (i + 1 < a.size()) walk(i + 1, j, acc);
        if (j + 1 < b.size()) walk(i, j + 1, acc);
        if (i + 1 < a.size() && j + 1 < b.size()) walk(i + 1, j + 1, acc);
    };
    walk(0, 0, 0.0);
    return best;
}

}  // namespace

TEST(KeyProfiles, TableLoadsAndRotates) {
    const auto c = table().profile({0, Mode::Major});
    const auto d = table().profile({2, Mode::Major});
    for (int pc = 0; pc < 12; ++pc) EXPECT_EQ(d[(pc + 2) % 12], c[pc]);
    EXPECT_GT(c[0], c[1]);  // tonic outweighs the minor second
    EXPECT_EQ(KeyProfileTable::all_keys().size(), 24u);
    std::istringstream bad("major 1 2 3\n");
    EXPECT_THROW(KeyProfileTable::parse(bad), DataError);
}

TEST(KeyCorrelation, ProfileAgainstItselfIsOne) {
    for (auto mode : {Mode::Major, Mode::Minor}) {
        const Key key{0, mode};
        EXPECT_NEAR(key_correlation(from_histogram(table().profile(key)), key), 1.0, 1e-12);
    }
}

TEST(KeyCorrelation, InvariantUnderJointTransposition) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        auto s = random_song(rng, 10);
        const Key key{std::uniform_int_distribution<int>(0, 11)(rng), trial % 2 ? Mode::Major : Mode::Minor};
        const int shift = std::uniform_int_distribution<int>(1, 11)(rng);
        auto t = s;
        for (auto& p : t.pitches) p += shift;
        EXPECT_NEAR(key_correlation(s, key), key_correlation(t, {(key.tonic + shift) % 12, key.mode}), 1e-12);
    }
}

TEST(KeyCorrelation, InvariantUnderDurationScaling) {
    Rng rng(2);
    auto s = random_song(rng, 12);
    auto t = s;
    for (auto& d : t.durations) d *= 3.7;
    for (const auto& key : KeyProfileTable::all_keys()) EXPECT_NEAR(key_correlation(s, key), key_correlation(t, key), 1e-12);
}

TEST(KeyCorrelation, CMajorScaleFindsCMajor) {
    NoteSequence scale{{60, 62, 64, 65, 67, 69, 71}, std::vector<double>(7, 1.0), 120.0};
    Key best{};
    double best_r = -2;
    for (const auto& key : KeyProfileTable::all_keys()) {
        const double r = key_correlation(scale, key);
        if (r > best_r) best_r = r, best = key;
    }
    EXPECT_EQ(best, (Key{0, Mode::Major}));
    EXPECT_EQ(best_key(scale), (Key{0, Mode::Major}));
}

TEST(KeyCorrelation, ConstantHistogramIsUndefined) {
    NoteSequence chromatic;
    for (int pc = 0; pc < 12; ++pc) {
        chromatic.pitches.push_back(60 + pc);
        chromatic.durations.push_back(1.0);
    }
    EXPECT_THROW(key_correlation(chromatic, {0, Mode::Major}), NumericError);
    EXPECT_THROW(key_correlation(NoteSequence{{kRest}, {1.0}, {}}, {0, Mode::Major}), NumericError);
}

TEST(KeyAccuracy, IdenticalSequencesScoreOne) {
    Rng rng(3);
    auto s = random_song(rng, 9);
    EXPECT_NEAR(*key_accuracy(s, s, best_key(s)), 1.0, 1e-12);
}

TEST(KeyAccuracy, UncorrelatedGenerationScoresZeroAndMixingScoresHalf) {
    const Key key{0, Mode::Major};
    NoteSequence gt{{60, 62, 64, 65, 67, 69, 71, 72}, {1, 1, 1, 1, 2, 1, 1, 2}, 120.0};
    const auto pc = centred(table().profile(key));
    Vec12 h_gt{};
    for (std::size_t i = 0; i < gt.size(); ++i) h_gt[gt.pitches[i] % 12] += gt.durations[i];
    const auto hc = centred(h_gt);
    // a direction orthogonal to the constant vector, the profile and the ground truth
    Vec12 w{};
    for (int i = 0; i < 12; ++i) w[i] = std::sin(1.3 * i + 0.4);
    w = centred(w);
    w = remove_component(w, pc);
    w = remove_component(w, remove_component(hc, pc));

    auto lift = [](Vec12 v) {
        const double lo = *std::min_element(v.begin(), v.end());
        for (auto& x : v) x += 1.0 - lo;
        return v;
    };
    EXPECT_NEAR(*key_accuracy(from_histogram(lift(w)), gt, key), 0.0, 1e-12);

    // |hc + s w| = 2 |hc| halves the correlation with the profile
    const double s = std::sqrt(3.0 * dot(hc, hc) / dot(w, w));
    Vec12 mixed{};
    for (int i = 0; i < 12; ++i) mixed[i] = hc[i] + s * w[i];
    EXPECT_NEAR(*key_accuracy(from_histogram(lift(mixed)), gt, key), 0.5, 1e-12);
}

TEST(KeyAccuracy, UndefinedWhenGroundTruthHasNoKeyEvidence) {
    NoteSequence chromatic;
    for (int pc = 0; pc < 12; ++pc) {
        chromatic.pitches.push_back(60 + pc);
        chromatic.durations.push_back(0.5);
    }
    EXPECT_FALSE(key_accuracy(chromatic, chromatic, {0, Mode::Major}).has_value());
}

TEST(PitchDurationGap, Examples) {
    NoteSequence gt{{60, 64, 67}, {2, 2, 4}, 120.0};
    auto same = apd_td(gt, gt);
    EXPECT_EQ(same.apd, 0.0);
    EXPECT_EQ(same.td, 0.0);
    auto up = gt;
    for (auto& p : up.pitches) p += 2;
    EXPECT_NEAR(apd_td(up, gt).apd, 2.0, 1e-12);
    NoteSequence six{{60, 64, 67}, {2, 2, 2}, 120.0};
    EXPECT_NEAR(apd_td(six, gt).td, 1.0, 1e-12);
    NoteSequence rests{{60, kRest}, {1, 3}, 60.0};
    EXPECT_NEAR(mean_pitch(rests), 60.0, 0.0);
    EXPECT_NEAR(seconds(rests), 4.0, 1e-12);
    auto no_tempo = gt;
    no_tempo.tempo.reset();
    EXPECT_THROW(apd_td(no_tempo, gt), ConfigError);
}

TEST(OverlapArea, Examples) {
    EXPECT_NEAR(overlap_area({0.5, 0.5}, {1.0, 0.0}), 0.5, 1e-15);
    EXPECT_NEAR(overlap_area({0.2, 0.8}, {0.2, 0.8}), 1.0, 1e-15);
    EXPECT_EQ(overlap_area({1.0, 0.0}, {0.0, 1.0}), 0.0);
    EXPECT_THROW(overlap_area({1.0}, {0.5, 0.5}), DimensionError);
}

TEST(OverlapArea, SymmetricAndBounded) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        auto a = random_song(rng, 1 + trial % 10), b = random_song(rng, 1 + trial % 7);
        for (auto hist : {pitch_histogram, duration_histogram}) {
            const auto p = hist(a), q = hist(b);
            const double o = overlap_area(p, q);
            EXPECT_NEAR(o, overlap_area(q, p), 1e-15);
            EXPECT_GE(o, 0.0);
            EXPECT_LE(o, 1.0 + 1e-12);
            EXPECT_NEAR(overlap_area(p, p), 1.0, 1e-12);
        }
    }
}

TEST(OverlapArea, DurationBinning) {
    NoteSequence s{{60, 60, 60}, {0.1, 0.2, 9.0}, {}};
    auto h = duration_histogram(s);
    ASSERT_EQ(h.size(), 32u);
    EXPECT_NEAR(h[0], 1.0 / 3, 1e-15);  // 0.1 beats
    EXPECT_NEAR(h[1], 1.0 / 3, 1e-15);  // 0.2 beats with bin width 0.125
    EXPECT_NEAR(h[31], 1.0 / 3, 1e-15);
}

TEST(DistSimilarity, ExcludesEmptySequences) {
    NoteSequence a{{60, 62}, {1, 1}, {}}, empty;
    auto ds = dist_similarity({a, empty}, {a, a});
    EXPECT_EQ(ds.excluded, 1u);
    EXPECT_NEAR(ds.pd, 1.0, 1e-15);
    EXPECT_NEAR(ds.dd, 1.0, 1e-15);
}

TEST(MelodyDistance, ExhaustivePathOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(std::uniform_int_distribution<int>(1, 8)(rng)),
            b(std::uniform_int_distribution<int>(1, 8)(rng));
        for (auto& v : a) v = std::uniform_int_distribution<int>(-5, 5)(rng);
        for (auto& v : b) v = std::uniform_int_distribution<int>(-5, 5)(rng);
        const double d = dtw(a, b);
        ASSERT_NEAR(d, dtw_brute(a, b), 1e-12) << "trial " << trial;
        EXPECT_NEAR(d, dtw(b, a), 1e-12);
        EXPECT_GE(d, 0.0);
        EXPECT_EQ(dtw(a, a), 0.0);
    }
}

TEST(MelodyDistance, SixteenthGridAndTransposition) {
    NoteSequence s{{60, 62, kRest, 67}, {0.5, 0.25, 1.0, 0.1}, 100.0};
    auto series = pitch_series(s);
    ASSERT_EQ(series.size(), 4u);  // 2 + 1 sixteenths, the rest skipped, 0.1 rounds up to one
    auto up = s;
    for (auto& p : up.pitches)
        if (p != kRest) p += 5;
    EXPECT_NEAR(melody_distance(up, s), 0.0, 1e-12);
    EXPECT_EQ(melody_distance(s, s), 0.0);
    EXPECT_THROW(melody_distance(NoteSequence{{kRest}, {1.0}, {}}, s), DataError);
}

TEST(F0FrameError, HandCases) {
    F0Track gt{100, 100, 100, 100, 100, 0, 0, 200, 200, 200};
    F0Track gen = gt;
    EXPECT_EQ(f0_frame_error(gen, gt), 0.0);
    gen[0] = 0;     // voicing miss
    gen[5] = 120;   // false voicing
    gen[7] = 260;   // 30% high
    gen[8] = 230;   // 15% high: tolerated
    EXPECT_NEAR(f0_frame_error(gen, gt), 0.3, 1e-15);
    F0Track flipped;
    for (double f : gt) flipped.push_back(f > 0 ? 0.0 : 150.0);
    EXPECT_EQ(f0_frame_error(flipped, gt), 1.0);
    EXPECT_THROW(f0_frame_error({1, 2}, {1, 2, 3}), DimensionError);
}

TEST(F0FrameError, MatchesFrameCount) {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + trial % 30;
        F0Track a(n), b(n);
        std::size_t bad = 0;
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = uniform(rng) < 0.3 ? 0.0 : uniform(rng, 80, 400);
            b[i] = uniform(rng) < 0.3 ? 0.0 : uniform(rng, 80, 400);
            if ((a[i] > 0) != (b[i] > 0) || (a[i] > 0 && std::abs(a[i] - b[i]) > 0.2 * b[i])) ++bad;
        }
        const double ffe = f0_frame_error(a, b);
        EXPECT_DOUBLE_EQ(ffe, static_cast<double>(bad) / n);
        EXPECT_GE(ffe, 0.0);
        EXPECT_LE(ffe, 1.0);
    }
}

TEST(F0FrameError, ReadsCsvTracks) {
    auto dir = vband::testing::scratch_dir("f0");
    const auto path = (dir / "track.csv").string();
    std::ofstream(path) << "frame_index,hz\n0,110\n1,0\n2,220.5\n";
    EXPECT_EQ(read_f0_csv(path), (F0Track{110, 0, 220.5}));
    std::ofstream(path) << "0,110\n2,0\n";
    EXPECT_THROW(read_f0_csv(path), DataError);
}

TEST(MelodyReportTest, IdenticalSongsGiveIdealScores) {
    Rng rng(7);
    auto s = random_song(rng, 12);
    auto r = evaluate_song(s, s);
    EXPECT_NEAR(r.ka, 1.0, 1e-12);
    EXPECT_EQ(r.apd, 0.0);
    EXPECT_EQ(r.td, 0.0);
    EXPECT_NEAR(r.pd, 1.0, 1e-12);
    EXPECT_NEAR(r.dd, 1.0, 1e-12);
    EXPECT_EQ(r.md, 0.0);
    auto avg = average({r, r});
    EXPECT_EQ(avg.songs, 2u);
    EXPECT_NEAR(avg.ka, 1.0, 1e-12);
    EXPECT_EQ(std::string(kReportHeader), "KA,APD,TD,PD,DD,MD");
}
