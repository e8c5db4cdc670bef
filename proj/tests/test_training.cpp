#include <gtest/gtest.h>

#include <random>

#include "incflow/training.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace incflow;
using namespace incflow::nn;

namespace {

ModelConfig tiny(std::size_t lookback = 4, std::size_t horizons = 2) {
    ModelConfig c;
    c.lookback = lookback;
    c.horizons = horizons;
    c.d_lstm = 4;
    c.d_dcgru = 4;
    c.d_fuse = 8;
    return c;
}

network::TransitionPair ring(std::size_t n) {
    Matrix w(n, n);
    for (std::size_t e = 0; e < n; ++e) w(e, (e + 1) % n) = 0.5;
    return network::transition_matrices(w);
}

features::FeatureTensor constant_tensor(std::size_t edges, std::size_t bins, double c) {
    features::FeatureTensor z(edges, bins, 30.0);
    for (std::size_t e = 0; e < edges; ++e)
        for (std::size_t t = 0; t < bins; ++t) {
            z.at(e, t, features::kTTI) = c;
            z.at(e, t, features::kCE) = -c;
        }
    z.standardized = true;
    return z;
}

std::vector<std::vector<IntervalSample>> random_cells(std::size_t edges, std::size_t horizons, std::size_t per_cell,
                                                      std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::vector<IntervalSample>> cells(kTargets * edges * horizons);
    for (auto& c : cells)
        for (std::size_t i = 0; i < per_cell; ++i) {
            const double mid = n(rng);
            c.push_back({mid - 0.3, mid + 0.3, mid + n(rng)});
        }
    return cells;
}

double coverage(const std::vector<IntervalSample>& s, double d) {
    std::size_t k = 0;
    for (const auto& x : s) k += covers(x, d);
    return static_cast<double>(k) / static_cast<double>(s.size());
}

}  // namespace

TEST(Windows, StartsAndSequence) {
    EXPECT_EQ(window_starts(0, 10, 4, 2), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
    EXPECT_EQ(window_starts(0, 10, 4, 2, 3), (std::vector<std::size_t>{0, 3}));
    EXPECT_TRUE(window_starts(0, 5, 4, 2).empty());
    EXPECT_THROW(window_starts(0, 10, 4, 2, 0), ConfigError);
    auto z = constant_tensor(2, 6, 0.0);
    z.at(1, 3, features::kSpeed) = 9.0;
    const Matrix seq = window_sequence(z, 2, 3);
    EXPECT_EQ(seq(1, features::kNumChannels + features::kSpeed), 9.0);
    EXPECT_THROW(window_sequence(z, 4, 3), DataError);
}

TEST(Training, ConstantTargetsConverge) {
    auto z = constant_tensor(3, 30, 0.7);
    Forecaster m(tiny(), ring(3), 5);
    ForecasterTraining cfg;
    cfg.sgd.epochs = 150;
    cfg.sgd.lr = 0.05;
    cfg.sgd.seed = 5;
    const auto r = train_forecaster(m, z, window_starts(0, 30, 4, 2), cfg);
    ASSERT_EQ(r.epoch_loss.size(), 150u);
    EXPECT_LT(r.final_loss, 0.1 * r.initial_loss);
    EXPECT_LT(r.final_loss, 0.05);
    const auto p = m.predict(window_sequence(z, 0, 4));
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_LE(p[0][head_index(0, e, 0, 3)], 0.7);
        EXPECT_GE(p[0][head_index(0, e, 1, 3)], 0.7);
        EXPECT_LE(p[1][head_index(1, e, 0, 3)], -0.7);
        EXPECT_GE(p[1][head_index(1, e, 1, 3)], -0.7);
    }
}

TEST(Training, SameSeedSameCurveAndHash) {
    auto d = synthetic::sinusoid_spikes(4, 60, 9);
    auto run = [&](std::uint64_t seed) {
        Forecaster m(tiny(), d.supports, seed);
        ForecasterTraining cfg;
        cfg.sgd.epochs = 4;
        cfg.sgd.seed = seed;
        const auto r = train_forecaster(m, d.z, window_starts(0, 60, 4, 2), cfg);
        return std::make_pair(r.epoch_loss, parameter_hash(m.params()));
    };
    const auto a = run(17), b = run(17), c = run(18);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    EXPECT_NE(a.second, c.second);
}

TEST(Training, SinusoidLossDrops) {
    auto d = synthetic::sinusoid_spikes(5, 160, 21);
    Forecaster m(tiny(), d.supports, 21);
    ForecasterTraining cfg;
    cfg.sgd.epochs = 40;
    cfg.sgd.lr = 0.05;
    const auto r = train_forecaster(m, d.z, window_starts(0, 160, 4, 2, 2), cfg);
    EXPECT_LT(r.final_loss, 0.75 * r.initial_loss);
}

TEST(Training, Errors) {
    auto d = synthetic::sinusoid_spikes(3, 20, 1);
    Forecaster m(tiny(), d.supports, 1);
    ForecasterTraining cfg;
    EXPECT_THROW(train_forecaster(m, d.raw, {0}, cfg), DataError);
    EXPECT_THROW(train_forecaster(m, d.z, window_starts(0, 5, 4, 2), cfg), DataError);
    EXPECT_THROW(m.window_loss(*std::make_unique<Tape>(), d.z, 15, 0.05, 5.0), DataError);
    auto bad = d.z;
    bad.at(1, 2, features::kTTI) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(train_forecaster(m, bad, {0, 1, 2}, cfg), NumericalError);
    cfg.sgd.lr = 0.0;
    EXPECT_THROW(train_forecaster(m, d.z, {0}, cfg), ConfigError);
    EXPECT_THROW(Forecaster(tiny(0, 2), d.supports, 1), ConfigError);
}

TEST(Calibration, ZeroResidualsGiveZeroPadding) {
    std::vector<std::vector<IntervalSample>> cells(kTargets * 2 * 1);
    for (auto& c : cells)
        for (int i = 0; i < 6; ++i) c.push_back({-1.0 + i, 1.0 + i, 0.5 + i});
    const auto t = calibrate_cells(cells, 2, 1, 0.9);
    for (double d : t.delta) EXPECT_EQ(d, 0.0);
}

TEST(Calibration, CeilingQuantileOfViolations) {
    std::vector<IntervalSample> s{{0, 1, 0.5}, {0, 1, 0.2}, {0, 1, 1.0}, {0, 1, 2.0}};
    EXPECT_EQ(detail::padding_for(s, 0.75), 0.0);
    EXPECT_EQ(detail::padding_for(s, 1.0), 1.0);
    EXPECT_EQ(coverage(s, detail::padding_for(s, 1.0)), 1.0);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto cells = random_cells(1, 1, 7 + trial, rng);
        std::vector<double> v;
        for (const auto& x : cells[0]) v.push_back(violation(x));
        const double oracle_q = oracle::quantile_by_count(v, 0.9);
        const double d = detail::padding_for(cells[0], 0.9);
        EXPECT_GE(d, oracle_q);
        EXPECT_LE(d, oracle_q + 1e-12);
    }
}

TEST(Calibration, CoverageAtLeastLevelAndMonotone) {
    std::mt19937_64 rng(4);
    for (double level : {0.5, 0.8, 0.9, 0.95}) {
        auto cells = random_cells(3, 2, 23, rng);
        const auto t = calibrate_cells(cells, 3, 2, level);
        for (std::size_t i = 0; i < cells.size(); ++i) {
            EXPECT_GE(coverage(cells[i], t.delta[i]), level);
            EXPECT_EQ(t.fallback[i], 0);
        }
    }
    auto cells = random_cells(1, 1, 40, rng);
    double prev = 0.0;
    for (double d = 0.0; d < 4.0; d += 0.05) {
        const double c = coverage(cells[0], d);
        EXPECT_GE(c, prev);
        prev = c;
    }
}

TEST(Calibration, SparseCellsUseGlobalFallback) {
    std::mt19937_64 rng(5);
    auto cells = random_cells(3, 1, 8, rng);
    cells[1].resize(3);
    const auto t = calibrate_cells(cells, 3, 1, 0.9);
    EXPECT_EQ(t.fallback[1], 1);
    EXPECT_EQ(t.fallback[0], 0);
    std::vector<IntervalSample> pooled;
    for (std::size_t e = 0; e < 3; ++e) pooled.insert(pooled.end(), cells[e].begin(), cells[e].end());
    EXPECT_EQ(t.delta[1], detail::padding_for(pooled, 0.9));
    EXPECT_EQ(t.counts[1], 3u);
}

TEST(Calibration, Errors) {
    std::vector<std::vector<IntervalSample>> empty(kTargets * 2);
    EXPECT_THROW(calibrate_cells(empty, 2, 1, 0.9), DataError);
    EXPECT_THROW(calibrate_cells(empty, 2, 1, 0.0), ConfigError);
    auto d = synthetic::sinusoid_spikes(3, 20, 1);
    Forecaster m(tiny(), d.supports, 1);
    EXPECT_THROW(conformal_calibrate(m, d.z, {}, 0.9), DataError);
}

TEST(Forecast, IdentityAndPaddingArithmetic) {
    auto d = synthetic::sinusoid_spikes(3, 30, 2);
    Forecaster m(tiny(), d.supports, 2);
    const auto raw = m.predict(window_sequence(d.z, 5, 4));
    const auto f0 = forecast(m, CalibrationTable::identity(3, 2), d.z, 5);
    auto padded = CalibrationTable::identity(3, 2);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (double& x : padded.delta) x = u(rng);
    const auto f1 = forecast(m, padded, d.z, 5);
    for (std::size_t q = 0; q < kTargets; ++q)
        for (std::size_t e = 0; e < 3; ++e)
            for (std::size_t h = 0; h < 2; ++h) {
                const std::size_t i = f0.index(q, e, h);
                EXPECT_EQ(f0.low_std[i], raw[h][head_index(q, e, 0, 3)]);
                EXPECT_EQ(f0.high_std[i], raw[h][head_index(q, e, 1, 3)]);
                const double w0 = f0.high_std[i] - f0.low_std[i], w1 = f1.high_std[i] - f1.low_std[i];
                EXPECT_NEAR(w1 - w0, 2.0 * padded.at(q, e, h), 1e-12);
                const std::size_t c = q == 0 ? features::kTTI : features::kCE;
                EXPECT_NEAR(f0.low[i], f0.low_std[i] * d.z.sigma[e * 5 + c] + d.z.mu[e * 5 + c], 1e-12);
            }
}

TEST(Forecast, OrderedOnRandomParams) {
    auto d = synthetic::sinusoid_spikes(4, 40, 3);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Forecaster m(tiny(), d.supports, seed);
        for (Param* p : m.params())
            for (double& v : p->value.data()) v *= 3.0;
        const auto f = forecast(m, CalibrationTable::identity(4, 2), d.z, seed);
        for (std::size_t i = 0; i < f.low.size(); ++i) {
            EXPECT_LE(f.low[i], f.high[i]);
            EXPECT_LE(f.low_std[i], f.high_std[i]);
        }
    }
}

TEST(Forecast, Errors) {
    auto d = synthetic::sinusoid_spikes(3, 30, 2);
    Forecaster m(tiny(), d.supports, 2);
    const auto calib = CalibrationTable::identity(3, 2);
    EXPECT_THROW(forecast(m, calib, window_sequence(d.z, 0, 3), d.z), DataError);
    EXPECT_THROW(forecast(m, calib, window_sequence(d.z, 0, 4), d.raw), DataError);
    EXPECT_THROW(forecast(m, CalibrationTable::identity(2, 2), d.z, 0), DataError);
}

TEST(Forecast, CalibratedCoverageInStandardizedSpace) {
    auto d = synthetic::sinusoid_spikes(3, 120, 8);
    Forecaster m(tiny(), d.supports, 8);
    const auto starts = window_starts(0, 120, 4, 2);
    const auto table = conformal_calibrate(m, d.z, starts, 0.9);
    std::size_t hit = 0, n = 0;
    for (std::size_t s : starts) {
        const auto f = forecast(m, table, d.z, s);
        for (std::size_t q = 0; q < kTargets; ++q)
            for (std::size_t e = 0; e < 3; ++e)
                for (std::size_t h = 0; h < 2; ++h, ++n) {
                    const double z = d.z.at(e, s + 4 + h, q == 0 ? features::kTTI : features::kCE);
                    hit += f.low_std[f.index(q, e, h)] <= z && z <= f.high_std[f.index(q, e, h)];
                }
    }
    EXPECT_GE(static_cast<double>(hit) / static_cast<double>(n), 0.9);
}

namespace {

features::FeatureTensor with_events(std::size_t edges, std::size_t bins, std::uint64_t seed) {
    auto d = synthetic::sinusoid_spikes(edges, bins, seed);
    auto z = d.z;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t b = 6; b + 2 < bins; b += 9) {
        const std::size_t e = b % edges;
        const double t = (static_cast<double>(b) + u(rng)) * z.bin_s;
        z.collisions.push_back({"ev" + std::to_string(b), sim::EventType::rear, "a", "b", 100.0 * static_cast<double>(e),
                                50.0 + 10.0 * u(rng), t, e});
        z.at(e, b, features::kCollision) = 1.0;
        z.at(e, b, features::kTTI) += 3.0;
    }
    return z;
}

}  // namespace

TEST(Localizer, EventSamples) {
    auto z = with_events(3, 40, 4);
    const auto s = event_samples(z, 4, 0, 40);
    std::size_t expected = 0;
    for (const auto& c : z.collisions) {
        const std::size_t b = z.bin_of(c.t);
        for (std::size_t st = 0; st + 4 <= 40; ++st) expected += st <= b && b < st + 4;
    }
    EXPECT_EQ(s.size(), expected);
    for (const auto& x : s) {
        const std::size_t b = z.bin_of(x.truth[2]);
        EXPECT_TRUE(x.start <= b && b < x.start + 4);
    }
    EXPECT_TRUE(event_samples(z, 4, 0, 3).empty());
}

TEST(Localizer, WindowsWithTwoCollisionsAreDropped) {
    auto z = with_events(3, 40, 4);
    z.collisions.resize(2);  // bins 6 and 15
    const auto b0 = z.bin_of(z.collisions[0].t), b1 = z.bin_of(z.collisions[1].t);
    ASSERT_EQ(b1 - b0, 9u);
    // L = 12: starts 4..6 hold both collisions.
    const auto s = event_samples(z, 12, 0, 40);
    std::size_t expected = 0;
    for (std::size_t i = 0; i < 2; ++i) {
        const std::size_t b = i == 0 ? b0 : b1;
        for (std::size_t st = 0; st + 12 <= 40; ++st) {
            const bool has0 = st <= b0 && b0 < st + 12, has1 = st <= b1 && b1 < st + 12;
            expected += st <= b && b < st + 12 && !(has0 && has1);
        }
    }
    EXPECT_EQ(s.size(), expected);
    for (const auto& x : s) EXPECT_FALSE(x.start <= b0 && b1 < x.start + 12);
}

TEST(Localizer, OrderedPaddedAndCalibrated) {
    auto z = with_events(3, 80, 6);
    Localizer loc(3, 4, 4, z.bin_s, 6);
    const auto train = event_samples(z, 4, 0, 50);
    const auto calib = event_samples(z, 4, 50, 80);
    ASSERT_FALSE(calib.empty());
    SgdConfig sgd;
    sgd.epochs = 60;
    sgd.lr = 0.05;
    const auto r = train_localizer(loc, z, train, sgd);
    EXPECT_LT(r.final_loss, r.initial_loss);
    loc.calibrate(z, calib, 0.75);
    std::size_t inside = 0;
    for (const auto& s : calib) {
        const auto iv = loc.localize(z, s.start);
        bool all = true;
        for (std::size_t d = 0; d < 3; ++d) {
            EXPECT_LE(iv.low[d], iv.high[d]);
            all = all && iv.low[d] <= s.truth[d] && s.truth[d] <= iv.high[d];
        }
        inside += all;
    }
    // Per-dimension padding guarantees 75% per dimension; joint coverage can be lower.
    for (std::size_t d = 0; d < 3; ++d) {
        std::size_t k = 0;
        for (const auto& s : calib) {
            const auto iv = loc.localize(z, s.start);
            k += iv.low[d] <= s.truth[d] && s.truth[d] <= iv.high[d];
        }
        EXPECT_GE(static_cast<double>(k) / static_cast<double>(calib.size()), 0.75);
    }
    EXPECT_GT(inside, 0u);
    loc.padding() = {0.0, 0.0, 0.0};
    const auto raw = loc.predict(window_sequence(z, calib[0].start, 4), calib[0].start);
    const auto unpadded = loc.localize(z, calib[0].start);
    EXPECT_EQ(raw.low, unpadded.low);
    EXPECT_EQ(raw.high, unpadded.high);
    EXPECT_THROW(loc.localize(window_sequence(z, 0, 3), 0), DataError);
    EXPECT_THROW(loc.calibrate(z, {}, 0.9), DataError);
}
