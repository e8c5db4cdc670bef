#include <gtest/gtest.h>

#include <random>

#include "incflow/evaluation.hpp"
#include "oracles.hpp"

using namespace incflow::eval;

namespace {

std::vector<Interval> random_intervals(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::exponential_distribution<double> w(1.0);
    std::vector<Interval> out;
    for (std::size_t i = 0; i < n; ++i) {
        const double lo = g(rng);
        out.push_back({lo, lo + w(rng)});
    }
    return out;
}

std::vector<double> random_truth(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.5, 1.0);
    std::vector<double> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(g(rng));
    return out;
}

}  // namespace

TEST(Metrics, PointErrorExamples) {
    EXPECT_EQ(rmse({1, 2}, {1, 2}), 0.0);
    EXPECT_NEAR(rmse({3, 4}, {0, 0}), std::sqrt(12.5), 1e-15);
    EXPECT_NEAR(rmse({-6, 8}, {0, 0}), 2.0 * std::sqrt(12.5), 1e-12);
    EXPECT_DOUBLE_EQ(mae({2, 3, 4}, {1, 2, 3}), 1.0);
    EXPECT_DOUBLE_EQ(*r2({2, 3, 4}, {1, 2, 3}), -0.5);
    EXPECT_DOUBLE_EQ(*r2({1, 2, 3}, {1, 2, 3}), 1.0);
    EXPECT_FALSE(r2({1, 2}, {5, 5}).has_value());
    EXPECT_EQ(smape({0, 1}, {0, 1}), 0.0);
    EXPECT_DOUBLE_EQ(smape({0, 2}, {0, 1}), 100.0 * (2.0 / 3.0) / 2.0);
    EXPECT_THROW(rmse({}, {}), std::invalid_argument);
    EXPECT_THROW(mae({1}, {1, 2}), std::invalid_argument);
}

TEST(Metrics, IntervalExamples) {
    EXPECT_EQ(picp({{0, 1}, {0, 1}}, {0.5, 1.0}), 1.0);
    EXPECT_EQ(picp({{0, 1}, {0, 1}, {0, 1}, {0, 1}}, {0, 1, 0.3, 1.5}), 0.75);
    EXPECT_EQ(mean_width({{1, 1}, {2, 2}}), 0.0);
    EXPECT_EQ(mean_width({{0, 1}, {0, 3}}), 2.0);
    EXPECT_THROW(mean_width({{2, 1}}), std::invalid_argument);
    EXPECT_THROW(picp({}, {}), std::invalid_argument);
}

TEST(Metrics, DiceExamples) {
    EXPECT_EQ(dice({1, 3}, {1, 3}), 1.0);
    EXPECT_EQ(dice({1, 3}, {2, 4}), 0.5);
    EXPECT_EQ(dice({1, 2}, {3, 4}), 0.0);
    EXPECT_EQ(dice({2, 2}, {2, 2}), 1.0);
    EXPECT_EQ(dice({2, 2}, {3, 3}), 0.0);
    EXPECT_EQ(dice({2, 2}, {1, 3}), 0.0);
    std::mt19937_64 rng(1);
    const auto a = random_intervals(100, rng), b = random_intervals(100, rng);
    for (std::size_t i = 0; i < 100; ++i) {
        EXPECT_EQ(dice(a[i], b[i]), dice(b[i], a[i]));
        EXPECT_GE(dice(a[i], b[i]), 0.0);
        EXPECT_LE(dice(a[i], b[i]), 1.0);
    }
}

TEST(Metrics, SpikeCoverageExample) {
    std::vector<double> truth;
    std::vector<Interval> iv;
    for (int k = 1; k <= 100; ++k) {
        truth.push_back(k);
        // Covers 95, 97, 99 among the spikes.
        const bool hit = k < 95 || k % 2 == 1;
        iv.push_back(hit ? Interval{k - 0.5, k + 0.5} : Interval{k + 1.0, k + 2.0});
    }
    EXPECT_EQ(*spike_cov(iv, truth), 0.5);
    EXPECT_EQ(oracle::quantile_by_count(truth, 0.95), 95.0);
    std::vector<Interval> all(100, Interval{0, 200});
    EXPECT_EQ(*spike_cov(all, truth), 1.0);
}

TEST(Metrics, BruteForceRecounts) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 5 + trial;
        const auto iv = random_intervals(n, rng);
        const auto truth = random_truth(n, rng);
        std::size_t hit = 0;
        for (std::size_t i = 0; i < n; ++i) hit += iv[i].low <= truth[i] && truth[i] <= iv[i].high;
        EXPECT_EQ(picp(iv, truth), static_cast<double>(hit) / static_cast<double>(n));
        const double p95 = oracle::quantile_by_count(truth, 0.95);
        std::size_t sn = 0, sk = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (truth[i] >= p95) {
                ++sn;
                sk += iv[i].low <= truth[i] && truth[i] <= iv[i].high;
            }
        ASSERT_GT(sn, 0u);
        EXPECT_EQ(*spike_cov(iv, truth), static_cast<double>(sk) / static_cast<double>(sn));
    }
}

TEST(Metrics, WideningNeverLowersCoverage) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> pad(0.0, 0.5);
    for (int trial = 0; trial < 100; ++trial) {
        auto iv = random_intervals(30, rng);
        const auto truth = random_truth(30, rng);
        const double p0 = picp(iv, truth), s0 = *spike_cov(iv, truth), w0 = mean_width(iv);
        const double d = pad(rng);
        for (auto& x : iv) {
            x.low -= d;
            x.high += d;
        }
        EXPECT_GE(picp(iv, truth), p0);
        EXPECT_GE(*spike_cov(iv, truth), s0);
        EXPECT_NEAR(mean_width(iv), w0 + 2.0 * d, 1e-12);
    }
}

TEST(Report, RmseAtLeastMaeAndRoundTrip) {
    std::mt19937_64 rng(4);
    MetricReport r;
    r.split = "test";
    for (std::size_t h = 1; h <= 3; ++h) {
        const auto iv = random_intervals(40, rng);
        const auto truth = random_truth(40, rng);
        r.forecast.push_back(score_forecast("tti", h, iv, truth));
        EXPECT_GE(r.forecast.back().rmse, r.forecast.back().mae);
    }
    r.forecast.push_back(score_forecast("ce", 1, {{0, 2}, {0, 2}}, {1, 1}));
    EXPECT_FALSE(r.forecast.back().r2.has_value());
    r.localization.push_back(score_localization("x", {{0, 10}, {5, 7}}, {5, 20}, 5.0));
    EXPECT_DOUBLE_EQ(r.localization.back().dice, 0.5);
    EXPECT_DOUBLE_EQ(r.localization.back().picp, 0.5);
    check_report(r);
    const auto back = report_from_json(to_json(r));
    EXPECT_EQ(to_json(back).dump(), to_json(r).dump());
    const std::string csv = to_csv(r);
    EXPECT_NE(csv.find("test,forecast,ce,1,r2,undefined,2"), std::string::npos);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 * 7 + 4);
    r.forecast[0].mae = r.forecast[0].rmse + 1.0;
    EXPECT_THROW(check_report(r), std::logic_error);
}
