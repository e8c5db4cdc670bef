#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "incflow/emissions.hpp"
#include "incflow/errors.hpp"
#include "incflow/network.hpp"
#include "incflow/simulator.hpp"
#include "incflow/stats.hpp"

namespace incflow::features {

enum Channel : std::size_t { kTTI = 0, kCE = 1, kSpeed = 2, kCollision = 3, kSpike = 4 };
inline constexpr std::size_t kNumChannels = 5;
inline constexpr std::size_t kNumContinuous = 3;

inline const char* channel_name(std::size_t c) {
    static constexpr const char* names[] = {"tti", "ce", "speed", "c", "s"};
    return c < kNumChannels ? names[c] : "?";
}

/// Travel time index: observed over free-flow travel time.
inline double tti(double tt_obs, double tt_ff) {
    if (!(tt_ff > 0.0)) throw std::invalid_argument("tti: free-flow time must be positive");
    if (tt_obs < 0.0) throw std::invalid_argument("tti: observed time must be non-negative");
    return tt_obs / tt_ff;
}

/// Edge x time x channel array. Binary channels (collision, spike) are never
/// rescaled; mu/sigma hold (0, 1) for them.
struct FeatureTensor {
    std::size_t num_edges = 0;
    std::size_t num_bins = 0;
    double bin_s = 30.0;
    std::vector<std::string> edge_ids;
    std::vector<double> values;  // [(e * T + t) * 5 + c]
    std::vector<double> mu;      // [e * 5 + c]
    std::vector<double> sigma;
    bool standardized = false;
    std::vector<sim::CollisionRecord> collisions;

    FeatureTensor() = default;
    FeatureTensor(std::size_t e, std::size_t t, double bin)
        : num_edges(e), num_bins(t), bin_s(bin), values(e * t * kNumChannels, 0.0), mu(e * kNumChannels, 0.0),
          sigma(e * kNumChannels, 1.0) {}

    double& at(std::size_t e, std::size_t t, std::size_t c) { return values[(e * num_bins + t) * kNumChannels + c]; }
    double at(std::size_t e, std::size_t t, std::size_t c) const { return values[(e * num_bins + t) * kNumChannels + c]; }

    std::vector<double> series(std::size_t e, std::size_t c) const {
        std::vector<double> s(num_bins);
        for (std::size_t t = 0; t < num_bins; ++t) s[t] = at(e, t, c);
        return s;
    }

    /// Maps a standardized value back to raw units.
    double raw_value(std::size_t e, std::size_t c, double z) const {
        if (!standardized || c >= kNumContinuous) return z;
        return z * sigma[e * kNumChannels + c] + mu[e * kNumChannels + c];
    }
    /// Scale factor from standardized to raw units (0 for constant channels).
    double scale(std::size_t e, std::size_t c) const {
        if (!standardized || c >= kNumContinuous) return 1.0;
        return sigma[e * kNumChannels + c];
    }

    std::size_t bin_of(double t) const {
        const auto b = static_cast<std::size_t>(std::max(0.0, std::floor(t / bin_s + 1e-9)));
        return std::min(b, num_bins - 1);
    }
};

struct AggregateParams {
    double bin_s = 30.0;
    double spike_level = 0.95;
    double horizon_s = 3600.0;
};

namespace detail {

struct Segment {
    std::uint32_t edge = 0;
    std::vector<std::size_t> rows;  // log indices in time order
    bool completed = false;
};

// Splits each vehicle's log stream into per-edge visits.
inline std::vector<std::vector<Segment>> segments(const sim::RunResult& run, std::size_t num_vehicles) {
    std::vector<std::vector<Segment>> out(num_vehicles);
    for (std::size_t i = 0; i < run.logs.size(); ++i) {
        const auto& l = run.logs[i];
        if (l.vehicle >= num_vehicles) throw DataError("features: log references unknown vehicle index");
        auto& segs = out[l.vehicle];
        if (segs.empty() || segs.back().edge != l.edge) segs.push_back({l.edge, {}, false});
        segs.back().rows.push_back(i);
    }
    for (std::size_t v = 0; v < num_vehicles; ++v) {
        auto& segs = out[v];
        for (std::size_t s = 0; s + 1 < segs.size(); ++s) segs[s].completed = true;
        if (!segs.empty() && v < run.outcomes.size() && run.outcomes[v] == sim::VehicleStatus::arrived)
            segs.back().completed = true;
    }
    return out;
}

}  // namespace detail

/// Per-(vehicle, edge) free-flow traversal times from isolated baseline runs.
inline std::vector<std::map<std::uint32_t, double>> free_flow_times(const sim::RunResult& baseline, std::size_t num_vehicles) {
    std::vector<std::map<std::uint32_t, double>> ff(num_vehicles);
    const auto segs = detail::segments(baseline, num_vehicles);
    for (std::size_t v = 0; v < num_vehicles; ++v)
        for (const auto& s : segs[v])
            if (s.completed) ff[v][s.edge] = baseline.logs[s.rows.back()].dwell_s + baseline.dt;
    return ff;
}

/// Builds the raw edge-time tensor from a scenario run and its free-flow
/// baselines.
///
/// TTI per bin averages vehicle ratios observed/free-flow. A traversal counts
/// in the bin where it completes; a traversal still in progress also counts
/// in each earlier bin where its elapsed time already exceeds its free-flow
/// time, so blocked vehicles register before they leave the edge. Bins with
/// no contribution read TTI = 1, mean speed = edge speed limit, CE = 0.
inline FeatureTensor aggregate(const network::RoadGraph& g, std::size_t num_vehicles, const sim::RunResult& scenario,
                               const sim::RunResult& baseline, const std::vector<sim::CollisionRecord>& collisions,
                               const AggregateParams& p) {
    if (!(p.bin_s > 0.0)) throw ConfigError("features: bin width must be positive");
    const double ratio = p.bin_s / scenario.dt;
    if (std::abs(ratio - std::round(ratio)) > 1e-9) throw ConfigError("features: bin width must be a multiple of dt");
    if (std::abs(scenario.dt - baseline.dt) > 1e-12) throw DataError("features: scenario and baseline use different dt");
    const auto T = static_cast<std::size_t>(std::ceil(p.horizon_s / p.bin_s - 1e-9));
    if (T < 1) throw ConfigError("features: horizon shorter than one bin");
    const std::size_t E = g.num_edges();
    FeatureTensor out(E, T, p.bin_s);
    for (const auto& e : g.edges()) out.edge_ids.push_back(e.id);
    out.collisions = collisions;

    const auto ff = free_flow_times(baseline, num_vehicles);
    const auto segs = detail::segments(scenario, num_vehicles);
    const double dt = scenario.dt;

    std::vector<double> tti_sum(E * T, 0.0), tti_n(E * T, 0.0), spd_sum(E * T, 0.0), spd_n(E * T, 0.0);
    for (std::size_t v = 0; v < num_vehicles; ++v) {
        if (segs[v].empty()) continue;
        for (const auto& s : segs[v]) {
            auto it = ff[v].find(s.edge);
            if (it == ff[v].end()) {
                if (s.completed)
                    throw DataError("features: alignment violation, vehicle index " + std::to_string(v) +
                                    " has no free-flow baseline on edge '" + g.edge(s.edge).id + "'");
                continue;
            }
            const double tt_ff = it->second;
            const std::size_t last_bin = out.bin_of(scenario.logs[s.rows.back()].t);
            // Last log row inside every bin the visit touches.
            std::map<std::size_t, std::size_t> last_in_bin;
            for (std::size_t r : s.rows) last_in_bin[out.bin_of(scenario.logs[r].t)] = r;
            for (const auto& [bin, r] : last_in_bin) {
                const double elapsed = scenario.logs[r].dwell_s + dt;
                if (s.completed && bin == last_bin) {
                    tti_sum[s.edge * T + bin] += tti(elapsed, tt_ff);
                    tti_n[s.edge * T + bin] += 1.0;
                } else if (elapsed > tt_ff) {
                    tti_sum[s.edge * T + bin] += tti(elapsed, tt_ff);
                    tti_n[s.edge * T + bin] += 1.0;
                }
            }
        }
    }
    for (const auto& l : scenario.logs) {
        const std::size_t b = out.bin_of(l.t);
        out.at(l.edge, b, kCE) += l.ce_step;
        spd_sum[l.edge * T + b] += l.speed;
        spd_n[l.edge * T + b] += 1.0;
    }
    for (std::size_t e = 0; e < E; ++e)
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t k = e * T + t;
            out.at(e, t, kTTI) = tti_n[k] > 0.0 ? tti_sum[k] / tti_n[k] : 1.0;
            out.at(e, t, kSpeed) = spd_n[k] > 0.0 ? spd_sum[k] / spd_n[k] : g.edge(e).vmax_mps;
        }
    for (const auto& c : collisions) {
        if (c.edge >= E) throw DataError("features: collision on unknown edge");
        out.at(c.edge, out.bin_of(c.t), kCollision) = 1.0;
    }
    for (std::size_t e = 0; e < E; ++e) {
        const auto series = out.series(e, kTTI);
        const double thr = ceiling_quantile(series, p.spike_level);
        for (std::size_t t = 0; t < T; ++t) out.at(e, t, kSpike) = series[t] > thr ? 1.0 : 0.0;
    }
    return out;
}

/// Per-edge z-scoring of the continuous channels with population variance,
/// fitted on bins [fit_lo, fit_hi) and applied to every bin. Channels that
/// are constant over the fit range become all zeros and keep sigma = 0. A
/// spread below 1e-9 of the mean's magnitude is rounding noise and counts as
/// constant.
inline FeatureTensor standardize_on(FeatureTensor raw, std::size_t fit_lo, std::size_t fit_hi) {
    if (raw.standardized) throw std::invalid_argument("standardize: tensor is already standardized");
    fit_hi = std::min(fit_hi, raw.num_bins);
    if (fit_hi < fit_lo + 2) throw DataError("standardize: need at least two time bins");
    const double n = static_cast<double>(fit_hi - fit_lo);
    for (std::size_t e = 0; e < raw.num_edges; ++e) {
        for (std::size_t c = 0; c < kNumChannels; ++c) {
            const std::size_t k = e * kNumChannels + c;
            if (c >= kNumContinuous) {
                raw.mu[k] = 0.0;
                raw.sigma[k] = 1.0;
                continue;
            }
            double mean = 0.0;
            for (std::size_t t = fit_lo; t < fit_hi; ++t) mean += raw.at(e, t, c);
            mean /= n;
            double var = 0.0;
            for (std::size_t t = fit_lo; t < fit_hi; ++t) var += (raw.at(e, t, c) - mean) * (raw.at(e, t, c) - mean);
            double sd = std::sqrt(var / n);
            if (sd <= 1e-9 * std::max(1.0, std::abs(mean))) sd = 0.0;
            raw.mu[k] = mean;
            raw.sigma[k] = sd > 0.0 ? sd : 0.0;
            for (std::size_t t = 0; t < raw.num_bins; ++t) {
                double& x = raw.at(e, t, c);
                x = sd > 0.0 ? (x - mean) / sd : 0.0;
            }
        }
    }
    raw.standardized = true;
    return raw;
}

inline FeatureTensor standardize(FeatureTensor raw) {
    const std::size_t t = raw.num_bins;
    return standardize_on(std::move(raw), 0, t);
}

inline FeatureTensor inverse_standardize(FeatureTensor z) {
    if (!z.standardized) return z;
    for (std::size_t e = 0; e < z.num_edges; ++e)
        for (std::size_t c = 0; c < kNumContinuous; ++c)
            for (std::size_t t = 0; t < z.num_bins; ++t) z.at(e, t, c) = z.raw_value(e, c, z.at(e, t, c));
    z.standardized = false;
    return z;
}

/// Sum of step emissions on each edge straight from the logs.
inline std::vector<double> edge_emissions(const sim::RunResult& run, std::size_t num_edges) {
    std::vector<double> out(num_edges, 0.0);
    for (const auto& l : run.logs) out.at(l.edge) += l.ce_step;
    return out;
}

}  // namespace incflow::features
