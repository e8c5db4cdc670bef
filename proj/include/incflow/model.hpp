#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "incflow/autodiff.hpp"
#include "incflow/errors.hpp"
#include "incflow/features.hpp"
#include "incflow/layers.hpp"
#include "incflow/network.hpp"
#include "incflow/stats.hpp"

namespace incflow::nn {

using features::FeatureTensor;
using features::kNumChannels;

inline constexpr std::size_t kTargets = 2;  // TTI, CE
inline const char* target_name(std::size_t q) { return q == 0 ? "tti" : "ce"; }

/// Deterministic child seed, so each consumer of randomness can be rerun alone.
inline std::uint64_t sub_seed(std::uint64_t seed, std::string_view name) {
    Fnv1a h;
    h.update(&seed, sizeof seed);
    h.update(name);
    return h.digest();
}

struct ModelConfig {
    std::size_t lookback = 12;
    std::size_t horizons = 3;
    int k = 2;
    std::size_t d_lstm = 32;
    std::size_t d_dcgru = 32;
    std::size_t d_fuse = 64;
    Pooling pooling = Pooling::mean;
};

/// Head output index of (target, edge, bound).
inline std::size_t head_index(std::size_t q, std::size_t e, std::size_t bound, std::size_t num_edges) {
    return (q * num_edges + e) * 2 + bound;
}

/// L x (E*5) matrix; row k holds every edge's features at bin start + k.
inline Matrix window_sequence(const FeatureTensor& z, std::size_t start, std::size_t lookback) {
    if (start + lookback > z.num_bins)
        throw DataError("window: need " + std::to_string(lookback) + " bins from " + std::to_string(start) + ", tensor has " +
                        std::to_string(z.num_bins));
    Matrix m(lookback, z.num_edges * kNumChannels);
    for (std::size_t k = 0; k < lookback; ++k)
        for (std::size_t e = 0; e < z.num_edges; ++e)
            for (std::size_t c = 0; c < kNumChannels; ++c) m(k, e * kNumChannels + c) = z.at(e, start + k, c);
    return m;
}

/// Row k of a window sequence reshaped to E x 5.
inline Matrix sequence_frame(const Matrix& seq, std::size_t k) {
    const std::size_t e = seq.cols() / kNumChannels;
    Matrix f(e, kNumChannels);
    std::copy(seq.row(k).begin(), seq.row(k).end(), f.data().begin());
    return f;
}

/// Window starts whose lookback and horizon bins all fall inside [lo, hi).
inline std::vector<std::size_t> window_starts(std::size_t lo, std::size_t hi, std::size_t lookback, std::size_t horizons,
                                              std::size_t stride = 1) {
    std::vector<std::size_t> out;
    if (stride == 0) throw ConfigError("window stride must be positive");
    for (std::size_t s = lo; s + lookback + horizons <= hi; s += stride) out.push_back(s);
    return out;
}

// ----------------------------------------------------------- forecaster

/// BiLSTM over the flattened window plus a DCGRU over the graph frames,
/// fused by a two-layer MLP with one affine head per horizon.
class Forecaster {
   public:
    Forecaster() = default;
    Forecaster(const ModelConfig& cfg, network::TransitionPair supports, std::uint64_t seed)
        : cfg_(cfg), supports_(std::move(supports)) {
        const std::size_t e = supports_.forward.rows();
        if (e == 0 || !supports_.forward.square() || supports_.backward.rows() != e)
            throw ConfigError("forecaster: bad transition matrices");
        if (cfg.lookback == 0 || cfg.horizons == 0) throw ConfigError("forecaster: lookback and horizon must be >= 1");
        std::mt19937_64 rng(sub_seed(seed, "init"));
        lstm_ = BiLstm("lstm", e * kNumChannels, cfg.d_lstm, rng);
        cell_ = DcgruCell("dcgru", cfg.k, kNumChannels, cfg.d_dcgru, rng);
        head_ = FusionHead("fusion", lstm_.output_dim() + cfg.d_dcgru, cfg.d_fuse, kTargets * e * 2, cfg.horizons, rng);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    std::size_t num_edges() const noexcept { return supports_.forward.rows(); }
    std::size_t output_dim() const noexcept { return kTargets * num_edges() * 2; }
    const network::TransitionPair& supports() const noexcept { return supports_; }
    BiLstm& lstm() noexcept { return lstm_; }
    DcgruCell& cell() noexcept { return cell_; }
    FusionHead& head() noexcept { return head_; }

    /// Raw head outputs (no repair), one 1 x R row per horizon.
    std::vector<Var> forward(Tape& t, const Matrix& seq) {
        if (seq.rows() < cfg_.lookback)
            throw DataError("forecast: window has " + std::to_string(seq.rows()) + " bins, lookback is " +
                            std::to_string(cfg_.lookback));
        if (seq.cols() != num_edges() * kNumChannels) throw DataError("forecast: window width does not match the graph");
        Matrix tail = seq;
        if (seq.rows() > cfg_.lookback) {
            tail = Matrix(cfg_.lookback, seq.cols());
            const std::size_t off = (seq.rows() - cfg_.lookback) * seq.cols();
            std::copy(seq.data().begin() + static_cast<std::ptrdiff_t>(off), seq.data().end(), tail.data().begin());
        }
        Var x = t.constant(tail);
        Var enc = lstm_.encode(t, x);
        Var sf = t.constant(supports_.forward);
        Var sb = t.constant(supports_.backward);
        Var h = t.constant(Matrix(num_edges(), cfg_.d_dcgru));
        std::vector<Var> states;
        for (std::size_t k = 0; k < cfg_.lookback; ++k) {
            h = cell_.step(t, h, t.constant(sequence_frame(tail, k)), sf, sb);
            states.push_back(h);
        }
        return head_.forward(t, enc, pool_hidden(states, cfg_.pooling));
    }

    /// Repaired outputs in standardized units, [horizon][R].
    std::vector<std::vector<double>> predict(const Matrix& seq) {
        Tape t;
        auto heads = forward(t, seq);
        std::vector<std::vector<double>> out;
        for (const Var& v : heads) {
            std::vector<double> p = v.value().data();
            check_finite(v.value(), "forecast head");
            monotonic_repair(p);
            out.push_back(std::move(p));
        }
        return out;
    }

    /// Interval loss of one window starting at `start` against bins
    /// start + L + h. Spike bins weigh `spike_weight`.
    Var window_loss(Tape& t, const FeatureTensor& z, std::size_t start, double beta, double spike_weight) {
        const std::size_t L = cfg_.lookback, E = num_edges();
        if (start + L + cfg_.horizons > z.num_bins) throw DataError("training window runs past the tensor");
        auto heads = forward(t, window_sequence(z, start, L));
        std::vector<Var> lows, highs;
        Matrix target(1, kTargets * E * heads.size()), weight(1, kTargets * E * heads.size());
        std::vector<std::size_t> lo_idx, hi_idx;
        for (std::size_t q = 0; q < kTargets; ++q)
            for (std::size_t e = 0; e < E; ++e) {
                lo_idx.push_back(head_index(q, e, 0, E));
                hi_idx.push_back(head_index(q, e, 1, E));
            }
        std::size_t n = 0;
        for (std::size_t s = 0; s < heads.size(); ++s) {
            lows.push_back(gather_cols(heads[s], lo_idx));
            highs.push_back(gather_cols(heads[s], hi_idx));
            const std::size_t bin = start + L + s;
            for (std::size_t q = 0; q < kTargets; ++q)
                for (std::size_t e = 0; e < E; ++e, ++n) {
                    target[n] = z.at(e, bin, q == 0 ? features::kTTI : features::kCE);
                    weight[n] = z.at(e, bin, features::kSpike) > 0.0 ? spike_weight : 1.0;
                }
        }
        return interval_loss(concat_cols(lows), concat_cols(highs), target, weight, beta);
    }

    std::vector<Param*> params() {
        std::vector<Param*> out = lstm_.params();
        for (Param* p : cell_.params()) out.push_back(p);
        for (Param* p : head_.params()) out.push_back(p);
        return out;
    }

   private:
    ModelConfig cfg_;
    network::TransitionPair supports_;
    BiLstm lstm_;
    DcgruCell cell_;
    FusionHead head_;
};

// ----------------------------------------------------------- calibration

struct IntervalSample {
    double low = 0.0;
    double high = 0.0;
    double z = 0.0;
};

inline bool covers(const IntervalSample& s, double delta) { return s.low - delta <= s.z && s.z <= s.high + delta; }

inline double violation(const IntervalSample& s) { return std::max({s.low - s.z, s.z - s.high, 0.0}); }

/// Per-cell padding indexed (target, edge, horizon).
struct CalibrationTable {
    double level = 0.9;
    std::size_t num_edges = 0;
    std::size_t horizons = 0;
    std::vector<double> delta;
    std::vector<std::size_t> counts;
    std::vector<std::uint8_t> fallback;  // 1 where the global quantile was used

    std::size_t index(std::size_t q, std::size_t e, std::size_t h) const { return (q * num_edges + e) * horizons + h; }
    double at(std::size_t q, std::size_t e, std::size_t h) const { return delta.at(index(q, e, h)); }

    static CalibrationTable identity(std::size_t num_edges, std::size_t horizons, double level = 0.9) {
        CalibrationTable t{level, num_edges, horizons, {}, {}, {}};
        t.delta.assign(kTargets * num_edges * horizons, 0.0);
        t.counts.assign(t.delta.size(), 0);
        t.fallback.assign(t.delta.size(), 0);
        return t;
    }
};

namespace detail {

// Smallest level-quantile of the violations, nudged up until the floating
// point containment test agrees with the residual ordering.
inline double padding_for(const std::vector<IntervalSample>& samples, double level) {
    std::vector<double> r;
    r.reserve(samples.size());
    for (const auto& s : samples) r.push_back(violation(s));
    double d = ceiling_quantile(r, level);
    for (const auto& s : samples) {
        if (violation(s) > d) continue;
        for (int guard = 0; !covers(s, d) && guard < 64; ++guard) d = std::nextafter(d, std::numeric_limits<double>::infinity());
    }
    return d;
}

}  // namespace detail

/// Conformal padding from per-cell samples laid out like CalibrationTable.
/// Cells with fewer than `min_count` samples use the quantile pooled over
/// all edges for the same target and horizon.
inline CalibrationTable calibrate_cells(const std::vector<std::vector<IntervalSample>>& cells, std::size_t num_edges,
                                        std::size_t horizons, double level, std::size_t min_count = 5) {
    if (!(level > 0.0 && level <= 1.0)) throw ConfigError("calibration level must be in (0, 1]");
    auto table = CalibrationTable::identity(num_edges, horizons, level);
    if (cells.size() != table.delta.size()) throw std::invalid_argument("calibrate: cell layout mismatch");
    std::size_t total = 0;
    for (const auto& c : cells) total += c.size();
    if (total == 0) throw DataError("calibration set is empty");
    for (std::size_t q = 0; q < kTargets; ++q)
        for (std::size_t h = 0; h < horizons; ++h) {
            std::vector<IntervalSample> pooled;
            for (std::size_t e = 0; e < num_edges; ++e) {
                const auto& c = cells[table.index(q, e, h)];
                pooled.insert(pooled.end(), c.begin(), c.end());
            }
            const double global = pooled.empty() ? 0.0 : detail::padding_for(pooled, level);
            for (std::size_t e = 0; e < num_edges; ++e) {
                const std::size_t i = table.index(q, e, h);
                table.counts[i] = cells[i].size();
                if (cells[i].size() >= min_count) {
                    table.delta[i] = detail::padding_for(cells[i], level);
                } else {
                    table.delta[i] = global;
                    table.fallback[i] = 1;
                }
            }
        }
    return table;
}

/// Collects (low, high, z) in standardized units for every calibration window.
inline std::vector<std::vector<IntervalSample>> collect_intervals(Forecaster& m, const FeatureTensor& z,
                                                                  const std::vector<std::size_t>& starts) {
    const std::size_t E = m.num_edges(), H = m.config().horizons, L = m.config().lookback;
    std::vector<std::vector<IntervalSample>> cells(kTargets * E * H);
    for (std::size_t s : starts) {
        const auto pred = m.predict(window_sequence(z, s, L));
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t q = 0; q < kTargets; ++q)
                for (std::size_t e = 0; e < E; ++e) {
                    const double truth = z.at(e, s + L + h, q == 0 ? features::kTTI : features::kCE);
                    cells[(q * E + e) * H + h].push_back(
                        {pred[h][head_index(q, e, 0, E)], pred[h][head_index(q, e, 1, E)], truth});
                }
    }
    return cells;
}

inline CalibrationTable conformal_calibrate(Forecaster& m, const FeatureTensor& z, const std::vector<std::size_t>& starts,
                                            double level, std::size_t min_count = 5) {
    if (starts.empty()) throw DataError("calibration set is empty");
    return calibrate_cells(collect_intervals(m, z, starts), m.num_edges(), m.config().horizons, level, min_count);
}

// --------------------------------------------------------------- forecast

/// Calibrated bounds, indexed (target, edge, horizon). Raw units plus the
/// standardized values they came from.
struct IntervalForecast {
    std::size_t num_edges = 0;
    std::size_t horizons = 0;
    std::vector<double> low, high;
    std::vector<double> low_std, high_std;
    std::size_t index(std::size_t q, std::size_t e, std::size_t h) const { return (q * num_edges + e) * horizons + h; }
};

/// `seq` must be standardized with the tensor statistics `stats` carries.
inline IntervalForecast forecast(Forecaster& m, const CalibrationTable& calib, const Matrix& seq,
                                 const FeatureTensor& stats) {
    const std::size_t E = m.num_edges(), H = m.config().horizons;
    if (calib.num_edges != E || calib.horizons != H) throw DataError("forecast: calibration table does not fit the model");
    if (!stats.standardized) throw DataError("forecast: window statistics are not standardized");
    const auto pred = m.predict(seq);
    IntervalForecast out{E, H, {}, {}, {}, {}};
    const std::size_t n = kTargets * E * H;
    out.low.resize(n);
    out.high.resize(n);
    out.low_std.resize(n);
    out.high_std.resize(n);
    for (std::size_t q = 0; q < kTargets; ++q)
        for (std::size_t e = 0; e < E; ++e)
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t i = out.index(q, e, h);
                const double d = calib.at(q, e, h);
                out.low_std[i] = pred[h][head_index(q, e, 0, E)] - d;
                out.high_std[i] = pred[h][head_index(q, e, 1, E)] + d;
                const std::size_t c = q == 0 ? features::kTTI : features::kCE;
                out.low[i] = stats.raw_value(e, c, out.low_std[i]);
                out.high[i] = std::max(out.low[i], stats.raw_value(e, c, out.high_std[i]));
            }
    return out;
}

inline IntervalForecast forecast(Forecaster& m, const CalibrationTable& calib, const FeatureTensor& z, std::size_t start) {
    return forecast(m, calib, window_sequence(z, start, m.config().lookback), z);
}

// ------------------------------------------------------------- localizer

struct EventSample {
    std::size_t start = 0;           // window start bin
    std::array<double, 3> truth{};   // x, y, absolute t
    std::size_t event = 0;           // index into the collision list
};

/// Every window of length L inside [lo, hi) that contains exactly one
/// collision. Windows holding two collisions have no single target and are
/// left out.
inline std::vector<EventSample> event_samples(const FeatureTensor& z, std::size_t lookback, std::size_t lo, std::size_t hi) {
    std::vector<EventSample> out;
    hi = std::min(hi, z.num_bins);
    std::vector<std::size_t> bins;
    for (const auto& c : z.collisions) bins.push_back(z.bin_of(c.t));
    auto inside = [&](std::size_t s) {
        return static_cast<std::size_t>(std::count_if(bins.begin(), bins.end(), [&](std::size_t b) { return b >= s && b < s + lookback; }));
    };
    for (std::size_t i = 0; i < z.collisions.size(); ++i) {
        const auto& c = z.collisions[i];
        const std::size_t b = bins[i];
        if (b < lo || b >= hi) continue;
        const std::size_t first = b + 1 >= lookback ? b + 1 - lookback : 0;
        for (std::size_t s = std::max(first, lo); s <= b && s + lookback <= hi; ++s)
            if (inside(s) == 1) out.push_back({s, {c.x, c.y, c.t}, i});
    }
    return out;
}

/// (x, y, t) intervals, each ordered low <= high.
struct EventIntervals {
    std::array<double, 3> low{};
    std::array<double, 3> high{};
};

/// BiLSTM regressor for event bounds. Targets are (x, y, t - window end),
/// standardized with training statistics; intervals are widened by a
/// per-dimension residual quantile.
class Localizer {
   public:
    Localizer() = default;
    Localizer(std::size_t num_edges, std::size_t lookback, std::size_t hidden, double bin_s, std::uint64_t seed)
        : lookback_(lookback), bin_s_(bin_s) {
        std::mt19937_64 rng(sub_seed(seed, "localizer"));
        lstm_ = BiLstm("loc.lstm", num_edges * kNumChannels, hidden, rng);
        w_ = glorot("loc.w", lstm_.output_dim(), 6, rng);
        b_ = zeros("loc.b", 1, 6);
    }

    std::size_t lookback() const noexcept { return lookback_; }
    double bin_s() const noexcept { return bin_s_; }
    std::array<double, 3>& target_mean() noexcept { return mu_; }
    std::array<double, 3>& target_scale() noexcept { return sd_; }
    std::array<double, 3>& padding() noexcept { return pad_; }
    const std::array<double, 3>& padding() const noexcept { return pad_; }

    double window_end(std::size_t start) const { return static_cast<double>(start + lookback_) * bin_s_; }

    /// Standardized target of a sample.
    std::array<double, 3> encode_target(const EventSample& s) const {
        const std::array<double, 3> rel{s.truth[0], s.truth[1], s.truth[2] - window_end(s.start)};
        std::array<double, 3> out{};
        for (std::size_t d = 0; d < 3; ++d) out[d] = (rel[d] - mu_[d]) / sd_[d];
        return out;
    }

    /// Fits target statistics on training samples.
    void fit_scaler(const std::vector<EventSample>& train) {
        if (train.empty()) throw DataError("localizer: no training events");
        for (std::size_t d = 0; d < 3; ++d) {
            double m = 0.0;
            for (const auto& s : train) m += d == 2 ? s.truth[2] - window_end(s.start) : s.truth[d];
            m /= static_cast<double>(train.size());
            double v = 0.0;
            for (const auto& s : train) {
                const double x = d == 2 ? s.truth[2] - window_end(s.start) : s.truth[d];
                v += (x - m) * (x - m);
            }
            const double sd = std::sqrt(v / static_cast<double>(train.size()));
            mu_[d] = m;
            sd_[d] = sd > 1e-9 ? sd : 1.0;
        }
    }

    Var forward(Tape& t, const Matrix& seq) {
        Var enc = lstm_.encode(t, t.constant(seq));
        return add_row(matmul(enc, t.param(w_)), t.param(b_));
    }

    Var sample_loss(Tape& t, const FeatureTensor& z, const EventSample& s) {
        return event_bounds_loss(forward(t, window_sequence(z, s.start, lookback_)), encode_target(s));
    }

    /// Unpadded, repaired bounds in raw units with absolute time.
    EventIntervals predict(const Matrix& seq, std::size_t start) {
        Tape t;
        Var out = forward(t, seq);
        check_finite(out.value(), "localizer head");
        EventIntervals r;
        for (std::size_t d = 0; d < 3; ++d) {
            const double offset = d == 2 ? window_end(start) : 0.0;
            const double lo = out.value()[2 * d] * sd_[d] + mu_[d] + offset;
            const double hi = out.value()[2 * d + 1] * sd_[d] + mu_[d] + offset;
            r.low[d] = lo;
            r.high[d] = std::max(lo, hi);
        }
        return r;
    }

    EventIntervals localize(const Matrix& seq, std::size_t start) {
        if (seq.rows() < lookback_)
            throw DataError("localize: window has " + std::to_string(seq.rows()) + " bins, lookback is " +
                            std::to_string(lookback_));
        auto r = predict(seq, start);
        for (std::size_t d = 0; d < 3; ++d) {
            r.low[d] -= pad_[d];
            r.high[d] += pad_[d];
        }
        return r;
    }

    EventIntervals localize(const FeatureTensor& z, std::size_t start) {
        return localize(window_sequence(z, start, lookback_), start);
    }

    /// Residual-quantile padding per dimension.
    void calibrate(const FeatureTensor& z, const std::vector<EventSample>& calib, double level) {
        if (calib.empty()) throw DataError("localizer: calibration set is empty");
        std::array<std::vector<double>, 3> res;
        for (const auto& s : calib) {
            const auto r = predict(window_sequence(z, s.start, lookback_), s.start);
            for (std::size_t d = 0; d < 3; ++d)
                res[d].push_back(std::max({r.low[d] - s.truth[d], s.truth[d] - r.high[d], 0.0}));
        }
        for (std::size_t d = 0; d < 3; ++d) pad_[d] = ceiling_quantile(res[d], level);
    }

    std::vector<Param*> params() {
        auto out = lstm_.params();
        out.push_back(&w_);
        out.push_back(&b_);
        return out;
    }

   private:
    std::size_t lookback_ = 12;
    double bin_s_ = 30.0;
    BiLstm lstm_;
    Param w_, b_;
    std::array<double, 3> mu_{};
    std::array<double, 3> sd_{1.0, 1.0, 1.0};
    std::array<double, 3> pad_{};
};

}  // namespace incflow::nn
