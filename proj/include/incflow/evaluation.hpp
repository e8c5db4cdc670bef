#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "incflow/stats.hpp"

namespace incflow::eval {

struct Interval {
    double low = 0.0;
    double high = 0.0;
    double width() const { return high - low; }
    bool contains(double z) const { return low <= z && z <= high; }
};

namespace detail {

inline void check_pair(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string(what) + ": length mismatch");
    if (a == 0) throw std::invalid_argument(std::string(what) + ": empty input");
}

}  // namespace detail

inline double rmse(const std::vector<double>& pred, const std::vector<double>& truth) {
    detail::check_pair(pred.size(), truth.size(), "rmse");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    return std::sqrt(s / static_cast<double>(pred.size()));
}

inline double mae(const std::vector<double>& pred, const std::vector<double>& truth) {
    detail::check_pair(pred.size(), truth.size(), "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
    return s / static_cast<double>(pred.size());
}

/// Percent, in [0, 200]. A pair with both values zero contributes 0.
inline double smape(const std::vector<double>& pred, const std::vector<double>& truth) {
    detail::check_pair(pred.size(), truth.size(), "smape");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double den = std::abs(pred[i]) + std::abs(truth[i]);
        if (den > 0.0) s += 2.0 * std::abs(pred[i] - truth[i]) / den;
    }
    return 100.0 * s / static_cast<double>(pred.size());
}

/// Empty when the truth is constant.
inline std::optional<double> r2(const std::vector<double>& pred, const std::vector<double>& truth) {
    detail::check_pair(pred.size(), truth.size(), "r2");
    double mean = 0.0;
    for (double t : truth) mean += t;
    mean /= static_cast<double>(truth.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
    }
    if (ss_tot == 0.0) return std::nullopt;
    return 1.0 - ss_res / ss_tot;
}

inline double picp(const std::vector<Interval>& iv, const std::vector<double>& truth) {
    detail::check_pair(iv.size(), truth.size(), "picp");
    std::size_t k = 0;
    for (std::size_t i = 0; i < iv.size(); ++i) k += iv[i].contains(truth[i]);
    return static_cast<double>(k) / static_cast<double>(iv.size());
}

inline double mean_width(const std::vector<Interval>& iv) {
    if (iv.empty()) throw std::invalid_argument("mean_width: empty input");
    double s = 0.0;
    for (const auto& x : iv) {
        if (x.low > x.high) throw std::invalid_argument("mean_width: interval with low > high");
        s += x.width();
    }
    return s / static_cast<double>(iv.size());
}

/// 2|a ∩ b| / (|a| + |b|). Two degenerate intervals score 1 when equal, else 0.
inline double dice(const Interval& a, const Interval& b) {
    if (a.low > a.high || b.low > b.high) throw std::invalid_argument("dice: unordered interval");
    const double total = a.width() + b.width();
    if (total == 0.0) return a.low == b.low ? 1.0 : 0.0;
    const double overlap = std::max(0.0, std::min(a.high, b.high) - std::max(a.low, b.low));
    return 2.0 * overlap / total;
}

/// Coverage over truths at or above the ceiling P95 of the truths themselves.
/// Empty when there is no such truth.
inline std::optional<double> spike_cov(const std::vector<Interval>& iv, const std::vector<double>& truth,
                                       double level = 0.95) {
    detail::check_pair(iv.size(), truth.size(), "spike_cov");
    const double p = ceiling_quantile(truth, level);
    std::size_t n = 0, k = 0;
    for (std::size_t i = 0; i < iv.size(); ++i)
        if (truth[i] >= p) {
            ++n;
            k += iv[i].contains(truth[i]);
        }
    if (n == 0) return std::nullopt;
    return static_cast<double>(k) / static_cast<double>(n);
}

// ------------------------------------------------------------------ report

struct ForecastMetrics {
    std::string target;
    std::size_t horizon = 0;  // 1-based
    std::size_t n = 0;
    double rmse = 0.0, mae = 0.0, smape = 0.0;
    std::optional<double> r2;
    double picp = 0.0, mean_width = 0.0;
    std::optional<double> spike_cov;
};

struct LocalizationMetrics {
    std::string dim;
    std::size_t n = 0;
    double rmse = 0.0;  // interval endpoints against the truth interval endpoints
    double picp = 0.0, mean_width = 0.0, dice = 0.0;
};

struct MetricReport {
    std::string split;
    std::vector<ForecastMetrics> forecast;
    std::vector<LocalizationMetrics> localization;

    /// Mean Dice over the localization dimensions, empty without events.
    std::optional<double> mean_dice() const {
        if (localization.empty()) return std::nullopt;
        double s = 0.0;
        for (const auto& l : localization) s += l.dice;
        return s / static_cast<double>(localization.size());
    }
};

/// Point forecast is the interval midpoint.
inline ForecastMetrics score_forecast(std::string target, std::size_t horizon, const std::vector<Interval>& iv,
                                      const std::vector<double>& truth) {
    detail::check_pair(iv.size(), truth.size(), "forecast report");
    std::vector<double> mid;
    for (const auto& x : iv) mid.push_back(0.5 * (x.low + x.high));
    ForecastMetrics m;
    m.target = std::move(target);
    m.horizon = horizon;
    m.n = iv.size();
    m.rmse = rmse(mid, truth);
    m.mae = mae(mid, truth);
    m.smape = smape(mid, truth);
    m.r2 = r2(mid, truth);
    m.picp = picp(iv, truth);
    m.mean_width = mean_width(iv);
    m.spike_cov = spike_cov(iv, truth);
    return m;
}

/// `truth` are points; `truth_radius` turns each into the interval used by Dice
/// and the endpoint RMSE.
inline LocalizationMetrics score_localization(std::string dim, const std::vector<Interval>& iv,
                                              const std::vector<double>& truth, double truth_radius) {
    detail::check_pair(iv.size(), truth.size(), "localization report");
    LocalizationMetrics m;
    m.dim = std::move(dim);
    m.n = iv.size();
    std::vector<double> ends, true_ends;
    double d = 0.0;
    for (std::size_t i = 0; i < iv.size(); ++i) {
        const Interval t{truth[i] - truth_radius, truth[i] + truth_radius};
        ends.push_back(iv[i].low);
        ends.push_back(iv[i].high);
        true_ends.push_back(t.low);
        true_ends.push_back(t.high);
        d += dice(iv[i], t);
    }
    m.rmse = rmse(ends, true_ends);
    m.picp = picp(iv, truth);
    m.mean_width = mean_width(iv);
    m.dice = d / static_cast<double>(iv.size());
    return m;
}

/// Throws std::logic_error when a report breaks a metric invariant.
inline void check_report(const MetricReport& r) {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    for (const auto& f : r.forecast) {
        if (f.n == 0) throw std::logic_error("report: empty forecast cell");
        if (f.rmse + 1e-12 < f.mae) throw std::logic_error("report: rmse < mae for " + f.target);
        if (!unit(f.picp) || (f.spike_cov && !unit(*f.spike_cov)) || f.mean_width < 0.0)
            throw std::logic_error("report: bounded metric out of range for " + f.target);
    }
    for (const auto& l : r.localization)
        if (l.n == 0 || !unit(l.picp) || !unit(l.dice) || l.mean_width < 0.0)
            throw std::logic_error("report: bounded metric out of range for " + l.dim);
}

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j;
    j["split"] = r.split;
    j["forecast"] = nlohmann::json::array();
    for (const auto& f : r.forecast)
        j["forecast"].push_back({{"target", f.target},
                                 {"horizon", f.horizon},
                                 {"n", f.n},
                                 {"rmse", f.rmse},
                                 {"mae", f.mae},
                                 {"smape", f.smape},
                                 {"r2", opt_json(f.r2)},
                                 {"picp", f.picp},
                                 {"mean_width", f.mean_width},
                                 {"spike_cov", opt_json(f.spike_cov)}});
    j["localization"] = nlohmann::json::array();
    for (const auto& l : r.localization)
        j["localization"].push_back(
            {{"dim", l.dim}, {"n", l.n}, {"rmse", l.rmse}, {"picp", l.picp}, {"mean_width", l.mean_width}, {"dice", l.dice}});
    return j;
}

inline std::optional<double> opt_from(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.split = j.at("split").get<std::string>();
    for (const auto& f : j.at("forecast"))
        r.forecast.push_back({f.at("target"), f.at("horizon"), f.at("n"), f.at("rmse"), f.at("mae"), f.at("smape"),
                              opt_from(f.at("r2")), f.at("picp"), f.at("mean_width"), opt_from(f.at("spike_cov"))});
    for (const auto& l : j.at("localization"))
        r.localization.push_back({l.at("dim"), l.at("n"), l.at("rmse"), l.at("picp"), l.at("mean_width"), l.at("dice")});
    return r;
}

/// One row per metric x target x horizon. Undefined values are written as
/// "undefined".
inline std::string to_csv(const MetricReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "split,section,target,horizon,metric,value,n\n";
    auto row = [&](const char* section, const std::string& target, std::size_t h, const char* metric,
                   std::optional<double> v, std::size_t n) {
        os << r.split << ',' << section << ',' << target << ',' << h << ',' << metric << ',';
        if (v)
            os << *v;
        else
            os << "undefined";
        os << ',' << n << '\n';
    };
    for (const auto& f : r.forecast) {
        row("forecast", f.target, f.horizon, "rmse", f.rmse, f.n);
        row("forecast", f.target, f.horizon, "mae", f.mae, f.n);
        row("forecast", f.target, f.horizon, "smape", f.smape, f.n);
        row("forecast", f.target, f.horizon, "r2", f.r2, f.n);
        row("forecast", f.target, f.horizon, "picp", f.picp, f.n);
        row("forecast", f.target, f.horizon, "mean_width", f.mean_width, f.n);
        row("forecast", f.target, f.horizon, "spike_cov", f.spike_cov, f.n);
    }
    for (const auto& l : r.localization) {
        row("localization", l.dim, 0, "rmse", l.rmse, l.n);
        row("localization", l.dim, 0, "picp", l.picp, l.n);
        row("localization", l.dim, 0, "mean_width", l.mean_width, l.n);
        row("localization", l.dim, 0, "dice", l.dice, l.n);
    }
    return os.str();
}

}  // namespace incflow::eval
