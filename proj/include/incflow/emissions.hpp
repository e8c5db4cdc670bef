#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include <nlohmann/json.hpp>

#include "incflow/vehicle.hpp"

namespace incflow::features {

/// Coefficients of CE(v, a) = c0 + c1 v a + c2 v a^2 + c3 v + c4 v^2 + c5 v^3,
/// in mass per second for v in m/s and a in m/s^2.
struct CECoefficients {
    std::array<double, 6> c{};
    bool operator==(const CECoefficients&) const = default;
};

inline double ce(double v, double a, const CECoefficients& k) {
    const auto& c = k.c;
    const double value = c[0] + c[1] * v * a + c[2] * v * a * a + c[3] * v + c[4] * v * v + c[5] * v * v * v;
    return std::max(0.0, value);
}

/// Per-class coefficient table. The shipped defaults are placeholder
/// magnitudes (roughly grams of CO2 per second), not fitted values.
struct CETable {
    CECoefficients pv{{1.2, 0.25, 0.02, 0.08, 0.002, 0.0001}};
    CECoefficients bus{{3.5, 0.8, 0.06, 0.25, 0.006, 0.0003}};
    CECoefficients av{{1.0, 0.22, 0.02, 0.07, 0.002, 0.0001}};

    const CECoefficients& for_class(sim::VehicleClass cls) const {
        switch (cls) {
            case sim::VehicleClass::bus: return bus;
            case sim::VehicleClass::AV: return av;
            default: return pv;
        }
    }
    bool operator==(const CETable&) const = default;
};

/// Step emissions are snapped to multiples of 2^-20 mass units, which makes
/// every later sum exact regardless of summation order.
inline double quantize_mass(double m) {
    constexpr double scale = 1048576.0;
    return std::round(m * scale) / scale;
}

inline void to_json(nlohmann::json& j, const CECoefficients& k) { j = k.c; }
inline void from_json(const nlohmann::json& j, CECoefficients& k) { k.c = j.get<std::array<double, 6>>(); }

inline void to_json(nlohmann::json& j, const CETable& t) { j = {{"PV", t.pv}, {"bus", t.bus}, {"AV", t.av}}; }
inline void from_json(const nlohmann::json& j, CETable& t) {
    CETable d;
    t.pv = j.contains("PV") ? j.at("PV").get<CECoefficients>() : d.pv;
    t.bus = j.contains("bus") ? j.at("bus").get<CECoefficients>() : d.bus;
    t.av = j.contains("AV") ? j.at("AV").get<CECoefficients>() : d.av;
}

}  // namespace incflow::features
