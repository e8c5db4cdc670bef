#pragma once

#include <string>

#include "incflow/errors.hpp"

namespace incflow::sim {

enum class VehicleClass { PV, bus, AV };

inline const char* to_string(VehicleClass c) {
    switch (c) {
        case VehicleClass::PV: return "PV";
        case VehicleClass::bus: return "bus";
        case VehicleClass::AV: return "AV";
    }
    return "?";
}

inline VehicleClass vehicle_class_from(const std::string& s) {
    if (s == "PV" || s == "pv") return VehicleClass::PV;
    if (s == "bus") return VehicleClass::bus;
    if (s == "AV" || s == "av") return VehicleClass::AV;
    throw DataError("unknown vehicle class '" + s + "'");
}

struct ClassDefaults {
    double vmax;     // m/s
    double accel;    // m/s^2
    double decel;    // m/s^2
    double length;   // m
    double min_gap;  // m
};

// AV automated stopping is expressed as a larger standstill gap and stronger
// braking than a PV of similar size.
inline ClassDefaults class_defaults(VehicleClass c) {
    switch (c) {
        case VehicleClass::PV: return {20.0, 2.6, 4.5, 5.0, 2.5};
        case VehicleClass::bus: return {15.0, 1.2, 3.5, 12.0, 2.5};
        case VehicleClass::AV: return {18.0, 2.0, 4.0, 5.0, 3.0};
    }
    return {20.0, 2.6, 4.5, 5.0, 2.5};
}

}  // namespace incflow::sim
