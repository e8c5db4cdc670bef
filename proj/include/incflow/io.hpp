#pragma once

// File formats: run logs and collisions as CSV, vehicle and event lists as
// JSON, the feature tensor as long-format CSV with a JSON sidecar.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "incflow/errors.hpp"
#include "incflow/features.hpp"
#include "incflow/linalg.hpp"
#include "incflow/network.hpp"
#include "incflow/simulator.hpp"
#include "incflow/stats.hpp"

namespace incflow::io {

using nlohmann::json;
namespace fs = std::filesystem;

// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw std::runtime_error("fmt: conversion failed");
    return {buf, end};
}

inline double parse_double(std::string_view s, const std::string& where) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw DataError(where + ": bad number '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
    std::vector<std::string_view> out;
    std::size_t b = 0;
    for (;;) {
        const std::size_t e = line.find(sep, b);
        out.push_back(line.substr(b, e == std::string_view::npos ? std::string_view::npos : e - b));
        if (e == std::string_view::npos) break;
        b = e + 1;
    }
    return out;
}

inline std::vector<std::string_view> lines(std::string_view text) {
    std::vector<std::string_view> out;
    for (auto l : split(text, '\n')) {
        if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
        if (!l.empty()) out.push_back(l);
    }
    return out;
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    out << content;
}

inline json read_json(const fs::path& p) {
    try {
        return json::parse(read_file(p));
    } catch (const json::parse_error& ex) {
        throw DataError(p.string() + ": invalid JSON: " + ex.what());
    }
}

inline std::string hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string content_hash(std::string_view s) { return hex(fnv1a(s)); }

namespace detail {

inline void expect_header(const std::vector<std::string_view>& rows, std::string_view header, const std::string& what) {
    if (rows.empty() || rows.front() != header)
        throw DataError(what + ": expected header '" + std::string(header) + "'");
}

inline void check_id(const std::string& id, const char* what) {
    if (id.empty() || id.find_first_of(",\n\r") != std::string::npos)
        throw DataError(std::string(what) + " id '" + id + "' is empty or contains a separator");
}

}  // namespace detail

// ------------------------------------------------------------ vehicles

inline json specs_to_json(const std::vector<sim::VehicleSpec>& specs, const network::RoadGraph& g) {
    json out = json::array();
    for (const auto& s : specs) {
        json route = json::array();
        for (std::size_t e : s.route) route.push_back(g.edge(e).id);
        out.push_back({{"id", s.id},
                       {"class", to_string(s.cls)},
                       {"route", route},
                       {"depart_s", s.depart_s},
                       {"vmax", s.vmax},
                       {"accel", s.accel},
                       {"decel", s.decel},
                       {"length", s.length},
                       {"min_gap", s.min_gap},
                       {"depart_speed", s.depart_speed}});
    }
    return out;
}

/// Explicit vehicle specs. Kinematic fields default to the class values.
inline std::vector<sim::VehicleSpec> specs_from_json(const json& arr, const network::RoadGraph& g) {
    std::vector<sim::VehicleSpec> out;
    try {
        for (const auto& v : arr) {
            std::vector<std::size_t> route;
            for (const auto& e : v.at("route")) route.push_back(g.edge_index(e.get<std::string>()));
            auto s = sim::VehicleSpec::make(v.at("id").get<std::string>(), sim::vehicle_class_from(v.at("class").get<std::string>()),
                                            std::move(route), v.at("depart_s").get<double>());
            detail::check_id(s.id, "vehicle");
            s.vmax = v.value("vmax", s.vmax);
            s.accel = v.value("accel", s.accel);
            s.decel = v.value("decel", s.decel);
            s.length = v.value("length", s.length);
            s.min_gap = v.value("min_gap", s.min_gap);
            s.depart_speed = v.value("depart_speed", s.depart_speed);
            out.push_back(std::move(s));
        }
    } catch (const json::exception& ex) {
        throw DataError(std::string("vehicles: schema violation: ") + ex.what());
    }
    return out;
}

// -------------------------------------------------------------- events

inline json events_to_json(const std::vector<sim::ScriptedEvent>& evs, const network::RoadGraph& g) {
    json out = json::array();
    for (const auto& ev : evs) {
        json j{{"id", ev.id},
               {"type", to_string(ev.type)},
               {"leader", ev.leader},
               {"follower", ev.follower},
               {"trigger_s", ev.trigger_s},
               {"dwell_s", ev.dwell_s},
               {"clearance_s", ev.clearance_s}};
        if (ev.stop_edge) j["stop_edge"] = g.edge(*ev.stop_edge).id;
        if (ev.stop_offset_m) j["stop_offset_m"] = *ev.stop_offset_m;
        if (ev.node) j["node"] = g.node(*ev.node).id;
        out.push_back(std::move(j));
    }
    return out;
}

inline std::vector<sim::ScriptedEvent> events_from_json(const json& arr, const network::RoadGraph& g) {
    std::vector<sim::ScriptedEvent> out;
    try {
        for (const auto& j : arr) {
            sim::ScriptedEvent ev;
            ev.id = j.at("id").get<std::string>();
            detail::check_id(ev.id, "event");
            ev.type = sim::event_type_from(j.at("type").get<std::string>());
            ev.leader = j.at("leader").get<std::string>();
            ev.follower = j.at("follower").get<std::string>();
            ev.trigger_s = j.value("trigger_s", 0.0);
            ev.dwell_s = j.value("dwell_s", ev.dwell_s);
            ev.clearance_s = j.value("clearance_s", ev.clearance_s);
            if (j.contains("stop_edge")) ev.stop_edge = g.edge_index(j.at("stop_edge").get<std::string>());
            if (j.contains("stop_offset_m")) ev.stop_offset_m = j.at("stop_offset_m").get<double>();
            if (j.contains("node")) ev.node = g.node_index(j.at("node").get<std::string>());
            out.push_back(std::move(ev));
        }
    } catch (const json::exception& ex) {
        throw DataError(std::string("events: schema violation: ") + ex.what());
    }
    return out;
}

// ---------------------------------------------------------------- logs

inline constexpr std::string_view kLogHeader = "veh_id,class,edge_id,t,speed,accel,dwell_s,ce_step";
inline constexpr std::string_view kCollisionHeader = "event_id,type,leader,follower,x,y,t,edge_id";

inline std::string logs_csv(const std::vector<sim::StepLog>& logs, const std::vector<sim::VehicleSpec>& specs,
                            const network::RoadGraph& g) {
    std::string out(kLogHeader);
    out += '\n';
    for (const auto& l : logs) {
        const auto& s = specs.at(l.vehicle);
        out += s.id;
        out += ',';
        out += to_string(s.cls);
        out += ',';
        out += g.edge(l.edge).id;
        for (double v : {l.t, l.speed, l.accel, l.dwell_s, l.ce_step}) {
            out += ',';
            out += fmt(v);
        }
        out += '\n';
    }
    return out;
}

inline std::vector<sim::StepLog> parse_logs_csv(std::string_view text, const std::vector<sim::VehicleSpec>& specs,
                                                const network::RoadGraph& g) {
    const auto rows = lines(text);
    detail::expect_header(rows, kLogHeader, "logs");
    std::unordered_map<std::string_view, std::uint32_t> vidx;
    for (std::size_t i = 0; i < specs.size(); ++i) vidx.emplace(specs[i].id, static_cast<std::uint32_t>(i));
    std::vector<sim::StepLog> out;
    out.reserve(rows.size() - 1);
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto f = split(rows[r]);
        const std::string where = "logs line " + std::to_string(r + 1);
        if (f.size() != 8) throw DataError(where + ": expected 8 fields");
        auto v = vidx.find(f[0]);
        if (v == vidx.end()) throw DataError(where + ": unknown vehicle '" + std::string(f[0]) + "'");
        sim::StepLog l;
        l.vehicle = v->second;
        l.edge = static_cast<std::uint32_t>(g.edge_index(std::string(f[2])));
        l.t = parse_double(f[3], where);
        l.speed = parse_double(f[4], where);
        l.accel = parse_double(f[5], where);
        l.dwell_s = parse_double(f[6], where);
        l.ce_step = parse_double(f[7], where);
        out.push_back(l);
    }
    return out;
}

inline std::string collisions_csv(const std::vector<sim::CollisionRecord>& cs, const network::RoadGraph& g) {
    std::string out(kCollisionHeader);
    out += '\n';
    for (const auto& c : cs) {
        out += c.event_id + ',' + to_string(c.type) + ',' + c.leader + ',' + c.follower + ',' + fmt(c.x) + ',' + fmt(c.y) +
               ',' + fmt(c.t) + ',' + g.edge(c.edge).id + '\n';
    }
    return out;
}

inline std::vector<sim::CollisionRecord> parse_collisions_csv(std::string_view text, const network::RoadGraph& g) {
    const auto rows = lines(text);
    detail::expect_header(rows, kCollisionHeader, "collisions");
    std::vector<sim::CollisionRecord> out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto f = split(rows[r]);
        const std::string where = "collisions line " + std::to_string(r + 1);
        if (f.size() != 8) throw DataError(where + ": expected 8 fields");
        out.push_back({std::string(f[0]), sim::event_type_from(std::string(f[1])), std::string(f[2]), std::string(f[3]),
                       parse_double(f[4], where), parse_double(f[5], where), parse_double(f[6], where),
                       g.edge_index(std::string(f[7]))});
    }
    return out;
}

// -------------------------------------------------------------- tensor

inline constexpr std::string_view kTensorHeader = "edge_id,t_bin,tti,ce,speed,c,s";
inline constexpr std::string_view kTensorFormat = "incflow-tensor/1";

/// Values as stored, one row per (edge, bin).
inline std::string tensor_csv(const features::FeatureTensor& z) {
    std::string out(kTensorHeader);
    out += '\n';
    for (std::size_t e = 0; e < z.num_edges; ++e)
        for (std::size_t t = 0; t < z.num_bins; ++t) {
            out += z.edge_ids.at(e);
            out += ',';
            out += std::to_string(t);
            for (std::size_t c = 0; c < features::kNumChannels; ++c) {
                out += ',';
                out += fmt(z.at(e, t, c));
            }
            out += '\n';
        }
    return out;
}

inline json collisions_json(const std::vector<sim::CollisionRecord>& cs) {
    json out = json::array();
    for (const auto& c : cs)
        out.push_back({{"event_id", c.event_id},
                       {"type", to_string(c.type)},
                       {"leader", c.leader},
                       {"follower", c.follower},
                       {"x", c.x},
                       {"y", c.y},
                       {"t", c.t},
                       {"edge", c.edge}});
    return out;
}

inline std::vector<sim::CollisionRecord> collisions_from_json(const json& arr) {
    std::vector<sim::CollisionRecord> out;
    for (const auto& c : arr)
        out.push_back({c.at("event_id"), sim::event_type_from(c.at("type").get<std::string>()), c.at("leader"),
                       c.at("follower"), c.at("x"), c.at("y"), c.at("t"), c.at("edge")});
    return out;
}

/// Index maps, statistics and collision ground truth that travel with the CSV.
inline json tensor_sidecar(const features::FeatureTensor& z) {
    return {{"format", kTensorFormat},
            {"num_edges", z.num_edges},
            {"num_bins", z.num_bins},
            {"bin_s", z.bin_s},
            {"channels", {"tti", "ce", "speed", "c", "s"}},
            {"edge_ids", z.edge_ids},
            {"standardized", z.standardized},
            {"mu", z.mu},
            {"sigma", z.sigma},
            {"collisions", collisions_json(z.collisions)}};
}

inline features::FeatureTensor load_tensor(std::string_view csv, const json& side) {
    features::FeatureTensor z;
    try {
        if (side.value("format", std::string()) != kTensorFormat) throw DataError("tensor: unknown sidecar format");
        z = features::FeatureTensor(side.at("num_edges"), side.at("num_bins"), side.at("bin_s"));
        z.edge_ids = side.at("edge_ids").get<std::vector<std::string>>();
        z.standardized = side.at("standardized");
        z.mu = side.at("mu").get<std::vector<double>>();
        z.sigma = side.at("sigma").get<std::vector<double>>();
        z.collisions = collisions_from_json(side.at("collisions"));
    } catch (const json::exception& ex) {
        throw DataError(std::string("tensor sidecar: ") + ex.what());
    }
    if (z.edge_ids.size() != z.num_edges || z.mu.size() != z.num_edges * features::kNumChannels ||
        z.sigma.size() != z.mu.size())
        throw DataError("tensor sidecar: inconsistent sizes");
    std::unordered_map<std::string_view, std::size_t> eidx;
    for (std::size_t e = 0; e < z.num_edges; ++e) eidx.emplace(z.edge_ids[e], e);
    const auto rows = lines(csv);
    detail::expect_header(rows, kTensorHeader, "tensor");
    if (rows.size() - 1 != z.num_edges * z.num_bins) throw DataError("tensor: row count does not match the sidecar");
    std::vector<std::uint8_t> seen(z.num_edges * z.num_bins, 0);
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto f = split(rows[r]);
        const std::string where = "tensor line " + std::to_string(r + 1);
        if (f.size() != 2 + features::kNumChannels) throw DataError(where + ": expected 7 fields");
        auto e = eidx.find(f[0]);
        if (e == eidx.end()) throw DataError(where + ": unknown edge '" + std::string(f[0]) + "'");
        const auto t = static_cast<std::size_t>(parse_double(f[1], where));
        if (t >= z.num_bins) throw DataError(where + ": bin out of range");
        if (seen[e->second * z.num_bins + t]++) throw DataError(where + ": duplicate (edge, bin)");
        for (std::size_t c = 0; c < features::kNumChannels; ++c) z.at(e->second, t, c) = parse_double(f[2 + c], where);
    }
    return z;
}

// --------------------------------------------------------------- matrix

inline json matrix_json(const Matrix& m) { return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}}; }

inline Matrix matrix_from_json(const json& j) {
    Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
    const auto d = j.at("data").get<std::vector<double>>();
    if (d.size() != m.size()) throw DataError("matrix: data length does not match its shape");
    m.data() = d;
    return m;
}

}  // namespace incflow::io
