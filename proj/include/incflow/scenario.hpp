#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "incflow/errors.hpp"
#include "incflow/network.hpp"
#include "incflow/simulator.hpp"

namespace incflow::sim {

/// Request for automatically scripted events.
struct EventPlanRequest {
    std::size_t rear = 0;
    std::size_t inter = 0;
    double dwell_s = 120.0;
    double clearance_s = 10.0;
    double warmup_s = 120.0;
    double spacing_s = 60.0;  // idle time between one event's clearance and the next trigger
    double headway_s = 3.0;   // rear follower departs this long after its leader
};

struct PlannedScenario {
    std::vector<VehicleSpec> specs;  // route file with follower trajectories rewritten
    std::vector<ScriptedEvent> events;
    std::vector<std::string> skipped;  // requested events that could not be placed
};

namespace detail {

inline bool realized(const RunResult& r, const std::vector<ScriptedEvent>& events) {
    for (const auto& ev : events) {
        const bool hit = std::any_of(r.collisions.begin(), r.collisions.end(),
                                     [&](const CollisionRecord& c) { return c.event_id == ev.id; });
        if (!hit) return false;
    }
    return true;
}

inline double free_flow_until(const network::RoadGraph& g, const std::vector<std::size_t>& route, std::size_t upto) {
    double t = 0.0;
    for (std::size_t i = 0; i <= upto && i < route.size(); ++i) t += g.edge(route[i]).free_flow_time();
    return t;
}

}  // namespace detail

/// Scripts collision events into a fleet, the way a route-file pre-processor
/// would: a leader is chosen, a PV follower's trajectory is rewritten so the
/// pair meets at the stop location, and the stop is scheduled. Every accepted
/// event is verified by simulation. Rewritten follower trajectories apply to
/// the control variant as well; only the stops differ.
inline PlannedScenario plan_events(std::shared_ptr<const network::RoadGraph> graph, std::vector<VehicleSpec> specs,
                                   const EventPlanRequest& req, const SimConfig& cfg) {
    const auto& g = *graph;
    PlannedScenario out;
    std::set<std::size_t> used;
    double t_from = req.warmup_s;
    const VehicleClass leader_cycle[] = {VehicleClass::PV, VehicleClass::bus, VehicleClass::AV};
    std::size_t rear_done = 0, inter_done = 0, cycle = 0;

    auto unused_pv_after = [&](std::size_t start) -> std::optional<std::size_t> {
        for (std::size_t k = 0; k < specs.size(); ++k) {
            const std::size_t i = (start + 1 + k) % specs.size();
            if (!used.contains(i) && specs[i].cls == VehicleClass::PV) return i;
        }
        return std::nullopt;
    };

    auto try_accept = [&](std::vector<VehicleSpec> cand_specs, ScriptedEvent ev, std::size_t l, std::size_t f) {
        auto events = out.events;
        events.push_back(ev);
        RunResult r;
        try {
            r = run_scenario(graph, cand_specs, events, cfg);
        } catch (const DataError&) {
            return false;
        }
        if (!detail::realized(r, events)) return false;
        specs = std::move(cand_specs);
        out.events = std::move(events);
        used.insert(l);
        used.insert(f);
        const auto& rec = *std::find_if(r.collisions.begin(), r.collisions.end(),
                                        [&](const CollisionRecord& c) { return c.event_id == ev.id; });
        t_from = rec.t + ev.dwell_s + ev.clearance_s + req.spacing_s;
        return true;
    };

    const std::size_t wanted = req.rear + req.inter;
    for (std::size_t n = 0; n < wanted; ++n) {
        // Alternate types while both are still owed.
        const bool want_rear =
            rear_done < req.rear && (inter_done >= req.inter || rear_done * req.inter <= inter_done * req.rear);
        const std::string id = "ev" + std::to_string(n);
        bool placed = false;
        if (want_rear) {
            for (int relax = 0; relax < 2 && !placed; ++relax) {
                const VehicleClass prefer = leader_cycle[cycle % 3];
                for (std::size_t l = 0; l < specs.size() && !placed; ++l) {
                    const auto& ls = specs[l];
                    if (used.contains(l) || ls.depart_s < t_from || ls.route.size() < 2) continue;
                    if (relax == 0 && ls.cls != prefer) continue;
                    if (!admissible(VehicleClass::PV, ls.cls, EventType::rear)) continue;
                    if (ls.depart_s + detail::free_flow_until(g, ls.route, 1) + 30.0 > cfg.horizon_s) continue;
                    auto f = unused_pv_after(l);
                    if (!f || *f == l) continue;
                    auto cand = specs;
                    cand[*f].route = ls.route;
                    cand[*f].depart_s = ls.depart_s + req.headway_s;
                    cand[*f].depart_speed = 0.0;
                    ScriptedEvent ev;
                    ev.id = id;
                    ev.type = EventType::rear;
                    ev.leader = ls.id;
                    ev.follower = cand[*f].id;
                    ev.stop_edge = ls.route[1];
                    ev.trigger_s = ls.depart_s;
                    ev.dwell_s = req.dwell_s;
                    ev.clearance_s = req.clearance_s;
                    placed = try_accept(std::move(cand), ev, l, *f);
                }
            }
            ++cycle;
            if (placed) ++rear_done;
            else {
                out.skipped.push_back(id + " (rear)");
                ++rear_done;
            }
        } else {
            for (std::size_t l = 0; l < specs.size() && !placed; ++l) {
                const auto& ls = specs[l];
                if (used.contains(l) || ls.cls != VehicleClass::PV || ls.depart_s < t_from) continue;
                // First interior node on the leader's route.
                std::optional<std::size_t> pos;
                for (std::size_t i = 0; i < ls.route.size(); ++i)
                    if (g.node(g.edge(ls.route[i]).to).kind == network::NodeKind::intersection) {
                        pos = i;
                        break;
                    }
                if (!pos) continue;
                const std::size_t le = ls.route[*pos];
                const std::size_t node = g.edge(le).to;
                const auto dl = g.direction(le);
                const double leader_at_node = ls.depart_s + detail::free_flow_until(g, ls.route, *pos);
                if (leader_at_node + 30.0 > cfg.horizon_s) continue;
                auto f = unused_pv_after(l);
                if (!f) continue;
                // Perpendicular approach from a boundary node, then straight on.
                std::optional<std::vector<std::size_t>> froute;
                for (std::size_t b = 0; b < g.num_nodes() && !froute; ++b) {
                    if (g.node(b).kind == network::NodeKind::intersection || b == node) continue;
                    auto in = g.shortest_path(b, node);
                    if (!in) continue;
                    const auto df = g.direction(in->back());
                    if (std::abs(dl.x * df.x + dl.y * df.y) > 0.2) continue;
                    for (std::size_t d = 0; d < g.num_nodes() && !froute; ++d) {
                        if (g.node(d).kind == network::NodeKind::intersection || d == node || d == b) continue;
                        auto outp = g.shortest_path(node, d);
                        if (!outp) continue;
                        const auto dn = g.direction(outp->front());
                        if (dn.x * df.x + dn.y * df.y < 0.9) continue;
                        auto r = *in;
                        r.insert(r.end(), outp->begin(), outp->end());
                        froute = std::move(r);
                    }
                }
                if (!froute) continue;
                std::size_t approach = 0;
                for (std::size_t i = 0; i < froute->size(); ++i)
                    if (g.edge((*froute)[i]).to == node) approach = i;
                const double follower_ff = detail::free_flow_until(g, *froute, approach);
                // Speeding followers cover the approach faster than free flow.
                for (double lag : {8.0, 15.0, 25.0}) {
                    auto cand = specs;
                    cand[*f].route = *froute;
                    cand[*f].depart_s = std::max(0.0, leader_at_node + lag - 0.75 * follower_ff);
                    cand[*f].depart_speed = 0.0;
                    ScriptedEvent ev;
                    ev.id = id;
                    ev.type = EventType::inter;
                    ev.leader = ls.id;
                    ev.follower = cand[*f].id;
                    ev.node = node;
                    ev.trigger_s = ls.depart_s;
                    ev.dwell_s = req.dwell_s;
                    ev.clearance_s = req.clearance_s;
                    if (try_accept(std::move(cand), ev, l, *f)) {
                        placed = true;
                        break;
                    }
                }
            }
            if (!placed) out.skipped.push_back(id + " (inter)");
            ++inter_done;
        }
    }
    out.specs = std::move(specs);
    return out;
}

}  // namespace incflow::sim
