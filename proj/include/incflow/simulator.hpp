#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "incflow/emissions.hpp"
#include "incflow/errors.hpp"
#include "incflow/network.hpp"
#include "incflow/vehicle.hpp"

namespace incflow::sim {

enum class EventType { rear, inter };

inline const char* to_string(EventType s) { return s == EventType::rear ? "rear" : "inter"; }

inline EventType event_type_from(const std::string& s) {
    if (s == "rear") return EventType::rear;
    if (s == "inter" || s == "intersection") return EventType::inter;
    throw DataError("unknown event type '" + s + "'");
}

/// Admissible (follower, leader, type) collision triples. The second class is
/// always the leading vehicle.
constexpr bool admissible(VehicleClass follower, VehicleClass leader, EventType s) noexcept {
    if (follower != VehicleClass::PV) return false;
    if (s == EventType::rear) return true;
    return leader == VehicleClass::PV;
}

struct VehicleSpec {
    std::string id;
    VehicleClass cls = VehicleClass::PV;
    std::vector<std::size_t> route;  // edge indices
    double depart_s = 0.0;
    double vmax = 0.0;
    double accel = 0.0;
    double decel = 0.0;
    double length = 0.0;
    double min_gap = 0.0;
    double depart_speed = 0.0;

    static VehicleSpec make(std::string id, VehicleClass cls, std::vector<std::size_t> route, double depart_s) {
        const ClassDefaults d = class_defaults(cls);
        return {std::move(id), cls, std::move(route), depart_s, d.vmax, d.accel, d.decel, d.length, d.min_gap, 0.0};
    }
};

struct ScriptedEvent {
    std::string id;
    EventType type = EventType::rear;
    std::string leader;
    std::string follower;
    std::optional<std::size_t> stop_edge;  // rear: edge where the leader halts
    std::optional<double> stop_offset_m;   // rear: halt position, edge midpoint if unset
    std::optional<std::size_t> node;       // inter: intersection node
    double trigger_s = 0.0;
    double dwell_s = 120.0;
    double clearance_s = 10.0;
};

struct CollisionRecord {
    std::string event_id;
    EventType type = EventType::rear;
    std::string leader;
    std::string follower;
    double x = 0.0;
    double y = 0.0;
    double t = 0.0;
    std::size_t edge = 0;
    bool operator==(const CollisionRecord&) const = default;
};

/// One vehicle on one edge at one step.
struct StepLog {
    std::uint32_t vehicle = 0;  // index into the spec list
    std::uint32_t edge = 0;
    double t = 0.0;
    double speed = 0.0;
    double accel = 0.0;
    double dwell_s = 0.0;  // time since entering the edge
    double ce_step = 0.0;  // emitted mass during the step
    bool operator==(const StepLog&) const = default;
};

enum class VehicleStatus { pending, active, arrived, cleared };

inline const char* to_string(VehicleStatus s) {
    switch (s) {
        case VehicleStatus::pending: return "pending";
        case VehicleStatus::active: return "en_route";
        case VehicleStatus::arrived: return "arrived";
        case VehicleStatus::cleared: return "cleared";
    }
    return "?";
}

struct SimConfig {
    double dt = 0.5;
    double horizon_s = 3600.0;
    std::uint64_t seed = 0;
    double dawdle = 0.0;  // Krauss-style imperfection; 0 keeps drivers perfect
    features::CETable ce;
};

struct VehicleCounts {
    std::size_t departed = 0;
    std::size_t arrived = 0;
    std::size_t cleared = 0;
    std::size_t en_route = 0;
    std::size_t pending = 0;
    bool reconciles() const { return departed == arrived + cleared + en_route; }
};

struct EventFailure {
    std::string event_id;
    std::string reason;
};

struct RunResult {
    std::vector<StepLog> logs;
    std::vector<CollisionRecord> collisions;
    std::vector<VehicleStatus> outcomes;  // per spec index
    std::vector<EventFailure> unrealized;
    VehicleCounts counts;
    double dt = 0.5;
    double end_time = 0.0;
};

/// Largest next speed that still lets a vehicle moving with midpoint
/// integration stop within `space` metres when braking at `decel`.
inline double safe_speed(double v, double space, double decel, double dt) {
    const double a2 = 1.0 / (2.0 * decel);
    const double a1 = 0.5 * dt;
    const double a0 = 0.5 * v * dt - space;
    const double disc = a1 * a1 - 4.0 * a2 * a0;
    if (disc < 0.0) return 0.0;
    return std::max(0.0, (-a1 + std::sqrt(disc)) / (2.0 * a2));
}

/// Discrete-time state of one scenario run. Copyable; advancing a copy never
/// affects the original.
class SimState {
   public:
    struct Vehicle {
        VehicleStatus status = VehicleStatus::pending;
        std::size_t route_pos = 0;
        double pos = 0.0;  // front bumper offset on the current edge
        double speed = 0.0;
        double accel = 0.0;
        int lane = 0;
        int next_lane = -1;
        double entry_t = 0.0;
        bool speeding = false;
        bool halted = false;
        std::optional<std::pair<std::size_t, double>> stop;  // (route position, offset)
    };

    enum class Phase { pending, armed, collided, released, done, unrealized };

    struct EventState {
        ScriptedEvent ev;
        std::size_t leader = 0;
        std::size_t follower = 0;
        std::size_t leader_route_pos = 0;
        std::size_t follower_route_pos = 0;
        double stop_offset = 0.0;
        Phase phase = Phase::pending;
        bool leader_halted = false;
        double t_collision = 0.0;
    };

    SimState(std::shared_ptr<const network::RoadGraph> graph, std::vector<VehicleSpec> specs, SimConfig cfg)
        : graph_(std::move(graph)), specs_(std::move(specs)), cfg_(cfg), rng_(cfg.seed) {
        if (!graph_) throw std::invalid_argument("SimState: null graph");
        if (!(cfg_.dt > 0.0)) throw ConfigError("simulator: dt must be positive");
        vehicles_.resize(specs_.size());
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            validate_spec(specs_[i]);
            if (index_.contains(specs_[i].id)) throw DataError("simulator: duplicate vehicle id '" + specs_[i].id + "'");
            index_[specs_[i].id] = i;
            pending_.push_back(i);
        }
        std::stable_sort(pending_.begin(), pending_.end(),
                         [&](std::size_t a, std::size_t b) { return specs_[a].depart_s < specs_[b].depart_s; });
        std::size_t lanes_total = 0;
        for (const auto& e : graph_->edges()) {
            lane_offset_.push_back(lanes_total);
            lanes_total += static_cast<std::size_t>(e.lanes);
        }
        lane_count_ = lanes_total;
        rr_counter_.assign(graph_->num_edges(), 0);
    }

    const network::RoadGraph& graph() const noexcept { return *graph_; }
    const std::vector<VehicleSpec>& specs() const noexcept { return specs_; }
    const std::vector<Vehicle>& vehicles() const noexcept { return vehicles_; }
    const std::vector<EventState>& events() const noexcept { return events_; }
    const std::vector<StepLog>& logs() const noexcept { return logs_; }
    const std::vector<CollisionRecord>& collisions() const noexcept { return collisions_; }
    const SimConfig& config() const noexcept { return cfg_; }
    double time() const noexcept { return time_; }
    bool finished() const noexcept { return time_ >= cfg_.horizon_s - 1e-9; }

    std::optional<std::size_t> vehicle_index(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t edge_of(std::size_t v) const { return specs_[v].route[vehicles_[v].route_pos]; }

    /// Starts the clock at `t` without simulating the empty interval before it.
    void fast_forward(double t) {
        if (t < time_) throw std::invalid_argument("fast_forward: cannot rewind");
        time_ = t;
    }

    /// Places a vehicle directly on its route, bypassing departure. Used to
    /// set up what-if states.
    void place_vehicle(std::size_t v, std::size_t route_pos, double offset, double speed, int lane = 0) {
        auto& veh = vehicles_.at(v);
        const auto& spec = specs_[v];
        if (route_pos >= spec.route.size()) throw std::invalid_argument("place_vehicle: route position out of range");
        if (veh.status == VehicleStatus::pending) {
            pending_.erase(std::remove(pending_.begin(), pending_.end(), v), pending_.end());
            ++departed_;
        }
        veh.status = VehicleStatus::active;
        veh.route_pos = route_pos;
        veh.pos = offset;
        veh.speed = speed;
        veh.accel = 0.0;
        veh.lane = lane;
        veh.entry_t = time_;
    }

    /// Validates and schedules a scripted collision.
    void inject_event(const ScriptedEvent& ev) {
        EventState st;
        st.ev = ev;
        auto leader = vehicle_index(ev.leader);
        auto follower = vehicle_index(ev.follower);
        if (!leader || !follower)
            throw DataError("event '" + ev.id + "': unknown vehicle '" + (leader ? ev.follower : ev.leader) + "'");
        if (*leader == *follower) throw DataError("event '" + ev.id + "': leader and follower are the same vehicle");
        st.leader = *leader;
        st.follower = *follower;
        const auto& ls = specs_[st.leader];
        const auto& fs = specs_[st.follower];
        if (!admissible(fs.cls, ls.cls, ev.type))
            throw DataError("event '" + ev.id + "': inadmissible triple (" + std::string(to_string(fs.cls)) + ", " +
                            to_string(ls.cls) + ", " + to_string(ev.type) + ")");
        if (ev.trigger_s < 0.0 || ev.trigger_s >= cfg_.horizon_s)
            throw DataError("event '" + ev.id + "': trigger time outside the simulation horizon");
        if (!(ev.dwell_s > 0.0)) throw DataError("event '" + ev.id + "': dwell must be positive");
        if (ev.clearance_s < 0.0) throw DataError("event '" + ev.id + "': clearance must be non-negative");
        auto unplaceable = [&](const std::string& why) { return DataError("event '" + ev.id + "': unplaceable, " + why); };
        if (ev.type == EventType::rear) {
            if (!ev.stop_edge || *ev.stop_edge >= graph_->num_edges()) throw unplaceable("no valid stop edge");
            const std::size_t e = *ev.stop_edge;
            auto lp = route_position(ls, [&](std::size_t x) { return x == e; });
            auto fp = route_position(fs, [&](std::size_t x) { return x == e; });
            if (!lp) throw unplaceable("leader route never reaches the stop edge");
            if (!fp) throw unplaceable("follower route never reaches the stop edge");
            st.leader_route_pos = *lp;
            st.follower_route_pos = *fp;
            const double len = graph_->edge(e).length_m;
            st.stop_offset = ev.stop_offset_m.value_or(0.5 * len);
            if (!(st.stop_offset > 0.0 && st.stop_offset <= len)) throw unplaceable("stop offset outside the edge");
        } else {
            if (!ev.node || *ev.node >= graph_->num_nodes()) throw unplaceable("no valid intersection node");
            const std::size_t n = *ev.node;
            auto into = [&](std::size_t x) { return graph_->edge(x).to == n; };
            auto lp = route_position(ls, into);
            auto fp = route_position(fs, into);
            if (!lp) throw unplaceable("leader route never enters the intersection");
            if (!fp) throw unplaceable("follower route never enters the intersection");
            const std::size_t le = ls.route[*lp];
            const std::size_t fe = fs.route[*fp];
            const auto dl = graph_->direction(le);
            const auto df = graph_->direction(fe);
            if (le == fe || std::abs(dl.x * df.x + dl.y * df.y) > 0.2)
                throw unplaceable("approaches are not perpendicular");
            st.leader_route_pos = *lp;
            st.follower_route_pos = *fp;
            st.stop_offset = graph_->edge(le).length_m;
        }
        events_.push_back(std::move(st));
    }

    /// Advances the state by `dt` seconds.
    void step(double dt) {
        if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be positive");
        update_events();
        move_vehicles(dt);
        halt_at_stops(dt);
        intersection_contacts(dt);
        transfer_edges(dt);
        rear_contacts(dt);
        time_ += dt;
        insert_departures();
        log_active();
    }
    void step() { step(cfg_.dt); }

    void run() {
        while (!finished()) step();
        finalize_events();
    }

    VehicleCounts counts() const {
        VehicleCounts c;
        c.departed = departed_;
        for (const auto& v : vehicles_) {
            switch (v.status) {
                case VehicleStatus::arrived: ++c.arrived; break;
                case VehicleStatus::cleared: ++c.cleared; break;
                case VehicleStatus::active: ++c.en_route; break;
                case VehicleStatus::pending: ++c.pending; break;
            }
        }
        return c;
    }

    /// Marks every event that never produced a contact as unrealized.
    void finalize_events() {
        for (auto& es : events_) {
            if (es.phase == Phase::pending || es.phase == Phase::armed) {
                fail(es, es.phase == Phase::pending ? "never triggered" : "no contact before the horizon");
            }
        }
    }

    RunResult result() const {
        RunResult r;
        r.logs = logs_;
        r.collisions = collisions_;
        r.unrealized = failures_;
        r.counts = counts();
        r.dt = cfg_.dt;
        r.end_time = time_;
        r.outcomes.reserve(vehicles_.size());
        for (const auto& v : vehicles_) r.outcomes.push_back(v.status);
        return r;
    }

   private:
    template <class Pred>
    static std::optional<std::size_t> route_position(const VehicleSpec& s, Pred pred) {
        for (std::size_t i = 0; i < s.route.size(); ++i)
            if (pred(s.route[i])) return i;
        return std::nullopt;
    }

    void validate_spec(const VehicleSpec& s) const {
        if (s.route.empty()) throw DataError("vehicle '" + s.id + "': empty route");
        for (std::size_t i = 0; i < s.route.size(); ++i) {
            if (s.route[i] >= graph_->num_edges()) throw DataError("vehicle '" + s.id + "': unknown route edge");
            if (i > 0 && graph_->edge(s.route[i - 1]).to != graph_->edge(s.route[i]).from)
                throw DataError("vehicle '" + s.id + "': route is not contiguous");
        }
        if (!(s.vmax > 0.0 && s.accel > 0.0 && s.decel > 0.0 && s.length > 0.0) || s.min_gap < 0.0)
            throw DataError("vehicle '" + s.id + "': kinematic parameters must be positive");
    }

    std::size_t lane_slot(std::size_t edge, int lane) const { return lane_offset_[edge] + static_cast<std::size_t>(lane); }

    double cap(std::size_t v) const {
        const auto& s = specs_[v];
        if (vehicles_[v].speeding) return std::max(s.vmax, class_defaults(s.cls).vmax);
        return std::min(s.vmax, graph_->edge(edge_of(v)).vmax_mps);
    }

    // True when `f` is a scripted rear follower allowed to close on halted `l`.
    bool ignores(std::size_t f, std::size_t l) const {
        for (const auto& es : events_)
            if (es.phase == Phase::armed && es.ev.type == EventType::rear && es.follower == f && es.leader == l &&
                es.leader_halted)
                return true;
        return false;
    }

    void fail(EventState& es, const std::string& why) {
        es.phase = Phase::unrealized;
        auto& l = vehicles_[es.leader];
        if (l.status == VehicleStatus::active) {
            l.stop.reset();
            l.halted = false;
        }
        vehicles_[es.follower].speeding = false;
        failures_.push_back({es.ev.id, why});
    }

    void update_events() {
        for (auto& es : events_) {
            auto& l = vehicles_[es.leader];
            auto& f = vehicles_[es.follower];
            switch (es.phase) {
                case Phase::pending: {
                    if (time_ + 1e-9 < es.ev.trigger_s) break;
                    const bool gone = l.status == VehicleStatus::arrived || l.status == VehicleStatus::cleared;
                    const bool passed = l.status == VehicleStatus::active &&
                                        (l.route_pos > es.leader_route_pos ||
                                         (l.route_pos == es.leader_route_pos && l.pos > es.stop_offset + 1e-6));
                    if (gone || passed) {
                        fail(es, "leader already past the stop location at trigger");
                        break;
                    }
                    es.phase = Phase::armed;
                    l.stop = std::make_pair(es.leader_route_pos, es.stop_offset);
                    f.speeding = true;
                    break;
                }
                case Phase::armed: {
                    const bool f_gone = f.status == VehicleStatus::arrived || f.status == VehicleStatus::cleared;
                    const bool f_passed = f.status == VehicleStatus::active && f.route_pos > es.follower_route_pos;
                    if (f_gone || f_passed) fail(es, "follower passed the stop location");
                    else if (l.status != VehicleStatus::active && l.status != VehicleStatus::pending)
                        fail(es, "leader left the network");
                    break;
                }
                case Phase::collided:
                    if (time_ + 1e-9 >= es.t_collision + es.ev.dwell_s) {
                        f.halted = false;
                        f.speeding = false;
                        es.phase = Phase::released;
                    }
                    break;
                case Phase::released:
                    if (time_ + 1e-9 >= es.t_collision + es.ev.dwell_s + es.ev.clearance_s) {
                        if (l.status == VehicleStatus::active) l.status = VehicleStatus::cleared;
                        es.phase = Phase::done;
                    }
                    break;
                default: break;
            }
        }
    }

    // Per-lane occupancy, sorted front to back.
    std::vector<std::vector<std::size_t>> build_lanes() const {
        std::vector<std::vector<std::size_t>> lanes(lane_count_);
        for (std::size_t v = 0; v < vehicles_.size(); ++v)
            if (vehicles_[v].status == VehicleStatus::active) lanes[lane_slot(edge_of(v), vehicles_[v].lane)].push_back(v);
        for (auto& l : lanes)
            std::sort(l.begin(), l.end(), [&](std::size_t a, std::size_t b) {
                if (vehicles_[a].pos != vehicles_[b].pos) return vehicles_[a].pos > vehicles_[b].pos;
                return a < b;
            });
        return lanes;
    }

    int reserve_next_lane(std::size_t v) {
        auto& veh = vehicles_[v];
        if (veh.next_lane >= 0) return veh.next_lane;
        const std::size_t next = specs_[v].route[veh.route_pos + 1];
        for (const auto& es : events_) {
            if (es.phase == Phase::armed && es.ev.type == EventType::rear && es.follower == v &&
                vehicles_[es.leader].status == VehicleStatus::active && edge_of(es.leader) == next) {
                veh.next_lane = vehicles_[es.leader].lane;
                return veh.next_lane;
            }
        }
        const int lanes = graph_->edge(next).lanes;
        veh.next_lane = static_cast<int>(rr_counter_[next]++ % static_cast<std::size_t>(lanes));
        return veh.next_lane;
    }

    void move_vehicles(double dt) {
        const auto lanes = build_lanes();
        std::vector<double> v_next(vehicles_.size(), 0.0);
        std::vector<double> disp(vehicles_.size(), 0.0);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (std::size_t v = 0; v < vehicles_.size(); ++v) {
            auto& veh = vehicles_[v];
            if (veh.status != VehicleStatus::active || veh.halted) continue;
            const auto& spec = specs_[v];
            const std::size_t e = edge_of(v);
            const double len = graph_->edge(e).length_m;
            double vn = std::min(cap(v), veh.speed + spec.accel * dt);
            double hard_limit = std::numeric_limits<double>::infinity();

            auto obstacle = [&](std::size_t other, double raw_gap) {
                if (ignores(v, other)) return;
                const auto& os = specs_[other];
                const double ov = vehicles_[other].speed;
                const double space = raw_gap - spec.min_gap + ov * ov / (2.0 * os.decel);
                vn = std::min(vn, safe_speed(veh.speed, space, spec.decel, dt));
                hard_limit = std::min(hard_limit, std::max(0.0, raw_gap));
            };

            const auto& lane = lanes[lane_slot(e, veh.lane)];
            auto me = std::find(lane.begin(), lane.end(), v);
            if (me != lane.begin()) {
                const std::size_t ahead = *(me - 1);
                obstacle(ahead, vehicles_[ahead].pos - specs_[ahead].length - veh.pos);
            } else if (veh.route_pos + 1 < spec.route.size()) {
                const std::size_t next = spec.route[veh.route_pos + 1];
                const auto& nl = lanes[lane_slot(next, reserve_next_lane(v))];
                if (!nl.empty()) {
                    const std::size_t last = nl.back();
                    obstacle(last, (len - veh.pos) + vehicles_[last].pos - specs_[last].length);
                }
            }
            if (veh.stop && veh.stop->first >= veh.route_pos) {
                double dist = veh.stop->second - veh.pos;
                for (std::size_t i = veh.route_pos; i < veh.stop->first; ++i) dist += graph_->edge(spec.route[i]).length_m;
                vn = std::min(vn, safe_speed(veh.speed, dist, spec.decel, dt));
                hard_limit = std::min(hard_limit, std::max(0.0, dist));
            }
            vn = std::max(0.0, vn);
            if (cfg_.dawdle > 0.0 && vn > 0.0) vn = std::max(0.0, vn - cfg_.dawdle * spec.accel * dt * unit(rng_));
            double d = 0.5 * (veh.speed + vn) * dt;
            if (d > hard_limit) {
                d = hard_limit;
                vn = 0.0;
            }
            v_next[v] = vn;
            disp[v] = d;
        }
        for (std::size_t v = 0; v < vehicles_.size(); ++v) {
            auto& veh = vehicles_[v];
            if (veh.status != VehicleStatus::active) continue;
            if (veh.halted) {
                veh.accel = -veh.speed / dt;
                veh.speed = 0.0;
                continue;
            }
            veh.pos += disp[v];
            veh.accel = (v_next[v] - veh.speed) / dt;
            veh.speed = v_next[v];
        }
    }

    void halt_at_stops(double dt) {
        for (auto& es : events_) {
            if (es.phase != Phase::armed || es.leader_halted) continue;
            auto& l = vehicles_[es.leader];
            if (l.status != VehicleStatus::active || l.route_pos != es.leader_route_pos) continue;
            if (l.pos >= es.stop_offset - 0.5 && l.speed <= specs_[es.leader].decel * dt) {
                l.pos = es.stop_offset;
                l.accel -= l.speed / dt;
                l.speed = 0.0;
                l.halted = true;
                es.leader_halted = true;
            }
        }
    }

    void record_collision(EventState& es, std::size_t edge, network::Point p) {
        es.phase = Phase::collided;
        es.t_collision = time_ + cfg_.dt;
        auto& f = vehicles_[es.follower];
        f.halted = true;
        collisions_.push_back({es.ev.id, es.ev.type, es.ev.leader, es.ev.follower, p.x, p.y, es.t_collision, edge});
    }

    void intersection_contacts(double dt) {
        for (auto& es : events_) {
            if (es.phase != Phase::armed || es.ev.type != EventType::inter || !es.leader_halted) continue;
            auto& f = vehicles_[es.follower];
            if (f.status != VehicleStatus::active || f.route_pos != es.follower_route_pos) continue;
            const std::size_t fe = edge_of(es.follower);
            const double len = graph_->edge(fe).length_m;
            if (f.pos < len) continue;
            f.pos = len;
            f.accel -= f.speed / dt;
            f.speed = 0.0;
            const std::size_t le = specs_[es.leader].route[es.leader_route_pos];
            record_collision(es, le, graph_->position_on_edge(le, graph_->edge(le).length_m));
        }
    }

    void transfer_edges(double dt) {
        // Rear of the last vehicle in each lane, updated as vehicles enter.
        const auto lanes = build_lanes();
        std::vector<std::optional<std::size_t>> last(lane_count_);
        for (std::size_t s = 0; s < lanes.size(); ++s)
            if (!lanes[s].empty()) last[s] = lanes[s].back();
        for (std::size_t v = 0; v < vehicles_.size(); ++v) {
            auto& veh = vehicles_[v];
            if (veh.status != VehicleStatus::active || veh.halted) continue;
            const auto& spec = specs_[v];
            const std::size_t e = edge_of(v);
            const double len = graph_->edge(e).length_m;
            if (veh.pos < len) continue;
            if (veh.stop && veh.stop->first == veh.route_pos && veh.stop->second >= len) continue;
            if (veh.route_pos + 1 == spec.route.size()) {
                veh.status = VehicleStatus::arrived;
                continue;
            }
            const std::size_t next = spec.route[veh.route_pos + 1];
            const int lane = reserve_next_lane(v);
            const std::size_t slot = lane_slot(next, lane);
            const double overshoot = veh.pos - len;
            if (last[slot] && *last[slot] != v) {
                const std::size_t l = *last[slot];
                const double room = vehicles_[l].pos - specs_[l].length;
                if (overshoot > room && !ignores(v, l)) {
                    // Conflict at the node: wait at the stop line.
                    veh.pos = len;
                    veh.accel -= veh.speed / dt;
                    veh.speed = 0.0;
                    continue;
                }
            }
            ++veh.route_pos;
            veh.pos = overshoot;
            veh.lane = lane;
            veh.next_lane = -1;
            veh.entry_t = time_ + dt;
            last[slot] = v;
            if (veh.stop && veh.stop->first < veh.route_pos) veh.stop.reset();
        }
    }

    void rear_contacts(double dt) {
        for (auto& es : events_) {
            if (es.phase != Phase::armed || es.ev.type != EventType::rear || !es.leader_halted) continue;
            auto& f = vehicles_[es.follower];
            const auto& l = vehicles_[es.leader];
            if (f.status != VehicleStatus::active || l.status != VehicleStatus::active) continue;
            const std::size_t e = edge_of(es.leader);
            if (edge_of(es.follower) != e || f.lane != l.lane) continue;
            const double rear = l.pos - specs_[es.leader].length;
            if (f.pos < rear) continue;
            f.pos = rear;
            f.accel -= f.speed / dt;
            f.speed = 0.0;
            record_collision(es, e, graph_->position_on_edge(e, es.stop_offset));
        }
    }

    void insert_departures() {
        const auto lanes = build_lanes();
        std::vector<std::size_t> waiting;
        for (std::size_t v : pending_) {
            const auto& spec = specs_[v];
            if (spec.depart_s > time_ + 1e-9) {
                waiting.push_back(v);
                continue;
            }
            const std::size_t e = spec.route.front();
            const auto n = static_cast<std::size_t>(graph_->edge(e).lanes);
            std::optional<int> chosen;
            for (std::size_t k = 0; k < n && !chosen; ++k) {
                const int lane = static_cast<int>((rr_counter_[e] + k) % n);
                const auto& occ = lanes[lane_slot(e, lane)];
                bool free = true;
                for (std::size_t o : occ)
                    if (vehicles_[o].pos - specs_[o].length < spec.min_gap) free = false;
                // Vehicles inserted earlier in this same pass.
                for (std::size_t o : inserted_now_)
                    if (edge_of(o) == e && vehicles_[o].lane == lane) free = false;
                if (free) chosen = lane;
            }
            if (!chosen) {
                waiting.push_back(v);
                continue;
            }
            rr_counter_[e] = static_cast<std::size_t>(*chosen) + 1;
            auto& veh = vehicles_[v];
            veh.status = VehicleStatus::active;
            veh.route_pos = 0;
            veh.pos = 0.0;
            veh.lane = *chosen;
            veh.speed = std::min(spec.depart_speed, std::min(spec.vmax, graph_->edge(e).vmax_mps));
            veh.accel = 0.0;
            veh.entry_t = time_;
            ++departed_;
            inserted_now_.push_back(v);
        }
        inserted_now_.clear();
        pending_ = std::move(waiting);
    }

    void log_active() {
        for (std::size_t v = 0; v < vehicles_.size(); ++v) {
            const auto& veh = vehicles_[v];
            if (veh.status != VehicleStatus::active) continue;
            const auto& coeffs = cfg_.ce.for_class(specs_[v].cls);
            const double mass = features::quantize_mass(features::ce(veh.speed, veh.accel, coeffs) * cfg_.dt);
            logs_.push_back({static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(edge_of(v)), time_, veh.speed,
                             veh.accel, time_ - veh.entry_t, mass});
        }
    }

    std::shared_ptr<const network::RoadGraph> graph_;
    std::vector<VehicleSpec> specs_;
    SimConfig cfg_;
    std::mt19937_64 rng_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<Vehicle> vehicles_;
    std::vector<EventState> events_;
    std::vector<std::size_t> pending_;
    std::vector<std::size_t> inserted_now_;
    std::vector<std::size_t> lane_offset_;
    std::size_t lane_count_ = 0;
    std::vector<std::size_t> rr_counter_;
    std::size_t departed_ = 0;
    double time_ = 0.0;
    std::vector<StepLog> logs_;
    std::vector<CollisionRecord> collisions_;
    std::vector<EventFailure> failures_;
};

/// Value-semantics step: returns the successor of `state` after `dt` seconds.
inline SimState step(SimState state, double dt) {
    state.step(dt);
    return state;
}

/// Copy of `state` with `ev` scheduled.
inline SimState inject_event(SimState state, const ScriptedEvent& ev) {
    state.inject_event(ev);
    return state;
}

/// Full mixed-traffic run with every event injected.
inline RunResult run_scenario(std::shared_ptr<const network::RoadGraph> graph, const std::vector<VehicleSpec>& specs,
                              const std::vector<ScriptedEvent>& events, SimConfig cfg) {
    SimState state(std::move(graph), specs, cfg);
    std::vector<std::string> errors;
    for (const auto& ev : events) {
        try {
            state.inject_event(ev);
        } catch (const DataError& ex) {
            errors.emplace_back(ex.what());
        }
    }
    if (!errors.empty()) {
        std::string msg = std::to_string(errors.size()) + " invalid event(s):";
        for (const auto& e : errors) msg += "\n  " + e;
        throw DataError(msg);
    }
    state.run();
    return state.result();
}

/// Free-flow reference: every vehicle simulated alone on an empty network.
/// Logs keep the original spec indices.
inline RunResult run_baseline(std::shared_ptr<const network::RoadGraph> graph, const std::vector<VehicleSpec>& specs,
                              SimConfig cfg) {
    RunResult out;
    out.dt = cfg.dt;
    out.end_time = cfg.horizon_s;
    out.outcomes.assign(specs.size(), VehicleStatus::pending);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        SimState solo(graph, {specs[i]}, cfg);
        solo.fast_forward(std::floor(specs[i].depart_s / cfg.dt) * cfg.dt);
        while (!solo.finished()) {
            solo.step();
            const auto st = solo.vehicles().front().status;
            if (st == VehicleStatus::arrived) break;
        }
        for (StepLog l : solo.logs()) {
            l.vehicle = static_cast<std::uint32_t>(i);
            out.logs.push_back(l);
        }
        out.outcomes[i] = solo.vehicles().front().status;
        const auto c = solo.counts();
        out.counts.departed += c.departed;
        out.counts.arrived += c.arrived;
        out.counts.en_route += c.en_route;
        out.counts.pending += c.pending;
    }
    return out;
}

struct FleetParams {
    std::size_t pv = 330;
    std::size_t bus = 250;
    std::size_t av = 80;
    double depart_window_s = 2880.0;
};

/// Seeded fleet: classes shuffled, departures uniform over the window, routes
/// are fastest paths between distinct boundary nodes.
inline std::vector<VehicleSpec> generate_fleet(const network::RoadGraph& g, const FleetParams& p, std::uint64_t seed) {
    std::vector<std::size_t> terminals;
    for (std::size_t n = 0; n < g.num_nodes(); ++n)
        if (g.node(n).kind != network::NodeKind::intersection) terminals.push_back(n);
    if (terminals.size() < 2) throw ConfigError("fleet: network needs at least two entry/exit nodes");
    std::vector<VehicleClass> classes;
    classes.insert(classes.end(), p.pv, VehicleClass::PV);
    classes.insert(classes.end(), p.bus, VehicleClass::bus);
    classes.insert(classes.end(), p.av, VehicleClass::AV);
    std::mt19937_64 rng(seed);
    std::shuffle(classes.begin(), classes.end(), rng);
    std::vector<double> departs(classes.size());
    std::uniform_real_distribution<double> when(0.0, p.depart_window_s);
    for (auto& d : departs) d = when(rng);
    std::sort(departs.begin(), departs.end());
    std::uniform_int_distribution<std::size_t> pick(0, terminals.size() - 1);
    std::vector<VehicleSpec> fleet;
    fleet.reserve(classes.size());
    for (std::size_t i = 0; i < classes.size(); ++i) {
        std::optional<std::vector<std::size_t>> route;
        while (!route) {
            const std::size_t a = terminals[pick(rng)];
            const std::size_t b = terminals[pick(rng)];
            if (a != b) route = g.shortest_path(a, b);
        }
        char id[32];
        std::snprintf(id, sizeof id, "veh%04zu", i);
        fleet.push_back(VehicleSpec::make(id, classes[i], std::move(*route), departs[i]));
    }
    return fleet;
}

}  // namespace incflow::sim
