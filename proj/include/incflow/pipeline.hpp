#pragma once

// Experiment orchestration: one config drives simulate -> featurize -> train
// -> evaluate, with every output tied to the config that produced it.

#include <cmath>
#include <filesystem>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "incflow/errors.hpp"
#include "incflow/evaluation.hpp"
#include "incflow/features.hpp"
#include "incflow/io.hpp"
#include "incflow/model.hpp"
#include "incflow/network.hpp"
#include "incflow/scenario.hpp"
#include "incflow/simulator.hpp"
#include "incflow/training.hpp"

namespace incflow::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kRunFormat = "incflow-run/1";
inline constexpr const char* kCheckpointFormat = "incflow-checkpoint/1";

// ---------------------------------------------------------------- config

struct SplitFractions {
    double train = 0.6;
    double calib = 0.2;
    double test = 0.2;
};

struct BinRange {
    std::size_t lo = 0;
    std::size_t hi = 0;
    std::size_t size() const { return hi - lo; }
};

struct Splits {
    BinRange train, calib, test;
    const BinRange& by_name(const std::string& s) const {
        if (s == "train") return train;
        if (s == "calib") return calib;
        if (s == "test") return test;
        throw ConfigError("unknown split '" + s + "' (expected train, calib or test)");
    }
};

/// Chronological split of T bins. Boundaries round down.
inline Splits split_bins(std::size_t T, const SplitFractions& f) {
    Splits s;
    const auto a = static_cast<std::size_t>(std::floor(f.train * static_cast<double>(T) + 1e-9));
    const auto b = static_cast<std::size_t>(std::floor((f.train + f.calib) * static_cast<double>(T) + 1e-9));
    s.train = {0, a};
    s.calib = {a, std::min(b, T)};
    s.test = {std::min(b, T), T};
    return s;
}

struct ModelHyper {
    nn::ModelConfig model;
    double beta = 0.05;
    double spike_weight = 5.0;
    double alpha = 0.9;
    nn::SgdConfig sgd;
    std::size_t window_stride = 1;
    std::size_t min_cell_count = 5;
};

struct LocalizerHyper {
    std::size_t hidden = 16;
    nn::SgdConfig sgd;
    double level = 0.9;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out_dir;
    json network_doc;   // resolved network document
    json scenario_doc;  // resolved scenario document
    network::GridParams grid;
    features::AggregateParams feat;
    features::CETable ce;
    sim::SimConfig sim;
    ModelHyper hyper;
    LocalizerHyper loc;
    SplitFractions split;
    double truth_radius_m = 50.0;
    double truth_radius_s = 15.0;
    json canonical;  // the parsed config with referenced files inlined
};

namespace detail {

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

template <class T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
}

inline json read_config_file(const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw ConfigError(std::string(what) + " file not found: " + p.string());
    try {
        return json::parse(io::read_file(p));
    } catch (const json::parse_error& ex) {
        throw ConfigError(p.string() + ": invalid JSON: " + ex.what());
    }
}

}  // namespace detail

/// Parses and validates a config document. Relative paths resolve against
/// `base_dir`.
inline ExperimentConfig parse_config(const json& doc, const fs::path& base_dir = ".") {
    using detail::get_or;
    ExperimentConfig c;
    detail::check_keys(doc, {"seed", "out", "network", "scenario", "features", "model", "localizer", "split", "eval"},
                       "config");
    if (!doc.contains("seed")) throw ConfigError("config: 'seed' is required");
    c.seed = get_or<std::uint64_t>(doc, "seed", 0, "config");
    c.out_dir = get_or<std::string>(doc, "out", "", "config");
    json canonical = doc;

    const json net = doc.value("network", json{{"grid", json::object()}});
    detail::check_keys(net, {"grid", "path"}, "network");
    if (net.contains("path")) {
        c.network_doc = detail::read_config_file(detail::resolve(base_dir, net.at("path").get<std::string>()), "network");
        try {
            network::graph_from_json(c.network_doc);
        } catch (const DataError& ex) {
            throw ConfigError(ex.what());
        }
    } else {
        const json g = net.value("grid", json::object());
        detail::check_keys(g, {"rows", "cols", "block_m", "vmax_mps", "lanes"}, "network.grid");
        c.grid.rows = get_or(g, "rows", c.grid.rows, "network.grid");
        c.grid.cols = get_or(g, "cols", c.grid.cols, "network.grid");
        c.grid.block_m = get_or(g, "block_m", c.grid.block_m, "network.grid");
        c.grid.vmax_mps = get_or(g, "vmax_mps", c.grid.vmax_mps, "network.grid");
        c.grid.lanes = get_or(g, "lanes", c.grid.lanes, "network.grid");
        c.network_doc = network::to_json(network::gen_grid(c.grid));
    }
    canonical["network"] = json{{"resolved", c.network_doc}};

    json sc = doc.value("scenario", json::object());
    if (sc.contains("path")) {
        json file = detail::read_config_file(detail::resolve(base_dir, sc.at("path").get<std::string>()), "scenario");
        sc.erase("path");
        file.merge_patch(sc);
        sc = file;
    }
    detail::check_keys(sc, {"vehicles", "events", "plan", "sim"}, "scenario");
    const json simj = sc.value("sim", json::object());
    detail::check_keys(simj, {"dt", "horizon_s", "dawdle"}, "scenario.sim");
    c.sim.dt = get_or(simj, "dt", c.sim.dt, "scenario.sim");
    c.sim.horizon_s = get_or(simj, "horizon_s", c.sim.horizon_s, "scenario.sim");
    c.sim.dawdle = get_or(simj, "dawdle", c.sim.dawdle, "scenario.sim");
    c.sim.seed = nn::sub_seed(c.seed, "sim");
    if (!(c.sim.dt > 0.0) || !(c.sim.horizon_s > 0.0)) throw ConfigError("scenario.sim: dt and horizon_s must be positive");
    if (sc.contains("plan")) {
        detail::check_keys(sc.at("plan"),
                           {"rear", "inter", "dwell_s", "clearance_s", "warmup_s", "spacing_s", "headway_s"}, "scenario.plan");
    }
    if (sc.contains("vehicles") && sc.at("vehicles").is_object())
        detail::check_keys(sc.at("vehicles"), {"PV", "bus", "AV", "depart_window_s"}, "scenario.vehicles");
    c.scenario_doc = sc;
    canonical["scenario"] = sc;

    const json fj = doc.value("features", json::object());
    detail::check_keys(fj, {"bin_s", "spike_level", "ce"}, "features");
    c.feat.bin_s = get_or(fj, "bin_s", c.feat.bin_s, "features");
    c.feat.spike_level = get_or(fj, "spike_level", c.feat.spike_level, "features");
    c.feat.horizon_s = c.sim.horizon_s;
    if (fj.contains("ce")) {
        try {
            c.ce = fj.at("ce").get<features::CETable>();
        } catch (const json::exception& ex) {
            throw ConfigError(std::string("features.ce: ") + ex.what());
        }
    }
    c.sim.ce = c.ce;
    if (!(c.feat.spike_level > 0.0 && c.feat.spike_level <= 1.0)) throw ConfigError("features.spike_level must be in (0, 1]");

    const json mj = doc.value("model", json::object());
    detail::check_keys(mj,
                       {"lookback", "horizons", "k", "d_lstm", "d_dcgru", "d_fuse", "pooling", "beta", "spike_weight", "alpha",
                        "lr", "epochs", "batch", "clip_norm", "window_stride", "min_cell_count"},
                       "model");
    auto& h = c.hyper;
    h.model.lookback = get_or(mj, "lookback", h.model.lookback, "model");
    h.model.horizons = get_or(mj, "horizons", h.model.horizons, "model");
    h.model.k = get_or(mj, "k", h.model.k, "model");
    h.model.d_lstm = get_or(mj, "d_lstm", h.model.d_lstm, "model");
    h.model.d_dcgru = get_or(mj, "d_dcgru", h.model.d_dcgru, "model");
    h.model.d_fuse = get_or(mj, "d_fuse", h.model.d_fuse, "model");
    h.model.pooling = nn::pooling_from(get_or<std::string>(mj, "pooling", "mean", "model"));
    h.beta = get_or(mj, "beta", h.beta, "model");
    h.spike_weight = get_or(mj, "spike_weight", h.spike_weight, "model");
    h.alpha = get_or(mj, "alpha", h.alpha, "model");
    h.sgd.lr = get_or(mj, "lr", h.sgd.lr, "model");
    h.sgd.epochs = get_or(mj, "epochs", h.sgd.epochs, "model");
    h.sgd.batch = get_or(mj, "batch", h.sgd.batch, "model");
    h.sgd.clip_norm = get_or(mj, "clip_norm", h.sgd.clip_norm, "model");
    h.sgd.seed = nn::sub_seed(c.seed, "forecaster");
    h.window_stride = get_or(mj, "window_stride", h.window_stride, "model");
    h.min_cell_count = get_or(mj, "min_cell_count", h.min_cell_count, "model");
    if (h.model.lookback == 0 || h.model.horizons == 0 || h.model.k < 1) throw ConfigError("model: lookback, horizons, k >= 1");
    if (!(h.beta > 0.0)) throw ConfigError("model.beta must be positive");
    if (h.spike_weight < h.beta) throw ConfigError("model.spike_weight must be >= beta");
    if (!(h.alpha > 0.0 && h.alpha <= 1.0)) throw ConfigError("model.alpha must be in (0, 1]");
    if (!(h.sgd.lr > 0.0) || h.sgd.batch == 0 || h.window_stride == 0) throw ConfigError("model: lr, batch, window_stride > 0");

    const json lj = doc.value("localizer", json::object());
    detail::check_keys(lj, {"hidden", "epochs", "lr", "level", "batch"}, "localizer");
    c.loc.hidden = get_or(lj, "hidden", c.loc.hidden, "localizer");
    c.loc.sgd.epochs = get_or(lj, "epochs", std::size_t{60}, "localizer");
    c.loc.sgd.lr = get_or(lj, "lr", c.loc.sgd.lr, "localizer");
    c.loc.sgd.batch = get_or(lj, "batch", c.loc.sgd.batch, "localizer");
    c.loc.sgd.seed = nn::sub_seed(c.seed, "localizer");
    c.loc.level = get_or(lj, "level", c.loc.level, "localizer");
    if (!(c.loc.level > 0.0 && c.loc.level <= 1.0)) throw ConfigError("localizer.level must be in (0, 1]");

    const json sj = doc.value("split", json::object());
    detail::check_keys(sj, {"train", "calib", "test"}, "split");
    c.split.train = get_or(sj, "train", c.split.train, "split");
    c.split.calib = get_or(sj, "calib", c.split.calib, "split");
    c.split.test = get_or(sj, "test", c.split.test, "split");
    if (c.split.train <= 0.0 || c.split.calib < 0.0 || c.split.test < 0.0 ||
        std::abs(c.split.train + c.split.calib + c.split.test - 1.0) > 1e-9)
        throw ConfigError("split fractions must be non-negative and sum to 1");

    const json ej = doc.value("eval", json::object());
    detail::check_keys(ej, {"truth_radius_m", "truth_radius_s"}, "eval");
    c.truth_radius_m = get_or(ej, "truth_radius_m", c.truth_radius_m, "eval");
    c.truth_radius_s = get_or(ej, "truth_radius_s", c.feat.bin_s / 2.0, "eval");
    canonical.erase("out");
    c.canonical = canonical;
    return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
    const json doc = detail::read_config_file(path, "config");
    return parse_config(doc, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

/// Hash of everything that shapes the data: network, scenario, features,
/// split and seed. Model settings are excluded so one tensor serves many
/// training configs.
inline std::string data_hash(const ExperimentConfig& c) {
    json d{{"seed", c.seed},
           {"network", c.network_doc},
           {"scenario", c.scenario_doc},
           {"features", c.canonical.value("features", json::object())},
           {"split", c.canonical.value("split", json::object())}};
    return io::content_hash(d.dump());
}

inline std::string config_hash(const ExperimentConfig& c) { return io::content_hash(c.canonical.dump()); }

/// Progress lines on stderr unless quiet.
struct Reporter {
    bool quiet = false;
    void operator()(const std::string& msg) const {
        if (!quiet) std::cerr << "[incflow] " << msg << '\n';
    }
};

// -------------------------------------------------------------- gen-grid

inline void gen_grid(const network::GridParams& p, const fs::path& out_file) {
    io::write_file(out_file, network::serialize(network::gen_grid(p)) + "\n");
}

// -------------------------------------------------------------- simulate

struct SimulationOutput {
    std::shared_ptr<const network::RoadGraph> graph;
    std::vector<sim::VehicleSpec> specs;
    std::vector<sim::ScriptedEvent> events;
    std::vector<std::string> skipped;
    sim::RunResult collision, control, baseline;
};

namespace detail {

inline std::vector<sim::VehicleSpec> build_fleet(const ExperimentConfig& c, const network::RoadGraph& g) {
    const json v = c.scenario_doc.value("vehicles", json{{"PV", 30}, {"bus", 23}, {"AV", 7}});
    if (v.is_array()) return io::specs_from_json(v, g);
    sim::FleetParams fp;
    fp.pv = get_or<std::size_t>(v, "PV", 0, "scenario.vehicles");
    fp.bus = get_or<std::size_t>(v, "bus", 0, "scenario.vehicles");
    fp.av = get_or<std::size_t>(v, "AV", 0, "scenario.vehicles");
    fp.depart_window_s = get_or(v, "depart_window_s", std::min(fp.depart_window_s, 0.8 * c.sim.horizon_s), "scenario.vehicles");
    return sim::generate_fleet(g, fp, nn::sub_seed(c.seed, "routes"));
}

inline sim::EventPlanRequest plan_request(const json& p) {
    sim::EventPlanRequest r;
    r.rear = get_or(p, "rear", r.rear, "scenario.plan");
    r.inter = get_or(p, "inter", r.inter, "scenario.plan");
    r.dwell_s = get_or(p, "dwell_s", r.dwell_s, "scenario.plan");
    r.clearance_s = get_or(p, "clearance_s", r.clearance_s, "scenario.plan");
    r.warmup_s = get_or(p, "warmup_s", r.warmup_s, "scenario.plan");
    r.spacing_s = get_or(p, "spacing_s", r.spacing_s, "scenario.plan");
    r.headway_s = get_or(p, "headway_s", r.headway_s, "scenario.plan");
    return r;
}

inline json outcomes_json(const sim::RunResult& r) {
    json out = json::array();
    for (auto o : r.outcomes) out.push_back(sim::to_string(o));
    return out;
}

inline sim::VehicleStatus status_from(const std::string& s) {
    for (auto v : {sim::VehicleStatus::pending, sim::VehicleStatus::active, sim::VehicleStatus::arrived, sim::VehicleStatus::cleared})
        if (s == sim::to_string(v)) return v;
    throw DataError("unknown vehicle status '" + s + "'");
}

inline json counts_json(const sim::VehicleCounts& k) {
    return {{"departed", k.departed}, {"arrived", k.arrived}, {"cleared", k.cleared}, {"en_route", k.en_route}, {"pending", k.pending}};
}

}  // namespace detail

/// Collision run, event-free control and free-flow baselines. The three
/// variants run concurrently; each is single-threaded inside.
inline SimulationOutput run_simulation(const ExperimentConfig& c, const Reporter& say = {}) {
    SimulationOutput out;
    out.graph = std::make_shared<const network::RoadGraph>(network::graph_from_json(c.network_doc));
    out.specs = detail::build_fleet(c, *out.graph);
    std::vector<sim::ScriptedEvent> explicit_events;
    if (c.scenario_doc.contains("events")) explicit_events = io::events_from_json(c.scenario_doc.at("events"), *out.graph);
    if (c.scenario_doc.contains("plan")) {
        say("planning scripted events");
        auto planned = sim::plan_events(out.graph, out.specs, detail::plan_request(c.scenario_doc.at("plan")), c.sim);
        out.specs = std::move(planned.specs);
        out.events = std::move(planned.events);
        out.skipped = std::move(planned.skipped);
    }
    out.events.insert(out.events.end(), explicit_events.begin(), explicit_events.end());
    say("simulating " + std::to_string(out.specs.size()) + " vehicles, " + std::to_string(out.events.size()) + " events");
    auto fc = std::async(std::launch::async, [&] { return sim::run_scenario(out.graph, out.specs, out.events, c.sim); });
    auto fk = std::async(std::launch::async, [&] { return sim::run_scenario(out.graph, out.specs, {}, c.sim); });
    out.baseline = sim::run_baseline(out.graph, out.specs, c.sim);
    out.collision = fc.get();
    out.control = fk.get();
    for (const auto* r : {&out.collision, &out.control, &out.baseline})
        if (!r->counts.reconciles()) throw std::logic_error("simulate: vehicle counts do not reconcile");
    return out;
}

inline json simulate(const ExperimentConfig& c, const fs::path& dir, const Reporter& say = {}) {
    const auto s = run_simulation(c, say);
    const auto& g = *s.graph;
    std::map<std::string, std::string> files{
        {"network.json", network::serialize(g) + "\n"},
        {"vehicles.json", io::specs_to_json(s.specs, g).dump(1) + "\n"},
        {"events.json", io::events_to_json(s.events, g).dump(1) + "\n"},
        {"logs_collision.csv", io::logs_csv(s.collision.logs, s.specs, g)},
        {"logs_control.csv", io::logs_csv(s.control.logs, s.specs, g)},
        {"logs_baseline.csv", io::logs_csv(s.baseline.logs, s.specs, g)},
        {"collisions.csv", io::collisions_csv(s.collision.collisions, g)},
    };
    json manifest{{"format", kRunFormat},
                  {"config_hash", config_hash(c)},
                  {"data_hash", data_hash(c)},
                  {"seed", c.seed},
                  {"config", c.canonical},
                  {"dt", c.sim.dt},
                  {"horizon_s", c.sim.horizon_s},
                  {"num_vehicles", s.specs.size()},
                  {"skipped_events", s.skipped}};
    json unrealized = json::array();
    for (const auto& u : s.collision.unrealized) unrealized.push_back({{"event_id", u.event_id}, {"reason", u.reason}});
    manifest["variants"] = {{"collision",
                             {{"counts", detail::counts_json(s.collision.counts)},
                              {"unrealized", unrealized},
                              {"outcomes", detail::outcomes_json(s.collision)}}},
                            {"control", {{"counts", detail::counts_json(s.control.counts)}, {"outcomes", detail::outcomes_json(s.control)}}},
                            {"baseline",
                             {{"counts", detail::counts_json(s.baseline.counts)}, {"outcomes", detail::outcomes_json(s.baseline)}}}};
    manifest["files"] = json::object();
    for (const auto& [name, content] : files) {
        io::write_file(dir / name, content);
        manifest["files"][name] = io::content_hash(content);
    }
    io::write_file(dir / "manifest.json", manifest.dump(1) + "\n");
    say("run written to " + dir.string() + " (" + std::to_string(s.collision.collisions.size()) + " collisions)");
    return manifest;
}

// ------------------------------------------------------------- run reader

struct RunData {
    json manifest;
    ExperimentConfig config;
    std::shared_ptr<const network::RoadGraph> graph;
    std::vector<sim::VehicleSpec> specs;
};

/// Reads a run directory and verifies every recorded file hash.
inline RunData open_run(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json")) throw DataError("no run manifest in " + dir.string());
    RunData r;
    r.manifest = io::read_json(dir / "manifest.json");
    if (r.manifest.value("format", std::string()) != kRunFormat) throw DataError("run manifest: unknown format");
    for (const auto& [name, h] : r.manifest.at("files").items()) {
        if (!fs::exists(dir / name)) throw DataError("run is missing " + name);
        if (io::content_hash(io::read_file(dir / name)) != h.get<std::string>())
            throw DataError(name + " does not match the hash recorded in the manifest");
    }
    json cfg = r.manifest.at("config");
    cfg["network"] = json{{"path", fs::absolute(dir / "network.json").string()}};
    r.config = parse_config(cfg, dir);
    r.graph = std::make_shared<const network::RoadGraph>(network::load_graph(io::read_file(dir / "network.json")));
    r.specs = io::specs_from_json(io::read_json(dir / "vehicles.json"), *r.graph);
    return r;
}

inline sim::RunResult read_variant(const RunData& r, const fs::path& dir, const std::string& name) {
    sim::RunResult out;
    out.dt = r.manifest.at("dt");
    out.end_time = r.manifest.at("horizon_s");
    out.logs = io::parse_logs_csv(io::read_file(dir / ("logs_" + name + ".csv")), r.specs, *r.graph);
    // The logs alone cannot tell an arrival from a vehicle cut off at the horizon.
    const auto& outcomes = r.manifest.at("variants").at(name).at("outcomes");
    if (outcomes.size() != r.specs.size()) throw DataError("run manifest: outcome list does not match the vehicle file");
    for (const auto& o : outcomes) out.outcomes.push_back(detail::status_from(o.get<std::string>()));
    if (name == "collision") out.collisions = io::parse_collisions_csv(io::read_file(dir / "collisions.csv"), *r.graph);
    return out;
}

// -------------------------------------------------------------- featurize

/// Writes tensor.csv (raw values) and tensor.json. The sidecar statistics are
/// fitted on the training split only.
inline features::FeatureTensor featurize(const fs::path& dir, const Reporter& say = {}) {
    if (!fs::exists(dir) || fs::is_empty(dir)) throw DataError("featurize: run directory is empty or missing: " + dir.string());
    const RunData r = open_run(dir);
    const auto scen = read_variant(r, dir, "collision");
    const auto base = read_variant(r, dir, "baseline");
    auto raw = features::aggregate(*r.graph, r.specs.size(), scen, base, scen.collisions, r.config.feat);
    const auto sp = split_bins(raw.num_bins, r.config.split);
    const auto fitted = features::standardize_on(raw, sp.train.lo, sp.train.hi);
    raw.mu = fitted.mu;
    raw.sigma = fitted.sigma;
    json side = io::tensor_sidecar(raw);
    side["data_hash"] = r.manifest.at("data_hash");
    side["config_hash"] = r.manifest.at("config_hash");
    side["fit_bins"] = {sp.train.lo, sp.train.hi};
    io::write_file(dir / "tensor.csv", io::tensor_csv(raw));
    io::write_file(dir / "tensor.json", side.dump(1) + "\n");
    say("tensor " + std::to_string(raw.num_edges) + " edges x " + std::to_string(raw.num_bins) + " bins");
    return raw;
}

struct TensorFile {
    features::FeatureTensor raw;
    json sidecar;
};

inline TensorFile open_tensor(const fs::path& dir) {
    if (!fs::exists(dir / "tensor.json") || !fs::exists(dir / "tensor.csv"))
        throw DataError("no tensor in " + dir.string() + "; run featurize first");
    TensorFile t;
    t.sidecar = io::read_json(dir / "tensor.json");
    t.raw = io::load_tensor(io::read_file(dir / "tensor.csv"), t.sidecar);
    t.raw.standardized = false;
    return t;
}

/// Applies stored statistics to a raw tensor.
inline features::FeatureTensor apply_stats(features::FeatureTensor raw, const std::vector<double>& mu,
                                           const std::vector<double>& sigma) {
    if (mu.size() != raw.num_edges * features::kNumChannels || sigma.size() != mu.size())
        throw DataError("standardization statistics do not fit the tensor");
    for (std::size_t e = 0; e < raw.num_edges; ++e)
        for (std::size_t c = 0; c < features::kNumContinuous; ++c) {
            const std::size_t k = e * features::kNumChannels + c;
            for (std::size_t t = 0; t < raw.num_bins; ++t) {
                double& x = raw.at(e, t, c);
                x = sigma[k] > 0.0 ? (x - mu[k]) / sigma[k] : 0.0;
            }
        }
    raw.mu = mu;
    raw.sigma = sigma;
    raw.standardized = true;
    return raw;
}

// ------------------------------------------------------------- checkpoint

struct Checkpoint {
    json meta;  // everything except the live models
    nn::Forecaster forecaster;
    nn::CalibrationTable calibration;
    std::optional<nn::Localizer> localizer;
    std::vector<double> mu, sigma;
    Splits splits;
};

namespace detail {

inline json params_json(const std::vector<nn::Param*>& ps) {
    json out = json::object();
    for (const auto* p : ps) out[p->name] = io::matrix_json(p->value);
    return out;
}

inline void load_params(const std::vector<nn::Param*>& ps, const json& j) {
    if (j.size() != ps.size()) throw DataError("checkpoint: parameter count mismatch");
    for (auto* p : ps) {
        if (!j.contains(p->name)) throw DataError("checkpoint: missing parameter " + p->name);
        Matrix m = io::matrix_from_json(j.at(p->name));
        if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
            throw DataError("checkpoint: parameter " + p->name + " has the wrong shape");
        p->value = std::move(m);
    }
}

inline json range_json(const BinRange& r) { return {r.lo, r.hi}; }
inline BinRange range_from(const json& j) { return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()}; }

inline json model_json(const nn::ModelConfig& m) {
    return {{"lookback", m.lookback}, {"horizons", m.horizons}, {"k", m.k},
            {"d_lstm", m.d_lstm},     {"d_dcgru", m.d_dcgru},   {"d_fuse", m.d_fuse},
            {"pooling", nn::to_string(m.pooling)}};
}

inline nn::ModelConfig model_from(const json& j) {
    nn::ModelConfig m;
    m.lookback = j.at("lookback");
    m.horizons = j.at("horizons");
    m.k = j.at("k");
    m.d_lstm = j.at("d_lstm");
    m.d_dcgru = j.at("d_dcgru");
    m.d_fuse = j.at("d_fuse");
    m.pooling = nn::pooling_from(j.at("pooling").get<std::string>());
    return m;
}

inline json curve_json(const nn::TrainResult& r) {
    return {{"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}, {"epoch_loss", r.epoch_loss}};
}

}  // namespace detail

inline json checkpoint_json(Checkpoint& ck) {
    json j = ck.meta;
    j["format"] = kCheckpointFormat;
    j["model"] = detail::model_json(ck.forecaster.config());
    j["supports"] = {{"forward", io::matrix_json(ck.forecaster.supports().forward)},
                     {"backward", io::matrix_json(ck.forecaster.supports().backward)}};
    j["standardization"] = {{"mu", ck.mu}, {"sigma", ck.sigma}};
    j["splits"] = {{"train", detail::range_json(ck.splits.train)},
                   {"calib", detail::range_json(ck.splits.calib)},
                   {"test", detail::range_json(ck.splits.test)}};
    j["params"] = detail::params_json(ck.forecaster.params());
    const auto& cal = ck.calibration;
    j["calibration"] = {{"level", cal.level},   {"num_edges", cal.num_edges}, {"horizons", cal.horizons},
                        {"delta", cal.delta},   {"counts", cal.counts},       {"fallback", cal.fallback}};
    if (ck.localizer) {
        auto& l = *ck.localizer;
        j["localizer"] = {{"lookback", l.lookback()},   {"bin_s", l.bin_s()},         {"hidden", ck.meta.at("localizer_hidden")},
                          {"target_mean", l.target_mean()}, {"target_scale", l.target_scale()}, {"padding", l.padding()},
                          {"params", detail::params_json(l.params())}};
    } else {
        j["localizer"] = nullptr;
    }
    return j;
}

inline Checkpoint checkpoint_from_json(const json& j) {
    if (j.value("format", std::string()) != kCheckpointFormat) throw DataError("checkpoint: unknown format tag");
    Checkpoint ck;
    try {
        ck.meta = json::object();
        for (const char* k : {"config_hash", "data_hash", "seed", "edge_ids", "hyper", "training", "localizer_training",
                              "localizer_hidden"})
            if (j.contains(k)) ck.meta[k] = j.at(k);
        network::TransitionPair sp{io::matrix_from_json(j.at("supports").at("forward")),
                                   io::matrix_from_json(j.at("supports").at("backward"))};
        ck.forecaster = nn::Forecaster(detail::model_from(j.at("model")), sp, 0);
        detail::load_params(ck.forecaster.params(), j.at("params"));
        ck.mu = j.at("standardization").at("mu").get<std::vector<double>>();
        ck.sigma = j.at("standardization").at("sigma").get<std::vector<double>>();
        ck.splits = {detail::range_from(j.at("splits").at("train")), detail::range_from(j.at("splits").at("calib")),
                     detail::range_from(j.at("splits").at("test"))};
        const auto& c = j.at("calibration");
        ck.calibration = {c.at("level"), c.at("num_edges"), c.at("horizons"), c.at("delta").get<std::vector<double>>(),
                          c.at("counts").get<std::vector<std::size_t>>(), c.at("fallback").get<std::vector<std::uint8_t>>()};
        if (!j.at("localizer").is_null()) {
            const auto& l = j.at("localizer");
            nn::Localizer loc(sp.forward.rows(), l.at("lookback"), l.at("hidden"), l.at("bin_s"), 0);
            detail::load_params(loc.params(), l.at("params"));
            loc.target_mean() = l.at("target_mean").get<std::array<double, 3>>();
            loc.target_scale() = l.at("target_scale").get<std::array<double, 3>>();
            loc.padding() = l.at("padding").get<std::array<double, 3>>();
            ck.localizer = std::move(loc);
        }
    } catch (const json::exception& ex) {
        throw DataError(std::string("checkpoint: schema violation: ") + ex.what());
    }
    return ck;
}

inline Checkpoint load_checkpoint(const fs::path& p) { return checkpoint_from_json(io::read_json(p)); }

// ------------------------------------------------------------------ train

struct TrainOutput {
    Checkpoint checkpoint;
    nn::TrainResult forecaster_curve;
    std::optional<nn::TrainResult> localizer_curve;
};

/// Trains the forecaster on the training split, calibrates on the
/// calibration split, and does the same for the event localizer when the
/// training split contains collisions.
inline TrainOutput train(const ExperimentConfig& c, const fs::path& run_dir, const Reporter& say = {}) {
    const auto tf = open_tensor(run_dir);
    if (tf.sidecar.value("data_hash", std::string()) != data_hash(c))
        throw DataError("tensor in " + run_dir.string() + " was produced from a different network/scenario/features config");
    const auto graph = network::load_graph(io::read_file(run_dir / "network.json"));
    if (graph.num_edges() != tf.raw.num_edges) throw DataError("tensor does not match the run network");
    const auto& raw = tf.raw;
    const auto sp = split_bins(raw.num_bins, c.split);
    const auto z = features::standardize_on(raw, sp.train.lo, sp.train.hi);
    const auto& h = c.hyper;
    const std::size_t L = h.model.lookback, H = h.model.horizons;

    TrainOutput out;
    auto& ck = out.checkpoint;
    ck.forecaster = nn::Forecaster(h.model, network::transition_matrices(graph.weight_matrix()), nn::sub_seed(c.seed, "init"));
    ck.mu = z.mu;
    ck.sigma = z.sigma;
    ck.splits = sp;
    const auto starts = nn::window_starts(sp.train.lo, sp.train.hi, L, H, h.window_stride);
    if (starts.empty())
        throw DataError("training split has " + std::to_string(sp.train.size()) + " bins; need at least lookback + horizons = " +
                        std::to_string(L + H));
    say("training forecaster on " + std::to_string(starts.size()) + " windows for " + std::to_string(h.sgd.epochs) + " epochs");
    out.forecaster_curve = nn::train_forecaster(ck.forecaster, z, starts, {h.sgd, h.beta, h.spike_weight});
    const auto cal_starts = nn::window_starts(sp.calib.lo, sp.calib.hi, L, H, 1);
    if (cal_starts.empty()) throw DataError("calibration split has no complete window");
    ck.calibration = nn::conformal_calibrate(ck.forecaster, z, cal_starts, h.alpha, h.min_cell_count);

    const auto ev_train = nn::event_samples(z, L, sp.train.lo, sp.train.hi);
    if (!ev_train.empty()) {
        nn::Localizer loc(raw.num_edges, L, c.loc.hidden, raw.bin_s, nn::sub_seed(c.seed, "localizer-init"));
        say("training localizer on " + std::to_string(ev_train.size()) + " event windows");
        out.localizer_curve = nn::train_localizer(loc, z, ev_train, c.loc.sgd);
        auto ev_cal = nn::event_samples(z, L, sp.calib.lo, sp.calib.hi);
        if (ev_cal.empty()) ev_cal = ev_train;
        loc.calibrate(z, ev_cal, c.loc.level);
        ck.localizer = std::move(loc);
    } else {
        say("no collisions in the training split; localizer skipped");
    }

    json hyper{{"beta", h.beta},     {"spike_weight", h.spike_weight}, {"alpha", h.alpha},
               {"lr", h.sgd.lr},     {"epochs", h.sgd.epochs},         {"batch", h.sgd.batch},
               {"clip_norm", h.sgd.clip_norm}, {"window_stride", h.window_stride}};
    ck.meta = {{"config_hash", config_hash(c)},
               {"data_hash", data_hash(c)},
               {"seed", c.seed},
               {"edge_ids", raw.edge_ids},
               {"hyper", hyper},
               {"localizer_hidden", c.loc.hidden},
               {"training", detail::curve_json(out.forecaster_curve)},
               {"localizer_training", out.localizer_curve ? detail::curve_json(*out.localizer_curve) : json(nullptr)}};
    return out;
}

inline std::string curve_csv(const TrainOutput& t) {
    std::string s = "epoch,forecaster_loss,localizer_loss\n";
    const std::size_t n = std::max(t.forecaster_curve.epoch_loss.size(),
                                   t.localizer_curve ? t.localizer_curve->epoch_loss.size() : std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
        s += std::to_string(i + 1) + ',';
        if (i < t.forecaster_curve.epoch_loss.size()) s += io::fmt(t.forecaster_curve.epoch_loss[i]);
        s += ',';
        if (t.localizer_curve && i < t.localizer_curve->epoch_loss.size()) s += io::fmt(t.localizer_curve->epoch_loss[i]);
        s += '\n';
    }
    return s;
}

inline TrainOutput train_to(const ExperimentConfig& c, const fs::path& run_dir, const fs::path& ck_path, const Reporter& say = {}) {
    auto out = train(c, run_dir, say);
    io::write_file(ck_path, checkpoint_json(out.checkpoint).dump() + "\n");
    io::write_file(ck_path.parent_path() / "train_curve.csv", curve_csv(out));
    say("checkpoint written to " + ck_path.string());
    return out;
}

// --------------------------------------------------------------- evaluate

struct Evaluation {
    eval::MetricReport report;
    features::FeatureTensor z;  // standardized with checkpoint statistics
};

inline features::FeatureTensor checkpoint_tensor(const Checkpoint& ck, const TensorFile& tf) {
    if (ck.meta.value("data_hash", std::string()) != tf.sidecar.value("data_hash", std::string()))
        throw DataError("checkpoint and tensor come from different data configs");
    return apply_stats(tf.raw, ck.mu, ck.sigma);
}

inline eval::MetricReport evaluate(Checkpoint& ck, const TensorFile& tf, const std::string& split, double radius_m,
                                   double radius_s) {
    const auto z = checkpoint_tensor(ck, tf);
    const auto& raw = tf.raw;
    const BinRange range = ck.splits.by_name(split);
    auto& m = ck.forecaster;
    const std::size_t L = m.config().lookback, H = m.config().horizons, E = m.num_edges();
    const auto starts = nn::window_starts(range.lo, range.hi, L, H, 1);
    if (starts.empty()) throw DataError("split '" + split + "' has no complete window");
    eval::MetricReport rep;
    rep.split = split;
    std::vector<std::vector<eval::Interval>> iv(nn::kTargets * H);
    std::vector<std::vector<double>> truth(nn::kTargets * H);
    for (std::size_t s : starts) {
        const auto f = nn::forecast(m, ck.calibration, z, s);
        for (std::size_t q = 0; q < nn::kTargets; ++q)
            for (std::size_t e = 0; e < E; ++e)
                for (std::size_t hh = 0; hh < H; ++hh) {
                    const std::size_t i = f.index(q, e, hh);
                    iv[q * H + hh].push_back({f.low[i], f.high[i]});
                    truth[q * H + hh].push_back(raw.at(e, s + L + hh, q == 0 ? features::kTTI : features::kCE));
                }
    }
    for (std::size_t q = 0; q < nn::kTargets; ++q)
        for (std::size_t hh = 0; hh < H; ++hh)
            rep.forecast.push_back(eval::score_forecast(nn::target_name(q), hh + 1, iv[q * H + hh], truth[q * H + hh]));
    if (ck.localizer) {
        const auto samples = nn::event_samples(z, L, range.lo, range.hi);
        if (!samples.empty()) {
            std::array<std::vector<eval::Interval>, 3> liv;
            std::array<std::vector<double>, 3> lt;
            for (const auto& sm : samples) {
                const auto r = ck.localizer->localize(z, sm.start);
                for (std::size_t d = 0; d < 3; ++d) {
                    liv[d].push_back({r.low[d], r.high[d]});
                    lt[d].push_back(sm.truth[d]);
                }
            }
            const char* names[] = {"x", "y", "t"};
            for (std::size_t d = 0; d < 3; ++d)
                rep.localization.push_back(eval::score_localization(names[d], liv[d], lt[d], d == 2 ? radius_s : radius_m));
        }
    }
    eval::check_report(rep);
    return rep;
}

inline eval::MetricReport evaluate_to(const fs::path& ck_path, const fs::path& run_dir, const std::string& split,
                                      const fs::path& out_dir, double radius_m, double radius_s, const Reporter& say = {}) {
    auto ck = load_checkpoint(ck_path);
    const auto tf = open_tensor(run_dir);
    auto rep = evaluate(ck, tf, split, radius_m, radius_s);
    json j = eval::to_json(rep);
    j["config_hash"] = ck.meta.value("config_hash", std::string());
    j["data_hash"] = ck.meta.value("data_hash", std::string());
    io::write_file(out_dir / ("report_" + split + ".json"), j.dump(1) + "\n");
    io::write_file(out_dir / ("report_" + split + ".csv"), eval::to_csv(rep));
    say("report written for split " + split);
    return rep;
}

// -------------------------------------------------- forecast and localize

inline json forecast_json(Checkpoint& ck, const TensorFile& tf, std::size_t start) {
    const auto z = checkpoint_tensor(ck, tf);
    const auto f = nn::forecast(ck.forecaster, ck.calibration, z, start);
    const std::size_t L = ck.forecaster.config().lookback;
    json out{{"window_start_bin", start}, {"first_target_bin", start + L}, {"intervals", json::array()}};
    for (std::size_t q = 0; q < nn::kTargets; ++q)
        for (std::size_t e = 0; e < f.num_edges; ++e)
            for (std::size_t h = 0; h < f.horizons; ++h) {
                const std::size_t i = f.index(q, e, h);
                out["intervals"].push_back({{"target", nn::target_name(q)},
                                            {"edge_id", tf.raw.edge_ids[e]},
                                            {"horizon", h + 1},
                                            {"low", f.low[i]},
                                            {"high", f.high[i]}});
            }
    return out;
}

inline json localize_json(Checkpoint& ck, const TensorFile& tf, std::size_t start) {
    if (!ck.localizer) throw DataError("checkpoint has no localizer (no collisions in its training split)");
    const auto z = checkpoint_tensor(ck, tf);
    const auto r = ck.localizer->localize(z, start);
    return {{"window_start_bin", start},
            {"x", {r.low[0], r.high[0]}},
            {"y", {r.low[1], r.high[1]}},
            {"t", {r.low[2], r.high[2]}}};
}

// ------------------------------------------------------------ export-plots

/// Heat-map series, per-edge CE comparison and, when a checkpoint with a
/// localizer sits in the run directory, one containment histogram per event
/// type. Returns the files written.
inline std::vector<std::string> export_plots(const fs::path& run_dir, const fs::path& out_dir, const Reporter& say = {}) {
    const RunData r = open_run(run_dir);
    const auto tf = open_tensor(run_dir);
    std::vector<std::string> written;
    auto put = [&](const std::string& name, const std::string& content) {
        io::write_file(out_dir / name, content);
        written.push_back(name);
    };
    for (std::size_t c : {features::kTTI, features::kCE}) {
        std::string s = "edge_id,t_bin,t_s," + std::string(features::channel_name(c)) + "\n";
        for (std::size_t e = 0; e < tf.raw.num_edges; ++e)
            for (std::size_t t = 0; t < tf.raw.num_bins; ++t)
                s += tf.raw.edge_ids[e] + ',' + std::to_string(t) + ',' + io::fmt(static_cast<double>(t) * tf.raw.bin_s) + ',' +
                     io::fmt(tf.raw.at(e, t, c)) + '\n';
        put(std::string(features::channel_name(c)) + "_heatmap.csv", s);
    }
    const auto scen = read_variant(r, run_dir, "collision");
    const auto ctrl = read_variant(r, run_dir, "control");
    const auto ce_s = features::edge_emissions(scen, r.graph->num_edges());
    const auto ce_c = features::edge_emissions(ctrl, r.graph->num_edges());
    std::string s = "edge_id,ce_collision,ce_control,ce_delta\n";
    for (std::size_t e = 0; e < ce_s.size(); ++e)
        s += r.graph->edge(e).id + ',' + io::fmt(ce_s[e]) + ',' + io::fmt(ce_c[e]) + ',' + io::fmt(ce_s[e] - ce_c[e]) + '\n';
    put("edge_ce.csv", s);

    if (!fs::exists(run_dir / "checkpoint.json")) {
        say("no checkpoint.json in the run directory; containment histograms skipped");
        return written;
    }
    auto ck = load_checkpoint(run_dir / "checkpoint.json");
    if (!ck.localizer) {
        say("checkpoint has no localizer; containment histograms skipped");
        return written;
    }
    const auto z = checkpoint_tensor(ck, tf);
    const std::size_t L = ck.localizer->lookback();
    std::map<std::string, std::string> spec_class;
    for (const auto& v : r.specs) spec_class[v.id] = to_string(v.cls);
    // Position of the truth inside its interval, in fifths, plus outside bins.
    const char* bins[] = {"below", "0.0-0.2", "0.2-0.4", "0.4-0.6", "0.6-0.8", "0.8-1.0", "above"};
    std::map<std::string, std::map<std::tuple<std::string, std::string, int>, std::size_t>> hist;
    for (const auto& c : z.collisions) {
        const std::size_t b = z.bin_of(c.t);
        const std::size_t start = b + 1 >= L ? std::min(b + 1 - L, z.num_bins - L) : 0;
        if (z.num_bins < L) break;
        const auto iv = ck.localizer->localize(z, start);
        const std::string pair = spec_class[c.follower] + "-" + spec_class[c.leader];
        const std::array<double, 3> truth{c.x, c.y, c.t};
        const char* dims[] = {"x", "y", "t"};
        for (std::size_t d = 0; d < 3; ++d) {
            int k;
            if (truth[d] < iv.low[d]) k = 0;
            else if (truth[d] > iv.high[d]) k = 6;
            else {
                const double w = iv.high[d] - iv.low[d];
                const double u = w > 0.0 ? (truth[d] - iv.low[d]) / w : 0.5;
                k = 1 + std::min(4, static_cast<int>(u * 5.0));
            }
            ++hist[to_string(c.type)][{pair, dims[d], k}];
        }
    }
    for (const auto& [type, h] : hist) {
        std::string csv = "pair,dim,position,count\n";
        for (const auto& [key, n] : h)
            csv += std::get<0>(key) + ',' + std::get<1>(key) + ',' + bins[std::get<2>(key)] + ',' + std::to_string(n) + '\n';
        put("containment_" + type + ".csv", csv);
    }
    return written;
}

}  // namespace incflow::pipeline
