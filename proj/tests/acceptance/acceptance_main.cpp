// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "incflow/pipeline.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

#ifndef INCFLOW_SOURCE_DIR
#define INCFLOW_SOURCE_DIR "."
#endif

using namespace incflow;
namespace fs = std::filesystem;
using pipeline::json;

namespace {

struct Line {
    int id;
    bool pass;
    std::string what;
};

std::vector<Line> results;

void report(int id, bool pass, const std::string& what) {
    results.push_back({id, pass, what});
    std::printf("[%s] %2d %s\n", pass ? "PASS" : "FAIL", id, what.c_str());
    std::fflush(stdout);
}

std::string num(double v, int prec = 4) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const pipeline::Reporter quiet{true};

// simulate -> featurize -> train -> evaluate(calib, test) in one directory.
double full_pipeline(const pipeline::ExperimentConfig& cfg, const fs::path& dir) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::remove_all(dir);
    pipeline::simulate(cfg, dir, quiet);
    pipeline::featurize(dir, quiet);
    pipeline::train_to(cfg, dir, dir / "checkpoint.json", quiet);
    for (const char* s : {"train", "calib", "test"})
        pipeline::evaluate_to(dir / "checkpoint.json", dir, s, dir, cfg.truth_radius_m, cfg.truth_radius_s, quiet);
    return seconds_since(t0);
}

// ----------------------------------------------------------------- 1
void determinism(const pipeline::ExperimentConfig& cfg, const fs::path& a, const fs::path& b) {
    const double ta = full_pipeline(cfg, a);
    const double tb = full_pipeline(cfg, b);
    std::vector<std::string> differ;
    std::size_t compared = 0;
    for (const auto& f : fs::directory_iterator(a)) {
        if (!f.is_regular_file()) continue;
        ++compared;
        const auto name = f.path().filename();
        if (!fs::exists(b / name) || io::read_file(f.path()) != io::read_file(b / name)) differ.push_back(name.string());
    }
    const bool has_all = fs::exists(a / "checkpoint.json") && fs::exists(a / "report_test.json") &&
                         fs::exists(a / "logs_collision.csv");
    const bool pass = differ.empty() && has_all && ta < 300.0 && tb < 300.0;
    std::string what = "determinism: " + std::to_string(compared) + " files byte-identical across two runs";
    if (!differ.empty()) what = "determinism: differing files: " + differ.front() + " (+" + std::to_string(differ.size() - 1) + ")";
    report(1, pass, what + "; toy end-to-end " + num(ta, 3) + " s and " + num(tb, 3) + " s (limit 300 s)");
}

// ----------------------------------------------------------------- 2
void baseline_identity(const fs::path& run) {
    const auto r = pipeline::open_run(run);
    const auto stored = pipeline::read_variant(r, run, "baseline");
    // A second, independent free-flow simulation compared against the stored one.
    const auto fresh = sim::run_baseline(r.graph, r.specs, r.config.sim);
    const auto f = features::aggregate(*r.graph, r.specs.size(), fresh, stored, {}, r.config.feat);
    std::set<std::pair<std::size_t, std::size_t>> traversed;
    for (const auto& l : fresh.logs) traversed.insert({l.edge, f.bin_of(l.t)});
    double worst = 0.0;
    bool ok = !traversed.empty();
    for (const auto& [e, b] : traversed) {
        const double tol = r.config.sim.dt / r.graph->edge(e).free_flow_time();
        const double dev = std::abs(f.at(e, b, features::kTTI) - 1.0);
        worst = std::max(worst, dev / tol);
        ok = ok && dev <= tol;
    }
    report(2, ok,
           "baseline identity: " + std::to_string(traversed.size()) + " traversed edge-bins, max |TTI-1| = " + num(worst, 3) +
               " x dt/TTff");
}

// ----------------------------------------------------------------- 3
void anomaly_signal(json toy) {
    toy["scenario"]["plan"] = {{"rear", 1}, {"inter", 0}, {"dwell_s", 120.0}};
    const auto cfg = pipeline::parse_config(toy, INCFLOW_SOURCE_DIR "/configs");
    const auto s = pipeline::run_simulation(cfg);
    if (s.collision.collisions.size() != 1) {
        report(3, false, "anomaly signal: expected one realized rear-end event, got " +
                             std::to_string(s.collision.collisions.size()));
        return;
    }
    const auto& c = s.collision.collisions.front();
    const auto f = features::aggregate(*s.graph, s.specs.size(), s.collision, s.baseline, s.collision.collisions, cfg.feat);
    double peak = 0.0;
    for (std::size_t t = 0; t < f.num_bins; ++t) peak = std::max(peak, f.at(c.edge, t, features::kTTI));
    double ce_col = 0.0, ce_ctl = 0.0;
    for (const auto& l : s.collision.logs) ce_col += l.ce_step;
    for (const auto& l : s.control.logs) ce_ctl += l.ce_step;
    report(3, peak >= 3.0 && ce_col > ce_ctl,
           "anomaly signal: peak TTI on " + s.graph->edge(c.edge).id + " = " + num(peak) + " (>= 3); total CE " + num(ce_col, 8) +
               " vs event-free " + num(ce_ctl, 8));
}

// ----------------------------------------------------------------- 4
void admissibility() {
    using sim::EventType;
    using sim::VehicleClass;
    // Enumerated by hand: PV follows PV, bus or AV for rear-end; PV-PV at intersections.
    const std::set<std::tuple<int, int, int>> expected{{0, 0, 0}, {0, 1, 0}, {0, 2, 0}, {0, 0, 1}};
    std::size_t accepted = 0, rejected = 0, mismatched = 0;
    for (int f = 0; f < 3; ++f)
        for (int l = 0; l < 3; ++l)
            for (int s = 0; s < 2; ++s) {
                const bool a = sim::admissible(static_cast<VehicleClass>(f), static_cast<VehicleClass>(l), static_cast<EventType>(s));
                (a ? accepted : rejected)++;
                mismatched += a != (expected.count({f, l, s}) == 1);
            }
    report(4, accepted == 4 && rejected == 14 && mismatched == 0,
           "admissibility: " + std::to_string(accepted) + " accepted, " + std::to_string(rejected) + " rejected of 18");
}

// ----------------------------------------------------------------- 5
void gradient_suite() {
    double worst = 0.0;
    std::string worst_name;
    std::size_t cases = 0;
    auto run = [&](const std::vector<gradcheck::Case>& cs, std::uint64_t base) {
        for (std::size_t i = 0; i < cs.size(); ++i) {
            const double e = gradcheck::worst_over(cs[i], 20, base + i);
            ++cases;
            if (e > worst) {
                worst = e;
                worst_name = cs[i].name;
            }
        }
    };
    run(gradcheck::primitive_cases(), 7000);
    run(gradcheck::layer_cases(), 8000);
    report(5, worst < 1e-4,
           "gradient suite: " + std::to_string(cases) + " operations x 20 instances, worst rel err " + num(worst, 3) + " (" +
               worst_name + ")");
}

// ----------------------------------------------------------------- 6
void diffusion_oracle() {
    std::mt19937_64 rng(606);
    double worst_conv = 0.0;
    for (int k = 1; k <= 4; ++k)
        for (std::size_t n = 6; n <= 20; n += 2) worst_conv = std::max(worst_conv, gradcheck::conv_error(n, k, rng));
    double worst_row = 0.0;
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 6 + trial % 15;
        const Matrix w = oracle::random_weights(n, rng);
        const auto tp = network::transition_matrices(w);
        for (std::size_t i = 0; i < n; ++i) {
            double out_deg = 0, in_deg = 0, sf = 0, sb = 0;
            for (std::size_t j = 0; j < n; ++j) {
                out_deg += w(i, j);
                in_deg += w(j, i);
                sf += tp.forward(i, j);
                sb += tp.backward(i, j);
            }
            worst_row = std::max({worst_row, std::abs(sf - (out_deg > 0 ? 1.0 : 0.0)), std::abs(sb - (in_deg > 0 ? 1.0 : 0.0))});
        }
    }
    report(6, worst_conv < 1e-10 && worst_row <= 1e-12,
           "diffusion oracle: max |conv - dense| = " + num(worst_conv, 3) + " (K 1..4, 6-20 vertices); row-sum error " +
               num(worst_row, 3));
}

// ----------------------------------------------------------------- 7
void calibration_coverage(const fs::path& run) {
    auto ck = pipeline::load_checkpoint(run / "checkpoint.json");
    const auto tf = pipeline::open_tensor(run);
    const auto z = pipeline::checkpoint_tensor(ck, tf);
    auto& m = ck.forecaster;
    const std::size_t L = m.config().lookback, H = m.config().horizons, E = m.num_edges();
    const auto starts = nn::window_starts(ck.splits.calib.lo, ck.splits.calib.hi, L, H, 1);
    std::vector<std::size_t> hit(nn::kTargets * E * H), n(hit.size());
    for (std::size_t s : starts) {
        const auto f = nn::forecast(m, ck.calibration, z, s);
        for (std::size_t q = 0; q < nn::kTargets; ++q)
            for (std::size_t e = 0; e < E; ++e)
                for (std::size_t h = 0; h < H; ++h) {
                    const std::size_t i = f.index(q, e, h);
                    const double truth = z.at(e, s + L + h, q == 0 ? features::kTTI : features::kCE);
                    hit[i] += f.low_std[i] <= truth && truth <= f.high_std[i];
                    ++n[i];
                }
    }
    std::size_t total_hit = 0, total = 0;
    double worst_cell = 1.0;
    for (std::size_t i = 0; i < hit.size(); ++i) {
        total_hit += hit[i];
        total += n[i];
        if (!ck.calibration.fallback[i]) worst_cell = std::min(worst_cell, static_cast<double>(hit[i]) / static_cast<double>(n[i]));
    }
    const double calib_picp = static_cast<double>(total_hit) / static_cast<double>(total);
    const auto test = eval::report_from_json(io::read_json(run / "report_test.json"));
    // Test PICP pools every target, edge and horizon; the weakest target/horizon is shown for context.
    double worst_test = 1.0, covered = 0.0, count = 0.0;
    for (const auto& f : test.forecast) {
        worst_test = std::min(worst_test, f.picp);
        covered += f.picp * static_cast<double>(f.n);
        count += static_cast<double>(f.n);
    }
    const double test_picp = count > 0 ? covered / count : 0.0;
    report(7, calib_picp >= 0.9 && worst_cell >= 0.9 && test_picp >= 0.8,
           "calibration coverage: calib PICP " + num(calib_picp) + " (worst own-quantile cell " + num(worst_cell) +
               "); test PICP " + num(test_picp) + " (>= 0.8; weakest target/horizon " + num(worst_test) + ")");
}

// ----------------------------------------------------------------- 8
void metric_identities(const fs::path& run) {
    bool ok = true;
    std::size_t rows = 0;
    for (const char* s : {"train", "calib", "test"}) {
        const auto r = eval::report_from_json(io::read_json(run / (std::string("report_") + s + ".json")));
        for (const auto& f : r.forecast) {
            ok = ok && f.rmse >= f.mae;
            ++rows;
        }
        for (const auto& l : r.localization) ok = ok && l.rmse >= 0.0;
    }
    const double d = eval::dice({1, 3}, {2, 4});
    ok = ok && d == 0.5;

    // Recount PICP and spike coverage of the stored test report by brute force.
    auto ck = pipeline::load_checkpoint(run / "checkpoint.json");
    const auto tf = pipeline::open_tensor(run);
    const auto z = pipeline::checkpoint_tensor(ck, tf);
    const auto rep = eval::report_from_json(io::read_json(run / "report_test.json"));
    const std::size_t L = ck.forecaster.config().lookback, H = ck.forecaster.config().horizons;
    const auto starts = nn::window_starts(ck.splits.test.lo, ck.splits.test.hi, L, H, 1);
    std::size_t recount_mismatch = 0;
    for (std::size_t q = 0; q < nn::kTargets; ++q)
        for (std::size_t h = 0; h < H; ++h) {
            std::vector<double> lo, hi, truth;
            for (std::size_t s : starts) {
                const auto f = nn::forecast(ck.forecaster, ck.calibration, z, s);
                for (std::size_t e = 0; e < f.num_edges; ++e) {
                    lo.push_back(f.low[f.index(q, e, h)]);
                    hi.push_back(f.high[f.index(q, e, h)]);
                    truth.push_back(tf.raw.at(e, s + L + h, q == 0 ? features::kTTI : features::kCE));
                }
            }
            std::size_t in = 0;
            for (std::size_t i = 0; i < truth.size(); ++i) in += lo[i] <= truth[i] && truth[i] <= hi[i];
            const double thr = oracle::quantile_by_count(truth, 0.95);
            std::size_t sn = 0, sin = 0;
            for (std::size_t i = 0; i < truth.size(); ++i)
                if (truth[i] >= thr) {
                    ++sn;
                    sin += lo[i] <= truth[i] && truth[i] <= hi[i];
                }
            const eval::ForecastMetrics* row = nullptr;
            for (const auto& f : rep.forecast)
                if (f.target == nn::target_name(q) && f.horizon == h + 1) row = &f;
            if (!row || row->picp != static_cast<double>(in) / static_cast<double>(truth.size()) || !row->spike_cov ||
                *row->spike_cov != static_cast<double>(sin) / static_cast<double>(sn))
                ++recount_mismatch;
        }
    ok = ok && recount_mismatch == 0;

    std::mt19937_64 rng(808);
    std::uniform_real_distribution<double> u(-5.0, 5.0), w(0.0, 2.0);
    std::size_t widen_fail = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<eval::Interval> iv, wide;
        std::vector<double> truth;
        const double grow = w(rng);
        for (int i = 0; i < 50; ++i) {
            const double a = u(rng), b = u(rng);
            iv.push_back({std::min(a, b), std::max(a, b)});
            wide.push_back({std::min(a, b) - grow, std::max(a, b) + grow});
            truth.push_back(u(rng));
        }
        widen_fail += eval::picp(wide, truth) < eval::picp(iv, truth);
    }
    ok = ok && widen_fail == 0;
    report(8, ok,
           "metric identities: rmse >= mae on " + std::to_string(rows) + " rows; Dice([1,3],[2,4]) = " + num(d) +
               "; recount mismatches " + std::to_string(recount_mismatch) + "; widening regressions " +
               std::to_string(widen_fail) + "/100");
}

// ----------------------------------------------------------------- 9
void training_smoke(const fs::path& run, double radius_m, double radius_s) {
    auto data = synthetic::sinusoid_spikes(10, 500, 909);
    nn::ModelConfig mc;
    mc.d_lstm = 8;
    mc.d_dcgru = 8;
    mc.d_fuse = 16;
    nn::Forecaster m(mc, data.supports, 909);
    nn::ForecasterTraining tc;
    tc.sgd.epochs = 200;
    tc.sgd.lr = 0.05;
    tc.sgd.seed = 909;
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = nn::train_forecaster(m, data.z, nn::window_starts(0, 500, mc.lookback, mc.horizons, 4), tc);
    const double ratio = r.final_loss / r.initial_loss;
    const double secs = seconds_since(t0);

    // Localization Dice over every event window of the toy collision set,
    // with padding from the calibration split.
    auto ck = pipeline::load_checkpoint(run / "checkpoint.json");
    double dice_all = 0.0, dice_held = 0.0;
    std::size_t n_all = 0, n_held = 0;
    if (ck.localizer) {
        const auto tf = pipeline::open_tensor(run);
        const auto z = pipeline::checkpoint_tensor(ck, tf);
        for (const auto& s : nn::event_samples(z, ck.localizer->lookback(), 0, z.num_bins)) {
            const auto iv = ck.localizer->localize(z, s.start);
            double d = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                const double rad = k == 2 ? radius_s : radius_m;
                d += eval::dice({iv.low[k], iv.high[k]}, {s.truth[k] - rad, s.truth[k] + rad}) / 3.0;
            }
            dice_all += d;
            ++n_all;
            if (z.bin_of(s.truth[2]) >= ck.splits.train.hi) {
                dice_held += d;
                ++n_held;
            }
        }
    }
    if (n_all) dice_all /= static_cast<double>(n_all);
    if (n_held) dice_held /= static_cast<double>(n_held);
    report(9, ratio <= 0.5 && n_all > 0 && dice_all >= 0.5,
           "training smoke: synthetic loss ratio " + num(ratio) + " after 200 epochs (" + num(secs, 3) +
               " s); toy localization mean Dice " + num(dice_all) + " over " + std::to_string(n_all) +
               " event windows (held-out only: " + num(dice_held) + ", n=" + std::to_string(n_held) + ")");
}

// ---------------------------------------------------------------- 10
void conservation(const std::vector<fs::path>& runs) {
    bool ok = true;
    std::size_t edges_checked = 0, variants = 0;
    double worst = 0.0;
    for (const auto& run : runs) {
        const auto rd = pipeline::open_run(run);
        const auto scen = pipeline::read_variant(rd, run, "collision");
        const auto tf = pipeline::open_tensor(run);
        std::vector<double> step(tf.raw.num_edges, 0.0), binned(tf.raw.num_edges, 0.0);
        for (const auto& l : scen.logs) step[l.edge] += l.ce_step;
        for (std::size_t e = 0; e < tf.raw.num_edges; ++e) {
            for (std::size_t t = 0; t < tf.raw.num_bins; ++t) binned[e] += tf.raw.at(e, t, features::kCE);
            worst = std::max(worst, std::abs(binned[e] - step[e]));
            ok = ok && binned[e] == step[e];
            ++edges_checked;
        }
        const auto m = io::read_json(run / "manifest.json");
        for (const auto& [name, v] : m.at("variants").items()) {
            const auto& k = v.at("counts");
            ok = ok && k.at("departed").get<std::size_t>() ==
                           k.at("arrived").get<std::size_t>() + k.at("cleared").get<std::size_t>() +
                               k.at("en_route").get<std::size_t>();
            ++variants;
        }
    }
    report(10, ok,
           "conservation: binned CE == step CE on " + std::to_string(edges_checked) + " edges (max gap " + num(worst, 3) +
               "); counts reconcile on " + std::to_string(variants) + " variant runs");
}

}  // namespace

int main(int argc, char** argv) {
    fs::path work = "acceptance_work";
    fs::path config = INCFLOW_SOURCE_DIR "/configs/toy.json";
    for (int i = 1; i + 1 < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--workdir") work = argv[++i];
        else if (a == "--config") config = argv[++i];
    }
    fs::create_directories(work);
    const json toy = io::read_json(config);
    const auto cfg = pipeline::parse_config(toy, config.parent_path());
    const fs::path a = work / "run_a", b = work / "run_b";

    auto guarded = [](int id, const auto& fn) {
        try {
            fn();
        } catch (const std::exception& ex) {
            report(id, false, std::string("threw: ") + ex.what());
        }
    };
    guarded(1, [&] { determinism(cfg, a, b); });
    guarded(2, [&] { baseline_identity(a); });
    guarded(3, [&] { anomaly_signal(toy); });
    guarded(4, [&] { admissibility(); });
    guarded(5, [&] { gradient_suite(); });
    guarded(6, [&] { diffusion_oracle(); });
    guarded(7, [&] { calibration_coverage(a); });
    guarded(8, [&] { metric_identities(a); });
    guarded(9, [&] { training_smoke(a, cfg.truth_radius_m, cfg.truth_radius_s); });
    guarded(10, [&] { conservation({a, b}); });

    std::size_t failed = 0;
    for (const auto& r : results) failed += !r.pass;
    std::printf("%zu/%zu criteria passed\n", results.size() - failed, results.size());
    return failed == 0 ? 0 : 1;
}
