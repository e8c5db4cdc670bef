// incflow command-line front end. Every verb works on one run directory,
// chosen by --out, then $INCFLOW_OUT, then the config's "out" key.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "incflow/pipeline.hpp"

namespace {

using namespace incflow;
namespace fs = std::filesystem;

struct Globals {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

pipeline::ExperimentConfig load(const Globals& g) {
    if (g.config.empty()) throw ConfigError("this command needs --config");
    const fs::path p(g.config);
    if (!fs::exists(p)) throw ConfigError("config file not found: " + g.config);
    pipeline::json doc;
    try {
        doc = pipeline::json::parse(io::read_file(p));
    } catch (const pipeline::json::parse_error& ex) {
        throw ConfigError(g.config + ": invalid JSON: " + ex.what());
    }
    if (g.seed) doc["seed"] = *g.seed;
    auto cfg = pipeline::parse_config(doc, p.has_parent_path() ? p.parent_path() : fs::path("."));
    cfg.out_dir = doc.value("out", std::string());
    return cfg;
}

fs::path run_dir(const Globals& g) {
    if (!g.out.empty()) return g.out;
    if (const char* env = std::getenv("INCFLOW_OUT"); env && *env) return env;
    if (!g.config.empty()) {
        const auto cfg = load(g);
        if (!cfg.out_dir.empty()) return cfg.out_dir;
    }
    throw ConfigError("no run directory: pass --out, set INCFLOW_OUT, or give the config an \"out\" key");
}

void print_report(const eval::MetricReport& r) {
    std::cout << "split " << r.split << '\n';
    for (const auto& f : r.forecast) {
        std::cout << "  " << f.target << " h" << f.horizon << "  rmse " << f.rmse << "  mae " << f.mae << "  smape " << f.smape
                  << "%  r2 " << (f.r2 ? std::to_string(*f.r2) : "undefined") << "  picp " << f.picp << "  width "
                  << f.mean_width << "  spike_cov " << (f.spike_cov ? std::to_string(*f.spike_cov) : "undefined") << '\n';
    }
    for (const auto& l : r.localization)
        std::cout << "  event " << l.dim << "  rmse " << l.rmse << "  picp " << l.picp << "  width " << l.mean_width
                  << "  dice " << l.dice << "  (n=" << l.n << ")\n";
    if (r.localization.empty()) std::cout << "  no events in this split\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"incflow: traffic incident simulation, spatio-temporal interval forecasting and event localization"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Experiment config (JSON)");
    app.add_option("--out", g.out, "Run directory");
    app.add_option("--seed", g.seed, "Override the config seed");
    app.add_flag("--quiet", g.quiet, "Suppress progress messages");

    auto* gen = app.add_subcommand("gen-grid", "Write a grid network as JSON");
    network::GridParams grid;
    std::string grid_file;
    gen->add_option("--rows", grid.rows)->default_val(3);
    gen->add_option("--cols", grid.cols)->default_val(3);
    gen->add_option("--block-m", grid.block_m)->default_val(100.0);
    gen->add_option("--vmax", grid.vmax_mps)->default_val(13.89);
    gen->add_option("--lanes", grid.lanes)->default_val(1);
    gen->add_option("--file", grid_file, "Output file (default <run>/network.json)");

    auto* simulate = app.add_subcommand("simulate", "Run collision, control and baseline variants");
    auto* featurize = app.add_subcommand("featurize", "Aggregate logs into the edge x bin tensor");
    auto* train = app.add_subcommand("train", "Train and calibrate the forecaster and localizer");
    auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on one split");
    std::string split = "test", checkpoint;
    evaluate->add_option("--split", split)->check(CLI::IsMember({"train", "calib", "test"}));
    std::size_t start = 0;
    auto* forecast = app.add_subcommand("forecast", "Interval forecast for the window starting at a bin");
    auto* localize = app.add_subcommand("localize", "Event bounds for the window starting at a bin");
    for (auto* sc : {evaluate, forecast, localize})
        sc->add_option("--checkpoint", checkpoint, "Checkpoint (default <run>/checkpoint.json)");
    for (auto* sc : {forecast, localize}) sc->add_option("--start", start, "Window start bin")->required();
    auto* plots = app.add_subcommand("export-plots", "Write plot-ready CSV series to <run>/plots");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    const pipeline::Reporter say{g.quiet};
    try {
        if (gen->parsed()) {
            const fs::path f = grid_file.empty() ? run_dir(g) / "network.json" : fs::path(grid_file);
            pipeline::gen_grid(grid, f);
            say("network written to " + f.string());
        } else if (simulate->parsed()) {
            const auto cfg = load(g);
            pipeline::simulate(cfg, run_dir(g), say);
        } else if (featurize->parsed()) {
            pipeline::featurize(run_dir(g), say);
        } else if (train->parsed()) {
            const auto cfg = load(g);
            const auto dir = run_dir(g);
            const auto out = pipeline::train_to(cfg, dir, dir / "checkpoint.json", say);
            std::cout << "forecaster loss " << out.forecaster_curve.initial_loss << " -> " << out.forecaster_curve.final_loss
                      << '\n';
            if (out.localizer_curve)
                std::cout << "localizer loss " << out.localizer_curve->initial_loss << " -> " << out.localizer_curve->final_loss
                          << '\n';
        } else {
            const auto dir = run_dir(g);
            const fs::path ck = checkpoint.empty() ? dir / "checkpoint.json" : fs::path(checkpoint);
            if (evaluate->parsed()) {
                double rm = 50.0, rs = 15.0;
                if (!g.config.empty()) {
                    const auto cfg = load(g);
                    rm = cfg.truth_radius_m;
                    rs = cfg.truth_radius_s;
                }
                print_report(pipeline::evaluate_to(ck, dir, split, dir, rm, rs, say));
            } else if (forecast->parsed() || localize->parsed()) {
                auto c = pipeline::load_checkpoint(ck);
                const auto t = pipeline::open_tensor(dir);
                const auto j = forecast->parsed() ? pipeline::forecast_json(c, t, start) : pipeline::localize_json(c, t, start);
                std::cout << j.dump(1) << '\n';
            } else if (plots->parsed()) {
                for (const auto& f : pipeline::export_plots(dir, dir / "plots", say)) say("wrote plots/" + f);
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
