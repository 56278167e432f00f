// organpool command line: synthetic data, the train/calibrate/eval pipeline,
// ablation ladders, report merging, gradient checks and weight-map export.
#include <CLI11.hpp>

#include <iostream>

#include "organpool/organpool.hpp"

namespace op = organpool;
namespace fs = std::filesystem;

namespace {

struct Overrides {
    std::string config;
    std::optional<long> seed;
    std::string mode, region, scalars, out;

    void attach(CLI::App* app, bool need_config = true) {
        auto* c = app->add_option("--config", config, "experiment config (key = value)");
        if (need_config) c->required();
        app->add_option("--seed", seed, "training seed (config default 25)");
        app->add_option("--mode", mode, "gap|global|masked|masked_osf");
        app->add_option("--region", region, "mask|bbox");
        app->add_option("--scalars", scalars, "none or a subset of volume,hu,border");
        app->add_option("--out", out, "run output directory");
    }

    op::ExperimentConfig load() const {
        std::string extra;
        if (seed) extra += "seed = " + std::to_string(*seed) + "\n";
        if (!mode.empty()) {
            extra += "mode = " + mode + "\n";
            if (scalars.empty()) extra += std::string("scalars = ") + (mode == "masked_osf" ? "volume,hu,border" : "none") + "\n";
        }
        if (!region.empty()) extra += "region = " + region + "\n";
        if (!scalars.empty()) extra += "scalars = " + scalars + "\n";
        auto cfg = op::ExperimentConfig::load(config, extra);
        if (!out.empty()) cfg.out = out;
        return cfg;
    }
};

void print_report(const op::MetricReport& r, const std::string& split) {
    std::cout << split << " " << r.name << "\n" << op::report_text(r);
}

int cmd_synth(const std::string& config, const std::string& out, std::optional<long> seed, std::optional<double> signal) {
    op::KeyValues kv;
    if (!config.empty()) kv = op::KeyValues(op::read_text_file(config, op::ErrorKind::config));
    if (seed) kv.set("seed", std::to_string(*seed));
    if (signal) kv.set("signal", op::format_double(*signal));
    const auto spec = op::SynthSpec::from_config(kv);
    op::synth_generate(spec, out);
    const auto ds = op::open_dataset(out);
    std::cout << "wrote " << ds.manifest.records.size() << " studies to " << out << "\n"
              << op::prevalence_text(op::prevalence(ds));
    return 0;
}

int cmd_train(const op::ExperimentConfig& cfg) {
    const auto data = op::prepare_data(cfg);
    const auto tr = op::train_stage(cfg, data);
    op::write_training_outputs(cfg, data, tr);
    std::cout << "best epoch " << tr.best_epoch << " of " << tr.epochs_run << ", val loss "
              << op::format_double(tr.best_val_loss) << " -> " << op::checkpoint_path(cfg).string() << "\n";
    return 0;
}

int cmd_calibrate(const op::ExperimentConfig& cfg) {
    const auto data = op::prepare_data(cfg);
    const auto params = op::load_trained(cfg, data);
    const auto table = op::calibrate_stage(cfg, data, params);
    for (const auto& e : table.entries) {
        std::cout << e.label << " T=" << op::format_double(e.temperature) << " theta=" << op::format_double(e.theta)
                  << " n=" << e.valid_count << " " << e.status << "\n";
    }
    return 0;
}

int cmd_eval(const op::ExperimentConfig& cfg) {
    const auto data = op::prepare_data(cfg);
    const auto params = op::load_trained(cfg, data);
    const auto r = op::evaluate_stage(cfg, data, params, op::load_calibration(cfg));
    print_report(r.val, "val");
    print_report(r.test, "test");
    return 0;
}

int cmd_run(const op::ExperimentConfig& cfg) {
    const auto res = op::run_experiment(cfg);
    print_report(res.test_report, "test");
    return 0;
}

int cmd_ablate(const op::ExperimentConfig& cfg, const std::string& what) {
    const auto rows = op::run_ablation(cfg, op::parse_ablation_set(what));
    std::cout << op::ladder_text(rows);
    return 0;
}

// A report's run name is its run directory (<run>/reports/<file>.json).
std::string report_run_name(const fs::path& p) {
    const auto dir = p.parent_path();
    if (dir.filename() == "reports" && dir.has_parent_path() && !dir.parent_path().filename().empty()) {
        return dir.parent_path().filename().string();
    }
    return p.stem().string();
}

int cmd_report(const std::vector<std::string>& files, const std::string& out) {
    std::vector<op::LadderRow> rows;
    for (const auto& f : files) {
        const auto text = op::read_text_file(f, op::ErrorKind::data);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            op::fail(op::ErrorKind::data, f + ": " + e.what());
        }
        rows.push_back({report_run_name(f), op::report_from_json(j)});
    }
    op::write_ladder(rows, out);
    std::cout << op::ladder_text(rows);
    return 0;
}

int cmd_gradcheck(const std::string& mode, long seed, std::size_t draws) {
    std::vector<op::GradCaseOptions> cases;
    for (auto m : {op::HeadMode::gap, op::HeadMode::global, op::HeadMode::masked, op::HeadMode::masked_osf}) {
        if (mode != "all" && op::parse_head_mode(mode) != m) continue;
        for (bool toy : {false, true}) {
            cases.push_back({m, op::OsfHead::affine, toy, 3});
            if (m == op::HeadMode::masked_osf) cases.push_back({m, op::OsfHead::mlp, toy, 3});
        }
    }
    constexpr double kTolerance = 1e-4;
    bool ok = true;
    for (const auto& c : cases) {
        const auto r = op::gradcheck_sweep(c, static_cast<std::uint64_t>(seed), draws);
        const bool pass = r.max_rel_error < kTolerance;
        ok = ok && pass;
        std::cout << (pass ? "ok   " : "FAIL ") << op::to_string(c.mode)
                  << (c.osf_head == op::OsfHead::mlp ? "+mlp" : "") << (c.toy_encoder ? "+encoder" : "")
                  << " draws=" << draws << " checked=" << r.checked << " max_rel_err=" << r.max_rel_error
                  << " worst=" << r.worst_tensor << "[" << r.worst_index << "]\n";
    }
    return ok ? 0 : op::exit_code(op::ErrorKind::numeric);
}

int cmd_export_maps(const op::ExperimentConfig& cfg, std::vector<std::string> studies) {
    const auto data = op::prepare_data(cfg);
    const auto params = op::load_trained(cfg, data);
    const auto& ds = data.dataset;
    if (studies.empty()) {
        const auto ids = ds.split("test");
        for (std::size_t k = 0; k < std::min<std::size_t>(cfg.export_maps, ids.size()); ++k) {
            studies.push_back(ds.manifest.records[ids[k]].id);
        }
    }
    for (const auto& id : studies) {
        const op::StudyInput* input = nullptr;
        for (const auto* split : {&data.train, &data.val, &data.test}) {
            for (std::size_t i = 0; i < split->loaded.size() && !input; ++i) {
                if (split->loaded[i].id == id) input = &split->inputs[i];
            }
        }
        if (!input) op::fail(op::ErrorKind::data, "study '" + id + "' is not in the dataset");
        for (const auto& path : op::export_weight_maps(params, *input, id, ds.manifest.lattice.geometry,
                                                       fs::path(cfg.out) / "maps")) {
            std::cout << path << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"organ-masked attention pooling for volumetric multi-label classification"};
    app.require_subcommand(1);

    std::string synth_config, synth_out = "synth";
    std::optional<long> synth_seed;
    std::optional<double> synth_signal;
    auto* synth = app.add_subcommand("synth", "generate a planted-signal dataset");
    synth->add_option("--config", synth_config, "synth config (key = value)");
    synth->add_option("--out", synth_out, "dataset directory");
    synth->add_option("--seed", synth_seed, "generator seed (default 25)");
    synth->add_option("--signal", synth_signal, "planted signal strength");

    Overrides train_o, calib_o, eval_o, run_o, ablate_o, maps_o;
    auto* train = app.add_subcommand("train", "train and write checkpoint/ and log/");
    train_o.attach(train);
    auto* calibrate = app.add_subcommand("calibrate", "fit per-label temperatures and thresholds on val");
    calib_o.attach(calibrate);
    auto* eval = app.add_subcommand("eval", "frozen val/test evaluation of a calibrated run");
    eval_o.attach(eval);
    auto* run = app.add_subcommand("run", "train, calibrate and evaluate");
    run_o.attach(run);

    std::string what = "ladder";
    auto* ablate = app.add_subcommand("ablate", "run an ablation set and write the ladder");
    ablate_o.attach(ablate);
    ablate->add_option("--what", what, "ladder|region|scalars|all");

    std::vector<std::string> report_files;
    std::string report_out = "ladder";
    auto* report = app.add_subcommand("report", "merge metric reports into ladder tables");
    report->add_option("reports", report_files, "metric report JSON files")->required();
    report->add_option("--out", report_out, "output directory");

    std::string gc_mode = "all";
    long gc_seed = 25;
    std::size_t gc_draws = 20;
    auto* gradcheck = app.add_subcommand("gradcheck", "analytic vs. finite-difference gradients");
    gradcheck->add_option("--mode", gc_mode, "gap|global|masked|masked_osf|all");
    gradcheck->add_option("--seed", gc_seed, "draw seed");
    gradcheck->add_option("--draws", gc_draws, "random draws per configuration")->check(CLI::PositiveNumber);

    std::vector<std::string> map_studies;
    auto* maps = app.add_subcommand("export-maps", "write per-organ weight maps of a trained masked run");
    maps_o.attach(maps);
    maps->add_option("--study", map_studies, "study id (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : op::exit_code(op::ErrorKind::config);
    }

    try {
        if (*synth) return cmd_synth(synth_config, synth_out, synth_seed, synth_signal);
        if (*train) return cmd_train(train_o.load());
        if (*calibrate) return cmd_calibrate(calib_o.load());
        if (*eval) return cmd_eval(eval_o.load());
        if (*run) return cmd_run(run_o.load());
        if (*ablate) return cmd_ablate(ablate_o.load(), what);
        if (*report) return cmd_report(report_files, report_out);
        if (*gradcheck) return cmd_gradcheck(gc_mode, gc_seed, gc_draws);
        if (*maps) return cmd_export_maps(maps_o.load(), map_studies);
    } catch (const op::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return op::exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return op::exit_code(op::ErrorKind::data);
    }
    return 0;
}
