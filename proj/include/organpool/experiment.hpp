// Experiment runner: configuration, the train -> calibrate -> evaluate
// pipeline with its fixed output layout, ablation ladders, report merging,
// weight-map export, and randomized gradient-check cases.
#pragma once

#include <filesystem>
#include <functional>

#include "organpool/synth.hpp"

namespace organpool {

namespace fs = std::filesystem;

struct ExperimentConfig {
    std::string dataset;
    std::string schema;  // empty: the manifest's schema
    std::string out = "out";
    HeadMode mode = HeadMode::masked;
    std::vector<ScalarKind> scalars;
    Region region = Region::mask;
    OsfHead osf_head = OsfHead::affine;
    bool undilated_volume = false;
    bool toy_encoder = false;
    std::size_t toy_dim = 8;
    bool augment = false;  // legacy_v1 preset; toy encoder only
    double epsilon = 1e-12;
    OptimConfig optim;
    LossSchedule schedule;
    int calib_max_iter = 200;
    std::size_t calib_min_count = 64;
    std::size_t export_maps = 2;  // test studies whose weight maps are written

    void validate() const {
        optim.validate();
        schedule.validate();
        if (dataset.empty()) fail(ErrorKind::config, "key 'dataset' is required");
        if (!scalars.empty() && mode != HeadMode::masked_osf) fail(ErrorKind::config, "scalars require mode masked_osf");
        if (augment && !toy_encoder) {
            fail(ErrorKind::config, "augment = legacy_v1 needs encoder = toy (precomputed features cannot be re-derived)");
        }
        if (toy_encoder && toy_dim < 1) fail(ErrorKind::config, "toy_dim must be >= 1");
        if (!(epsilon > 0.0)) fail(ErrorKind::config, "epsilon must be > 0");
        if (calib_max_iter < 1) fail(ErrorKind::config, "calib_max_iter must be >= 1");
    }

    /// Parses key = value text. Unknown keys are rejected.
    static ExperimentConfig parse(std::string_view text) {
        const KeyValues kv(text);
        static const std::vector<std::string> known = {
            "dataset", "schema", "out", "mode", "scalars", "region", "osf_head", "scalar_volume", "encoder",
            "toy_dim", "augment", "epsilon", "lr", "weight_decay", "warmup_epochs", "min_lr_fraction",
            "max_epochs", "patience", "grad_clip", "head_lr_scale", "alpha_lr_scale", "encoder_lr_scale",
            "batch_size", "pos_weight_clip", "seed", "n_burn", "n_ramp", "w_max", "calib_max_iter",
            "calib_min_count", "attn_entropy_reg_weight", "export_maps"};
        for (const auto& [k, v] : kv.all()) {
            if (std::find(known.begin(), known.end(), k) == known.end()) fail(ErrorKind::config, "unknown key '" + k + "'");
        }
        ExperimentConfig c;
        c.dataset = kv.get("dataset", "");
        c.schema = kv.get("schema", "");
        c.out = kv.get("out", c.out);
        c.mode = parse_head_mode(kv.get("mode", "masked"));
        c.scalars = parse_scalar_set(kv.get("scalars", c.mode == HeadMode::masked_osf ? "volume,hu,border" : "none"));
        c.region = parse_region(kv.get("region", "mask"));
        const auto head = kv.get("osf_head", "affine");
        if (head != "affine" && head != "mlp") fail(ErrorKind::config, "osf_head must be affine|mlp");
        c.osf_head = head == "mlp" ? OsfHead::mlp : OsfHead::affine;
        const auto sv = kv.get("scalar_volume", "dilated");
        if (sv != "dilated" && sv != "undilated") fail(ErrorKind::config, "scalar_volume must be dilated|undilated");
        c.undilated_volume = sv == "undilated";
        const auto enc = kv.get("encoder", "precomputed");
        if (enc != "precomputed" && enc != "toy") fail(ErrorKind::config, "encoder must be precomputed|toy");
        c.toy_encoder = enc == "toy";
        c.toy_dim = static_cast<std::size_t>(std::max(0L, kv.get_int("toy_dim", 8)));
        const auto aug = kv.get("augment", "none");
        if (aug != "none" && aug != "legacy_v1") fail(ErrorKind::config, "augment must be none|legacy_v1");
        c.augment = aug == "legacy_v1";
        c.epsilon = kv.get_double("epsilon", c.epsilon);
        auto& o = c.optim;
        o.base_lr = kv.get_double("lr", o.base_lr);
        o.weight_decay = kv.get_double("weight_decay", o.weight_decay);
        o.warmup_epochs = static_cast<int>(kv.get_int("warmup_epochs", o.warmup_epochs));
        o.min_lr_fraction = kv.get_double("min_lr_fraction", o.min_lr_fraction);
        o.max_epochs = static_cast<int>(kv.get_int("max_epochs", o.max_epochs));
        o.patience = static_cast<int>(kv.get_int("patience", o.patience));
        o.grad_clip = kv.get_double("grad_clip", o.grad_clip);
        o.head_lr_scale = kv.get_double("head_lr_scale", o.head_lr_scale);
        o.alpha_lr_scale = kv.get_double("alpha_lr_scale", o.alpha_lr_scale);
        o.encoder_lr_scale = kv.get_double("encoder_lr_scale", o.encoder_lr_scale);
        const long bs = kv.get_int("batch_size", static_cast<long>(o.batch_size));
        if (bs < 1) fail(ErrorKind::config, "batch_size must be >= 1");
        o.batch_size = static_cast<std::size_t>(bs);
        o.pos_weight_clip = kv.get_double("pos_weight_clip", o.pos_weight_clip);
        const long seed = kv.get_int("seed", 25);
        if (seed < 0) fail(ErrorKind::config, "seed must be >= 0");
        o.seed = static_cast<std::uint64_t>(seed);
        c.schedule.n_burn = static_cast<int>(kv.get_int("n_burn", c.schedule.n_burn));
        c.schedule.n_ramp = static_cast<int>(kv.get_int("n_ramp", c.schedule.n_ramp));
        c.schedule.w_max = kv.get_double("w_max", c.schedule.w_max);
        c.calib_max_iter = static_cast<int>(kv.get_int("calib_max_iter", c.calib_max_iter));
        const long mc = kv.get_int("calib_min_count", static_cast<long>(c.calib_min_count));
        if (mc < 0) fail(ErrorKind::config, "calib_min_count must be >= 0");
        c.calib_min_count = static_cast<std::size_t>(mc);
        if (kv.get_double("attn_entropy_reg_weight", 0.0) != 0.0) {
            fail(ErrorKind::config, "attn_entropy_reg_weight is fixed at 0");
        }
        const long em = kv.get_int("export_maps", static_cast<long>(c.export_maps));
        if (em < 0) fail(ErrorKind::config, "export_maps must be >= 0");
        c.export_maps = static_cast<std::size_t>(em);
        c.validate();
        return c;
    }

    /// `overrides` is extra key = value text applied after the file.
    static ExperimentConfig load(const std::string& path, const std::string& overrides = "") {
        auto c = parse(read_text_file(path, ErrorKind::config) + "\n" + overrides);
        // Relative dataset/schema paths resolve against the config's directory.
        const auto base = fs::path(path).parent_path();
        if (!c.dataset.empty() && fs::path(c.dataset).is_relative()) c.dataset = (base / c.dataset).lexically_normal().string();
        if (!c.schema.empty() && fs::path(c.schema).is_relative()) c.schema = (base / c.schema).lexically_normal().string();
        return c;
    }

    /// Every key with its resolved value.
    std::string resolved_text() const {
        std::string s;
        auto line = [&](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
        line("dataset", dataset);
        if (!schema.empty()) line("schema", schema);
        line("out", out);
        line("mode", to_string(mode));
        line("scalars", scalar_set_string(scalars));
        line("region", to_string(region));
        line("osf_head", osf_head == OsfHead::mlp ? "mlp" : "affine");
        line("scalar_volume", undilated_volume ? "undilated" : "dilated");
        line("encoder", toy_encoder ? "toy" : "precomputed");
        line("toy_dim", std::to_string(toy_dim));
        line("augment", augment ? "legacy_v1" : "none");
        line("epsilon", format_double(epsilon));
        line("lr", format_double(optim.base_lr));
        line("weight_decay", format_double(optim.weight_decay));
        line("warmup_epochs", std::to_string(optim.warmup_epochs));
        line("min_lr_fraction", format_double(optim.min_lr_fraction));
        line("max_epochs", std::to_string(optim.max_epochs));
        line("patience", std::to_string(optim.patience));
        line("grad_clip", format_double(optim.grad_clip));
        line("head_lr_scale", format_double(optim.head_lr_scale));
        line("alpha_lr_scale", format_double(optim.alpha_lr_scale));
        line("encoder_lr_scale", format_double(optim.encoder_lr_scale));
        line("batch_size", std::to_string(optim.batch_size));
        line("pos_weight_clip", format_double(optim.pos_weight_clip));
        line("seed", std::to_string(optim.seed));
        line("n_burn", std::to_string(schedule.n_burn));
        line("n_ramp", std::to_string(schedule.n_ramp));
        line("w_max", format_double(schedule.w_max));
        line("calib_max_iter", std::to_string(calib_max_iter));
        line("calib_min_count", std::to_string(calib_min_count));
        line("attn_entropy_reg_weight", "0");
        line("export_maps", std::to_string(export_maps));
        return s;
    }
};

// ---------------------------------------------------------------------------
// Pipeline stages.

/// Runs `fn`, re-tagging any error with the stage name.
template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        throw e.within("stage " + name);
    } catch (const std::filesystem::filesystem_error& e) {
        throw Error(ErrorKind::data, "stage " + name + ": " + e.what());
    }
}

struct PreparedSplit {
    std::vector<LoadedStudy> loaded;
    std::vector<OrganRegions> regions;
    std::vector<StudyInput> inputs;
    std::vector<Targets> targets;

    Split view() const { return Split{inputs, targets}; }
};

struct PreparedData {
    Dataset dataset;
    ScalarStats stats;
    PreparedSplit train, val, test;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    PreparedData p;
    p.dataset = stage("load", [&] { return open_dataset(cfg.dataset, cfg.schema); });
    const InputOptions opt{cfg.region, cfg.undilated_volume};
    auto load = [&](PreparedSplit& s, std::string_view name) {
        for (auto i : p.dataset.split(name)) {
            const auto& r = p.dataset.manifest.records[i];
            s.loaded.push_back(load_study(p.dataset, r, !cfg.toy_encoder));
            s.regions.push_back(organ_regions(s.loaded.back(), p.dataset.schema, opt));
            s.targets.push_back(r.targets);
        }
        if (s.loaded.empty()) fail(ErrorKind::data, "split '" + std::string(name) + "' is empty");
    };
    stage("load", [&] {
        load(p.train, "train");
        load(p.val, "val");
        load(p.test, "test");
    });
    p.stats = stage("scalar-stats", [&] {
        std::vector<std::vector<RawOrganScalars>> raw;
        for (const auto& r : p.train.regions) raw.push_back(r.raw);
        std::vector<std::string> names;
        for (std::size_t o = 0; o < p.dataset.schema.group_count(); ++o) names.push_back(p.dataset.schema.group_name(o));
        return fit_scalar_stats(raw, names);
    });
    stage("encode", [&] {
        for (auto* s : {&p.train, &p.val, &p.test}) {
            for (std::size_t i = 0; i < s->loaded.size(); ++i) {
                s->inputs.push_back(build_study_input(s->loaded[i], s->regions[i], p.dataset.manifest.lattice, p.stats,
                                                      cfg.toy_encoder));
            }
        }
    });
    return p;
}

inline HeadConfig head_config_for(const ExperimentConfig& cfg, const PreparedData& data) {
    const std::size_t enc_in = cfg.toy_encoder ? data.train.inputs.front().lattice.cols() : 0;
    const std::size_t dim = cfg.toy_encoder ? cfg.toy_dim : data.train.inputs.front().lattice.cols();
    auto hc = HeadConfig::from_schema(data.dataset.schema, cfg.mode, dim, cfg.scalars, cfg.osf_head, enc_in);
    hc.epsilon = cfg.epsilon;
    return hc;
}

/// Training-time legacy_v1 augmentation: joint rot90/flip of volume and organ
/// masks, then regions, scalars and patches re-derived with frozen stats.
inline StudyView augmentation_view(const ExperimentConfig& cfg, const PreparedData& data) {
    if (!cfg.augment) return {};
    return [&cfg, &data](std::size_t i, int epoch) {
        const auto& s = data.train.loaded[i];
        CounterRng rng(cfg.optim.seed, s.id, "augment", static_cast<std::uint64_t>(epoch));
        const auto params = sample_legacy_v1(rng, s.volume.shape());
        auto pair = joint_rot90_flip(s.volume, s.organs, params);
        LoadedStudy a;
        a.id = s.id;
        a.targets = s.targets;
        a.volume = std::move(pair.volume);
        a.organs = std::move(pair.masks);
        const auto regions = organ_regions(a, data.dataset.schema, InputOptions{cfg.region, cfg.undilated_volume});
        return build_study_input(a, regions, data.dataset.manifest.lattice, data.stats, true);
    };
}

inline Matrix predict_logits(const HeadParams& params, const std::vector<StudyInput>& studies) {
    Matrix z(studies.size(), params.config.label_count);
    for (std::size_t s = 0; s < studies.size(); ++s) {
        const auto f = forward(params, studies[s]);
        std::copy(f.logits.begin(), f.logits.end(), z.row(s).begin());
    }
    return z;
}

inline std::string train_log_jsonl(const std::vector<TrainRecord>& log) {
    std::string out;
    for (const auto& r : log) {
        nlohmann::ordered_json j{{"epoch", r.epoch},
                                 {"step", r.step},
                                 {"lr", r.lr},
                                 {"train_loss", r.train_loss},
                                 {"val_loss", r.val_loss ? nlohmann::ordered_json(*r.val_loss) : nlohmann::ordered_json(nullptr)},
                                 {"uncertain_weight", r.uncertain_weight},
                                 {"wall_ms", r.wall_ms}};
        out += j.dump() + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Weight maps.

struct WeightMap {
    std::string study;
    std::string organ;
    LatticeGeometry geometry;
    bool fallback = false;
    std::vector<double> weights;

    double sum() const {
        double s = 0.0;
        for (double w : weights) s += w;
        return s;
    }
};

inline std::vector<WeightMap> weight_maps(const HeadParams& params, const StudyInput& study, const std::string& study_id,
                                          const LatticeGeometry& geometry) {
    if (!is_masked(params.config.mode)) {
        fail(ErrorKind::config, std::string("weight maps need a masked-mode checkpoint, got mode ") +
                                    to_string(params.config.mode));
    }
    const auto f = forward(params, study);
    std::vector<WeightMap> out;
    for (std::size_t o = 0; o < f.organs.size(); ++o) {
        if (f.organs[o].pool.weights.size() != geometry.size()) fail(ErrorKind::geometry, "weight map size differs from lattice");
        out.push_back({study_id, params.config.organ_names[o], geometry, f.organs[o].pool.fallback, f.organs[o].pool.weights});
    }
    return out;
}

inline nlohmann::ordered_json weight_map_json(const WeightMap& m) {
    const auto& g = m.geometry;
    nlohmann::ordered_json grid = nlohmann::ordered_json::array();
    for (std::size_t a = 0; a < g.cells.d; ++a) {
        nlohmann::ordered_json plane = nlohmann::ordered_json::array();
        for (std::size_t b = 0; b < g.cells.h; ++b) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            for (std::size_t c = 0; c < g.cells.w; ++c) row.push_back(m.weights[flatten_index(g, {a, b, c})]);
            plane.push_back(std::move(row));
        }
        grid.push_back(std::move(plane));
    }
    return {{"study", m.study},
            {"organ", m.organ},
            {"geometry",
             {{"kind", g.kind == LatticeKind::token ? "token" : "voxel"}, {"cells", {g.cells.d, g.cells.h, g.cells.w}}}},
            {"fallback", m.fallback},
            {"sum", m.sum()},
            {"weights", grid}};
}

inline std::vector<std::string> export_weight_maps(const HeadParams& params, const StudyInput& study,
                                                   const std::string& study_id, const LatticeGeometry& geometry,
                                                   const fs::path& dir) {
    fs::create_directories(dir);
    std::vector<std::string> written;
    for (const auto& m : weight_maps(params, study, study_id, geometry)) {
        const auto path = dir / (study_id + "_" + m.organ + ".json");
        write_text_file(path.string(), weight_map_json(m).dump(1) + "\n");
        written.push_back(path.string());
    }
    return written;
}

// ---------------------------------------------------------------------------
// Full run.

struct ExperimentResult {
    HeadParams params;
    CalibrationTable calibration;
    MetricReport test_report;
    MetricReport val_report;
    TrainResult training;
    fs::path out;
};

inline void write_report_files(const MetricReport& r, const fs::path& dir, const std::string& stem) {
    fs::create_directories(dir);
    write_text_file((dir / (stem + ".json")).string(), report_json(r).dump(1) + "\n");
    write_text_file((dir / (stem + ".txt")).string(), report_text(r));
    write_text_file((dir / (stem + "_per_class.csv")).string(), per_class_csv(r));
}

inline std::string run_name(const ExperimentConfig& cfg) {
    std::string name = to_string(cfg.mode);
    if (is_masked(cfg.mode)) name += "/" + std::string(to_string(cfg.region));
    if (cfg.mode == HeadMode::masked_osf) name += "/" + scalar_set_string(cfg.scalars);
    return name;
}

inline fs::path checkpoint_path(const ExperimentConfig& cfg) { return fs::path(cfg.out) / "checkpoint" / "best.opck"; }
inline fs::path calibration_path(const ExperimentConfig& cfg) { return fs::path(cfg.out) / "calib" / "calibration.json"; }

inline TrainResult train_stage(const ExperimentConfig& cfg, const PreparedData& data) {
    return stage("train", [&] {
        HeadParams init(head_config_for(cfg, data));
        init.initialize(cfg.optim.seed);
        return train(std::move(init), data.train.view(), data.val.view(), cfg.optim, cfg.schedule,
                     augmentation_view(cfg, data));
    });
}

/// config.resolved, checkpoint/ and log/.
inline void write_training_outputs(const ExperimentConfig& cfg, const PreparedData& data, const TrainResult& tr) {
    stage("write", [&] {
        const fs::path out(cfg.out);
        for (const char* d : {"checkpoint", "log"}) fs::create_directories(out / d);
        const std::uint64_t schema_hash = data.dataset.schema.hash();
        write_text_file((out / "config.resolved").string(),
                        cfg.resolved_text() + "schema_hash = " + std::to_string(schema_hash) + "\n");
        write_checkpoint(checkpoint_path(cfg).string(), tr.best, schema_hash);
        write_text_file((out / "checkpoint" / "scalar_stats.txt").string(), data.stats.to_text());
        write_text_file((out / "log" / "train.jsonl").string(), train_log_jsonl(tr.log));
        nlohmann::ordered_json summary{{"best_epoch", tr.best_epoch},
                                       {"best_val_loss", tr.best_val_loss},
                                       {"initial_val_loss", tr.initial_val_loss},
                                       {"epochs_run", tr.epochs_run}};
        write_text_file((out / "log" / "summary.json").string(), summary.dump(1) + "\n");
    });
}

/// Reads the run's checkpoint, rejecting one trained under another schema.
inline HeadParams load_trained(const ExperimentConfig& cfg, const PreparedData& data) {
    return stage("load-checkpoint", [&] {
        auto ck = read_checkpoint(checkpoint_path(cfg).string(), data.dataset.schema.hash());
        if (ck.params.config.mode != cfg.mode) {
            fail(ErrorKind::config, std::string("checkpoint mode ") + to_string(ck.params.config.mode) +
                                        " differs from configured mode " + to_string(cfg.mode));
        }
        return std::move(ck.params);
    });
}

inline CalibrationTable calibrate_stage(const ExperimentConfig& cfg, const PreparedData& data, const HeadParams& params) {
    return stage("calibrate", [&] {
        auto table = fit_calibration(predict_logits(params, data.val.inputs), data.val.targets, data.dataset.schema.labels,
                                     cfg.calib_max_iter, cfg.calib_min_count);
        fs::create_directories(calibration_path(cfg).parent_path());
        write_text_file(calibration_path(cfg).string(), table.to_json().dump(1) + "\n");
        return table;
    });
}

inline CalibrationTable load_calibration(const ExperimentConfig& cfg) {
    return stage("load-calibration", [&] {
        return CalibrationTable::from_json(
            nlohmann::json::parse(read_text_file(calibration_path(cfg).string(), ErrorKind::data)));
    });
}

inline void export_run_maps(const ExperimentConfig& cfg, const PreparedData& data, const HeadParams& params,
                            std::size_t count) {
    const auto ids = data.dataset.split("test");
    for (std::size_t k = 0; k < std::min(count, ids.size()); ++k) {
        export_weight_maps(params, data.test.inputs[k], data.dataset.manifest.records[ids[k]].id,
                           data.dataset.manifest.lattice.geometry, fs::path(cfg.out) / "maps");
    }
}

struct EvalReports {
    MetricReport val, test;
};

/// Frozen evaluation on val and test; writes reports/ and, for masked
/// modes, the first export_maps test studies' weight maps.
inline EvalReports evaluate_stage(const ExperimentConfig& cfg, const PreparedData& data, const HeadParams& params,
                                  const CalibrationTable& table) {
    return stage("evaluate", [&] {
        EvalReports r;
        const auto name = run_name(cfg);
        r.val = evaluate(name, predict_logits(params, data.val.inputs), data.val.targets, table);
        r.test = evaluate(name, predict_logits(params, data.test.inputs), data.test.targets, table);
        const fs::path out(cfg.out);
        write_report_files(r.val, out / "reports", "val_metrics");
        write_report_files(r.test, out / "reports", "test_metrics");
        fs::create_directories(out / "maps");
        if (is_masked(cfg.mode)) export_run_maps(cfg, data, params, cfg.export_maps);
        return r;
    });
}

/// Stages: load -> encode -> scalar stats (train only) -> train -> calibrate
/// on val -> frozen test evaluation. Writes checkpoint/, calib/, reports/,
/// maps/, log/ and config.resolved under cfg.out.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentResult res;
    res.out = cfg.out;
    const PreparedData data = prepare_data(cfg);
    res.training = train_stage(cfg, data);
    write_training_outputs(cfg, data, res.training);
    res.params = res.training.best;
    res.calibration = calibrate_stage(cfg, data, res.params);
    auto reports = evaluate_stage(cfg, data, res.params, res.calibration);
    res.val_report = std::move(reports.val);
    res.test_report = std::move(reports.test);
    return res;
}

// ---------------------------------------------------------------------------
// Ablations and report merging.

struct LadderRow {
    std::string name;
    MetricReport report;
};

inline std::string ladder_text(const std::vector<LadderRow>& rows) {
    std::size_t width = 4;
    for (const auto& r : rows) width = std::max(width, r.name.size());
    auto pad = [&](std::string s) {
        s.resize(std::max(width, s.size()), ' ');
        return s;
    };
    auto col = [](const std::string& s) { return std::string(s.size() < 9 ? 9 - s.size() : 0, ' ') + s; };
    std::string out = pad("run") + col("auroc") + col("auprc") + col("f1") + col("ba") + "\n";
    for (const auto& r : rows) {
        out += pad(r.name) + col(format_metric(r.report.auroc.mean)) + col(format_metric(r.report.auprc.mean)) +
               col(format_metric(r.report.f1.mean)) + col(format_metric(r.report.ba.mean)) + "\n";
    }
    return out;
}

inline std::string ladder_csv(const std::vector<LadderRow>& rows) {
    std::string out = "run,auroc,auprc,f1,ba\n";
    for (const auto& r : rows) {
        out += r.name + "," + format_metric(r.report.auroc.mean, 6) + "," + format_metric(r.report.auprc.mean, 6) + "," +
               format_metric(r.report.f1.mean, 6) + "," + format_metric(r.report.ba.mean, 6) + "\n";
    }
    return out;
}

/// Label x run AUROC matrix (heatmap-ready).
inline std::string per_class_matrix_csv(const std::vector<LadderRow>& rows) {
    if (rows.empty()) return "label\n";
    std::string out = "label";
    for (const auto& r : rows) out += "," + r.name;
    out += "\n";
    for (std::size_t l = 0; l < rows.front().report.labels.size(); ++l) {
        out += rows.front().report.labels[l].label;
        for (const auto& r : rows) {
            if (r.report.labels.size() != rows.front().report.labels.size() || r.report.labels[l].label != rows.front().report.labels[l].label) {
                fail(ErrorKind::data, "reports '" + rows.front().name + "' and '" + r.name + "' have different label sets");
            }
            out += "," + format_metric(r.report.labels[l].auroc, 6);
        }
        out += "\n";
    }
    return out;
}

inline void write_ladder(const std::vector<LadderRow>& rows, const fs::path& dir) {
    fs::create_directories(dir);
    write_text_file((dir / "ladder.txt").string(), ladder_text(rows));
    write_text_file((dir / "ladder.csv").string(), ladder_csv(rows));
    write_text_file((dir / "per_class_auroc.csv").string(), per_class_matrix_csv(rows));
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : rows) j.push_back({{"run", r.name}, {"report", report_json(r.report)}});
    write_text_file((dir / "ladder.json").string(), j.dump(1) + "\n");
}

enum class AblationSet { ladder, region, scalars, all };

inline AblationSet parse_ablation_set(std::string_view s) {
    if (s == "ladder") return AblationSet::ladder;
    if (s == "region") return AblationSet::region;
    if (s == "scalars") return AblationSet::scalars;
    if (s == "all") return AblationSet::all;
    fail(ErrorKind::config, "unknown ablation set '" + std::string(s) + "' (ladder|region|scalars|all)");
}

struct AblationRun {
    std::string name;
    ExperimentConfig config;
};

/// The mode ladder gap -> global -> masked -> masked_osf, the mask/bbox
/// region pair over all modes, and/or the scalar subsets of masked_osf.
inline std::vector<AblationRun> ablation_runs(const ExperimentConfig& base, AblationSet set) {
    std::vector<AblationRun> runs;
    const fs::path root(base.out);
    auto add = [&](const std::string& name, HeadMode mode, Region region, std::vector<ScalarKind> scalars) {
        for (const auto& r : runs)
            if (r.name == name) return;
        ExperimentConfig c = base;
        c.mode = mode;
        c.region = region;
        c.scalars = mode == HeadMode::masked_osf ? std::move(scalars) : std::vector<ScalarKind>{};
        c.out = (root / name).string();
        runs.push_back({name, c});
    };
    const auto all_scalars = std::vector<ScalarKind>{ScalarKind::volume, ScalarKind::hu, ScalarKind::border};
    const auto osf_scalars = base.mode == HeadMode::masked_osf && !base.scalars.empty() ? base.scalars : all_scalars;
    const std::vector<HeadMode> modes{HeadMode::gap, HeadMode::global, HeadMode::masked, HeadMode::masked_osf};
    if (set == AblationSet::ladder || set == AblationSet::all) {
        for (auto m : modes) add(to_string(m), m, base.region, osf_scalars);
    }
    if (set == AblationSet::region || set == AblationSet::all) {
        for (auto region : {Region::mask, Region::bbox}) {
            for (auto m : modes) {
                add(std::string(to_string(m)) + "-" + to_string(region), m, region, osf_scalars);
            }
        }
    }
    if (set == AblationSet::scalars || set == AblationSet::all) {
        add("masked", HeadMode::masked, base.region, {});
        for (const auto& s : std::vector<std::vector<ScalarKind>>{{ScalarKind::volume},
                                                                   {ScalarKind::hu},
                                                                   {ScalarKind::volume, ScalarKind::hu},
                                                                   all_scalars}) {
            std::string name = "masked_osf-";
            for (std::size_t i = 0; i < s.size(); ++i) name += (i ? "+" : "") + std::string(to_string(s[i]));
            add(name, HeadMode::masked_osf, base.region, s);
        }
    }
    return runs;
}

inline std::vector<LadderRow> run_ablation(const ExperimentConfig& base, AblationSet set) {
    std::vector<LadderRow> rows;
    for (const auto& run : ablation_runs(base, set)) {
        auto res = run_experiment(run.config);
        rows.push_back({run.name, std::move(res.test_report)});
    }
    write_ladder(rows, fs::path(base.out) / "reports");
    return rows;
}

// ---------------------------------------------------------------------------
// Randomized gradient-check cases: small lattices with fallback organs,
// active truncation gates, missing targets, and every parameter perturbed.

struct GradCase {
    HeadParams params;
    std::vector<StudyInput> studies;
    std::vector<Targets> targets;
    std::vector<double> pos_weight;
    double uncertain = 0.3;
};

struct GradCaseOptions {
    HeadMode mode = HeadMode::gap;
    OsfHead osf_head = OsfHead::affine;
    bool toy_encoder = false;
    std::size_t scalars = 3;  // masked_osf only
};

inline GradCase random_grad_case(const GradCaseOptions& opt, std::uint64_t seed, std::uint64_t draw) {
    CounterRng rng(seed, "gradcheck", to_string(opt.mode), draw);
    const std::size_t dim = 4, rows = 12, patch = 3;
    LabelSchema schema;
    schema.labels = {"a0", "a1", "b0", "c0", "x0"};
    schema.kappa = {"a", "a", "b", "c", kOtherGroup};
    schema.merge_map = {{1, "a_raw", "a"}, {2, "b_raw", "b"}, {3, "c_raw", "c"}};
    schema.dilation_mm = {{"a", 0.0}, {"b", 0.0}, {"c", 0.0}};
    std::vector<ScalarKind> scalars;
    const std::vector<ScalarKind> kinds{ScalarKind::volume, ScalarKind::hu, ScalarKind::border};
    if (opt.mode == HeadMode::masked_osf) scalars.assign(kinds.begin(), kinds.begin() + static_cast<long>(std::min<std::size_t>(opt.scalars, 3)));
    GradCase gc;
    gc.params = HeadParams(HeadConfig::from_schema(schema, opt.mode, dim, scalars, opt.osf_head, opt.toy_encoder ? patch : 0));
    for (auto& t : gc.params.tensors) {
        for (auto& v : t.values) v = 0.6 * rng.normal();
    }
    const std::size_t n_studies = 3;
    const std::size_t fallback_organ = rng.below(3);
    for (std::size_t s = 0; s < n_studies; ++s) {
        StudyInput in;
        in.lattice = Matrix(rows, opt.toy_encoder ? patch : dim);
        for (auto& v : in.lattice.values()) v = rng.normal();
        for (std::size_t o = 0; o < 3; ++o) {
            std::vector<std::uint8_t> m(rows, 0);
            const bool empty = s == 0 && o == fallback_organ;
            if (!empty) {
                for (auto& x : m) x = rng.bernoulli(0.4);
                m[rng.below(rows)] = 1;
            }
            in.organs.indicators.push_back(std::move(m));
            in.organs.scalars.push_back(OrganScalars{rng.normal(), rng.normal(), (s + o) % 2 == 0 ? 1.0 : 0.0});
        }
        gc.studies.push_back(std::move(in));
        Targets y(schema.label_count());
        for (auto& t : y) {
            const double u = rng.uniform();
            t = u < 0.2 ? -1 : (u < 0.6 ? 1 : 0);
        }
        gc.targets.push_back(std::move(y));
    }
    for (std::size_t l = 0; l < schema.label_count(); ++l) gc.pos_weight.push_back(rng.uniform(1.0, 3.0));
    return gc;
}

/// Worst relative error over `draws` random cases of one configuration.
inline GradCheckResult gradcheck_sweep(const GradCaseOptions& opt, std::uint64_t seed, std::size_t draws) {
    GradCheckResult worst;
    for (std::size_t k = 0; k < draws; ++k) {
        const auto gc = random_grad_case(opt, seed, k);
        const auto r = grad_check(gc.params, gc.studies, gc.targets, gc.pos_weight, gc.uncertain);
        const std::size_t checked = worst.checked + r.checked;
        if (k == 0 || r.max_rel_error > worst.max_rel_error) worst = r;
        worst.checked = checked;
    }
    return worst;
}

}  // namespace organpool
