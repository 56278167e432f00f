#include <gtest/gtest.h>
#include <sys/wait.h>

#include "support.hpp"

using namespace organpool;
namespace fs = std::filesystem;

namespace {

ExperimentConfig quick_config(const fs::path& data, const fs::path& out, const std::string& extra = "") {
    return ExperimentConfig::parse("dataset = " + data.string() + "\nout = " + out.string() +
                                   "\nmax_epochs = 4\nwarmup_epochs = 1\nn_burn = 1\nn_ramp = 2\ncalib_min_count = 8\n" +
                                   extra);
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(ORGANPOOL_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> relative_files(const fs::path& root) {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST(Config, ShippedConfigsParse) {
    const auto cfg = ExperimentConfig::load(ORGANPOOL_SOURCE_DIR "/configs/experiment.cfg");
    EXPECT_EQ(cfg.mode, HeadMode::masked);
    EXPECT_EQ(cfg.optim.seed, 25u);
    EXPECT_EQ(cfg.optim.base_lr, 1e-3);
    EXPECT_EQ(cfg.optim.patience, 10);
    EXPECT_EQ(cfg.schedule.w_max, 0.3);
    EXPECT_EQ(cfg.calib_min_count, 64u);
    EXPECT_TRUE(fs::path(cfg.dataset).is_absolute());
    const KeyValues kv(read_text_file(ORGANPOOL_SOURCE_DIR "/configs/synth.cfg"));
    const auto spec = SynthSpec::from_config(kv);
    EXPECT_EQ(spec.seed, 25u);
}

TEST(Config, UnknownKeysAndBadValuesAreConfigErrors) {
    auto kind = [](const std::string& text) {
        try {
            ExperimentConfig::parse(text);
        } catch (const Error& e) {
            return e.kind();
        }
        return ErrorKind::numeric;
    };
    EXPECT_EQ(kind("dataset = d\nlearning_rate = 1\n"), ErrorKind::config);
    EXPECT_EQ(kind("dataset = d\nmode = pooled\n"), ErrorKind::config);
    EXPECT_EQ(kind("dataset = d\nmode = masked\nscalars = volume\n"), ErrorKind::config);
    EXPECT_EQ(kind("dataset = d\naugment = legacy_v1\n"), ErrorKind::config);
    EXPECT_EQ(kind("dataset = d\nattn_entropy_reg_weight = 0.1\n"), ErrorKind::config);
    EXPECT_EQ(kind("mode = gap\n"), ErrorKind::config);
    EXPECT_EQ(kind("dataset = d\nlr = -1\n"), ErrorKind::config);
}

TEST(Config, OverridesApplyAfterTheFile) {
    testutil::TempDir dir("cfg");
    write_text_file((dir / "a.cfg").string(), "dataset = data\nmode = gap\nseed = 3\n");
    const auto c = ExperimentConfig::load((dir / "a.cfg").string(), "mode = masked_osf\nscalars = volume\nseed = 9\n");
    EXPECT_EQ(c.mode, HeadMode::masked_osf);
    EXPECT_EQ(c.scalars, std::vector<ScalarKind>{ScalarKind::volume});
    EXPECT_EQ(c.optim.seed, 9u);
    EXPECT_EQ(fs::path(c.dataset), (dir / "data").lexically_normal());
    const auto again = ExperimentConfig::parse(c.resolved_text());
    EXPECT_EQ(again.resolved_text(), c.resolved_text());
}

TEST(Pipeline, WritesTheRunLayout) {
    testutil::TempDir dir("pipeline");
    synth_generate(testutil::tiny_synth(), dir / "data");
    const auto cfg = quick_config(dir / "data", dir / "run", "mode = masked_osf\n");
    const auto res = run_experiment(cfg);
    EXPECT_EQ(res.test_report.labels.size(), testutil::tiny_synth().label_count());
    EXPECT_EQ(res.test_report.name, "masked_osf/mask/volume,hu,border");
    const auto files = relative_files(dir / "run");
    for (const char* f : {"config.resolved", "checkpoint/best.opck", "checkpoint/scalar_stats.txt", "calib/calibration.json",
                          "log/train.jsonl", "log/summary.json", "reports/test_metrics.json", "reports/test_metrics.txt",
                          "reports/test_metrics_per_class.csv", "reports/val_metrics.json"}) {
        EXPECT_TRUE(std::find(files.begin(), files.end(), f) != files.end()) << f;
    }
    const auto maps = std::count_if(files.begin(), files.end(), [](const auto& f) { return f.rfind("maps/", 0) == 0; });
    EXPECT_EQ(static_cast<std::size_t>(maps), cfg.export_maps * testutil::tiny_synth().organs);
    const auto resolved = testutil::slurp(dir / "run/config.resolved");
    EXPECT_NE(resolved.find("schema_hash = "), std::string::npos);
    EXPECT_NE(resolved.find("seed = 25"), std::string::npos);

    std::istringstream log(testutil::slurp(dir / "run/log/train.jsonl"));
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log, line)) {
        const auto j = nlohmann::json::parse(line);
        for (const char* k : {"epoch", "step", "lr", "train_loss", "val_loss", "uncertain_weight", "wall_ms"})
            EXPECT_TRUE(j.contains(k)) << k;
        ++lines;
    }
    EXPECT_EQ(lines, res.training.log.size());
}

TEST(Pipeline, StagesComposeLikeTheFullRun) {
    testutil::TempDir dir("stages");
    synth_generate(testutil::tiny_synth(), dir / "data");
    const auto full = run_experiment(quick_config(dir / "data", dir / "full"));
    const auto cfg = quick_config(dir / "data", dir / "staged");
    const auto data = prepare_data(cfg);
    write_training_outputs(cfg, data, train_stage(cfg, data));
    const auto params = load_trained(cfg, data);
    calibrate_stage(cfg, data, params);
    evaluate_stage(cfg, data, params, load_calibration(cfg));
    for (const char* f : {"checkpoint/best.opck", "calib/calibration.json", "reports/test_metrics.json"})
        EXPECT_EQ(testutil::slurp(dir / "staged" / f), testutil::slurp(dir / "full" / f)) << f;

    auto wrong = cfg;
    wrong.mode = HeadMode::gap;
    try {
        load_trained(wrong, data);
        ADD_FAILURE() << "mode mismatch accepted";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
    }
}

TEST(Pipeline, RepeatRunsAreByteIdentical) {
    testutil::TempDir dir("repeat");
    synth_generate(testutil::tiny_synth(), dir / "data");
    run_experiment(quick_config(dir / "data", dir / "a", "mode = masked_osf\n"));
    run_experiment(quick_config(dir / "data", dir / "b", "mode = masked_osf\n"));
    const auto files = relative_files(dir / "a");
    EXPECT_EQ(files, relative_files(dir / "b"));
    for (const auto& f : files) {
        if (f == "config.resolved" || f == "log/train.jsonl" || f == "log/summary.json") continue;
        EXPECT_EQ(testutil::slurp(dir / "a" / f), testutil::slurp(dir / "b" / f)) << f;
    }
}

TEST(Pipeline, ToyEncoderWithAugmentationRuns) {
    testutil::TempDir dir("toy");
    synth_generate(testutil::tiny_synth(), dir / "data");
    const auto res = run_experiment(quick_config(dir / "data", dir / "run", "encoder = toy\ntoy_dim = 4\naugment = legacy_v1\n"));
    EXPECT_NE(res.params.find("encoder.weight"), nullptr);
    EXPECT_TRUE(res.test_report.auroc.mean.has_value());
}

TEST(Ablation, RunSetsAndNaming) {
    const auto base = ExperimentConfig::parse("dataset = d\nout = root\n");
    auto names = [&](AblationSet s) {
        std::vector<std::string> out;
        for (const auto& r : ablation_runs(base, s)) out.push_back(r.name);
        return out;
    };
    EXPECT_EQ(names(AblationSet::ladder), (std::vector<std::string>{"gap", "global", "masked", "masked_osf"}));
    EXPECT_EQ(names(AblationSet::region).size(), 8u);
    EXPECT_EQ(names(AblationSet::scalars),
              (std::vector<std::string>{"masked", "masked_osf-volume", "masked_osf-hu", "masked_osf-volume+hu",
                                        "masked_osf-volume+hu+border"}));
    for (const auto& r : ablation_runs(base, AblationSet::all)) {
        EXPECT_EQ(fs::path(r.config.out), fs::path("root") / r.name);
        if (r.config.mode != HeadMode::masked_osf) {
            EXPECT_TRUE(r.config.scalars.empty());
        }
    }
    EXPECT_THROW(parse_ablation_set("everything"), Error);
}

TEST(Ablation, RegionRowsDifferOnlyInMaskedModes) {
    testutil::TempDir dir("ablate");
    synth_generate(testutil::tiny_synth(), dir / "data");
    const auto rows = run_ablation(quick_config(dir / "data", dir / "abl"), AblationSet::region);
    ASSERT_EQ(rows.size(), 8u);
    for (std::size_t m = 0; m < 4; ++m) {
        const auto& a = rows[m];
        const auto& b = rows[m + 4];
        EXPECT_EQ(a.report.labels.size(), b.report.labels.size());
        if (m < 2) {
            EXPECT_EQ(report_json(a.report)["labels"].dump(), report_json(b.report)["labels"].dump()) << a.name;
        }
    }
    for (const char* f : {"ladder.csv", "ladder.txt", "per_class_auroc.csv", "ladder.json"})
        EXPECT_TRUE(fs::exists(dir / "abl/reports" / f)) << f;
    const auto csv = testutil::slurp(dir / "abl/reports/ladder.csv");
    EXPECT_NE(csv.find("masked_osf-bbox"), std::string::npos);
}

TEST(WeightMaps, SingletonEmptyAndSums) {
    LabelSchema s;
    s.labels = {"a0", "b0", "x0"};
    s.kappa = {"a", "b", kOtherGroup};
    s.merge_map = {{1, "a", "a"}, {2, "b", "b"}};
    s.dilation_mm = {{"a", 0.0}, {"b", 0.0}};
    HeadParams p(HeadConfig::from_schema(s, HeadMode::masked, 3));
    p.initialize(4);
    CounterRng rng(9, "maps", "params");
    for (auto& t : p.tensors)
        for (auto& v : t.values) v = rng.normal();
    const auto g = LatticeGeometry::voxel(Shape3{2, 2, 3});
    StudyInput in;
    in.lattice = testutil::random_matrix(rng, g.size(), 3);
    std::vector<std::uint8_t> one(g.size(), 0);
    one[7] = 1;
    in.organs.indicators = {one, std::vector<std::uint8_t>(g.size(), 0)};
    in.organs.scalars = {{}, {}};
    const auto maps = weight_maps(p, in, "s0", g);
    ASSERT_EQ(maps.size(), 2u);
    EXPECT_NEAR(maps[0].weights[7], 1.0, 1e-9);
    EXPECT_FALSE(maps[0].fallback);
    EXPECT_TRUE(maps[1].fallback);
    for (double w : maps[1].weights) EXPECT_EQ(w, 1.0 / static_cast<double>(g.size()));
    for (const auto& m : maps) EXPECT_NEAR(m.sum(), 1.0, 1e-6);

    const auto j = weight_map_json(maps[0]);
    EXPECT_EQ(j["weights"].size(), 2u);
    EXPECT_EQ(j["weights"][0].size(), 2u);
    EXPECT_EQ(j["weights"][0][0].size(), 3u);
    EXPECT_NEAR(j["weights"][1][0][1].get<double>(), 1.0, 1e-9);

    HeadParams gp(HeadConfig::from_schema(s, HeadMode::gap, 3));
    EXPECT_THROW(weight_maps(gp, in, "s0", g), Error);
}

TEST(WeightMaps, TrainedRunSumsToOne) {
    testutil::TempDir dir("maps");
    synth_generate(testutil::tiny_synth(), dir / "data");
    const auto cfg = quick_config(dir / "data", dir / "run");
    const auto res = run_experiment(cfg);
    const auto data = prepare_data(cfg);
    for (std::size_t k = 0; k < data.test.inputs.size(); ++k) {
        for (const auto& m : weight_maps(res.params, data.test.inputs[k], "t", data.dataset.manifest.lattice.geometry)) {
            EXPECT_NEAR(m.sum(), 1.0, 1e-6);
            for (double w : m.weights) EXPECT_GE(w, 0.0);
        }
    }
}

TEST(Cli, ExitCodesAndEndToEnd) {
    testutil::TempDir dir("cli");
    const auto log = dir / "out.txt";
    EXPECT_EQ(run_cli("--help", log), 0);
    EXPECT_EQ(run_cli("train --bogus", log), 2);
    EXPECT_EQ(run_cli("train --config " + (dir / "absent.cfg").string(), log), 2);

    write_text_file((dir / "bad.cfg").string(), "dataset = nowhere\nmax_epochs = 1\n");
    EXPECT_EQ(run_cli("train --config " + (dir / "bad.cfg").string() + " --out " + (dir / "r").string(), log), 3);
    EXPECT_NE(testutil::slurp(log).find("data error"), std::string::npos);

    write_text_file((dir / "synth.cfg").string(), "n_train = 40\nn_val = 20\nn_test = 20\n");
    ASSERT_EQ(run_cli("synth --config " + (dir / "synth.cfg").string() + " --out " + (dir / "data").string(), log), 0);
    EXPECT_NE(testutil::slurp(log).find("wrote 80 studies"), std::string::npos);

    write_text_file((dir / "exp.cfg").string(),
                    "dataset = data\nmax_epochs = 3\nwarmup_epochs = 1\ncalib_min_count = 8\n");
    const std::string base = "--config " + (dir / "exp.cfg").string();
    const auto run = (dir / "run").string();
    ASSERT_EQ(run_cli("train " + base + " --mode masked_osf --scalars volume --out " + run, log), 0) << testutil::slurp(log);
    ASSERT_EQ(run_cli("calibrate " + base + " --mode masked_osf --scalars volume --out " + run, log), 0);
    ASSERT_EQ(run_cli("eval " + base + " --mode masked_osf --scalars volume --out " + run, log), 0);
    EXPECT_NE(testutil::slurp(log).find("masked_osf/mask/volume"), std::string::npos);
    EXPECT_EQ(run_cli("eval " + base + " --mode gap --out " + run, log), 2);
    ASSERT_EQ(run_cli("export-maps " + base + " --mode masked_osf --scalars volume --out " + run + " --study s00000", log), 0);
    EXPECT_TRUE(fs::exists(dir / "run/maps/s00000_organ0.json"));

    ASSERT_EQ(run_cli("report " + run + "/reports/test_metrics.json --out " + (dir / "ladder").string(), log), 0);
    EXPECT_NE(testutil::slurp(dir / "ladder/ladder.csv").find("run"), std::string::npos);
    EXPECT_EQ(run_cli("report " + (dir / "absent.json").string(), log), 3);

    EXPECT_EQ(run_cli("gradcheck --mode masked --draws 2", log), 0);
    EXPECT_NE(testutil::slurp(log).find("ok   masked"), std::string::npos);
    EXPECT_EQ(run_cli("gradcheck --mode pooled", log), 2);
}
