#include <gtest/gtest.h>

#include "support.hpp"

using namespace organpool;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no organpool::Error thrown";
    return ErrorKind::invalid_input;
}

std::string message_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

Volume integer_volume(Shape3 s, Spacing sp) {
    Grid3<double> g(s);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(i % 97) * 10.0 - 400.0;
    return Volume(std::move(g), sp);
}

}  // namespace

TEST(VolumeFile, RoundTrip) {
    testutil::TempDir dir("volume");
    const auto v = integer_volume(Shape3{3, 4, 5}, Spacing{2.5, 0.75, 0.75});
    write_volume((dir / "a.octv").string(), v);
    const auto back = read_volume((dir / "a.octv").string());
    EXPECT_EQ(back.data, v.data);
    EXPECT_EQ(back.spacing, v.spacing);
}

TEST(VolumeFile, CorruptionIsADataError) {
    testutil::TempDir dir("volume-bad");
    auto bytes = encode_volume(integer_volume(Shape3{2, 2, 2}, Spacing{}));
    write_bytes((dir / "short.octv").string(), bytes.substr(0, bytes.size() - 3));
    EXPECT_EQ(kind_of([&] { read_volume((dir / "short.octv").string()); }), ErrorKind::data);
    write_bytes((dir / "long.octv").string(), bytes + "x");
    EXPECT_EQ(kind_of([&] { read_volume((dir / "long.octv").string()); }), ErrorKind::data);
    auto magic = bytes;
    magic[0] = 'X';
    write_bytes((dir / "magic.octv").string(), magic);
    EXPECT_EQ(kind_of([&] { read_volume((dir / "magic.octv").string()); }), ErrorKind::data);
    EXPECT_EQ(kind_of([&] { read_volume((dir / "absent.octv").string()); }), ErrorKind::data);
}

TEST(MaskFile, OrganMasksRoundTrip) {
    CounterRng rng(1, "io", "masks");
    const Shape3 s{2, 3, 4};
    std::vector<MaskGrid> organs;
    for (int o = 0; o < 3; ++o) {
        MaskGrid m(s);
        for (auto& v : m.values()) v = rng.bernoulli(0.4);
        organs.push_back(m);
    }
    const auto f = decode_masks(ByteReader(encode_organ_masks(organs, {4, 9, 2}), "mem"));
    EXPECT_EQ(f.shape, s);
    EXPECT_EQ(f.organ_ids, (std::vector<std::uint16_t>{4, 9, 2}));
    EXPECT_EQ(f.organs, organs);
    EXPECT_FALSE(f.classes.has_value());
}

TEST(MaskFile, ClassGridRoundTrip) {
    ClassGrid c(Shape3{2, 2, 3});
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = static_cast<std::uint16_t>(i * 300);
    const auto f = decode_masks(ByteReader(encode_class_grid(c), "mem"));
    ASSERT_TRUE(f.classes.has_value());
    EXPECT_EQ(*f.classes, c);
}

TEST(FeatureFile, RoundTripBothGeometries) {
    CounterRng rng(2, "io", "features");
    for (const auto& g : {LatticeGeometry::voxel(Shape3{2, 3, 2}), LatticeGeometry::token(2, 8, 4)}) {
        const FeatureLattice f(g, testutil::random_matrix(rng, g.size(), 5));
        const auto back = decode_features(ByteReader(encode_features(f), "mem"));
        EXPECT_EQ(back.geometry, g);
        EXPECT_EQ(back.features.values(), f.features.values());
    }
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto schema = LabelSchema::load(ORGANPOOL_SOURCE_DIR "/schemas/ctrate_chest.schema");
    for (auto mode : {HeadMode::gap, HeadMode::global, HeadMode::masked, HeadMode::masked_osf}) {
        const std::vector<ScalarKind> sc = mode == HeadMode::masked_osf
                                               ? std::vector<ScalarKind>{ScalarKind::volume, ScalarKind::border}
                                               : std::vector<ScalarKind>{};
        HeadParams p(HeadConfig::from_schema(schema, mode, 6, sc, OsfHead::mlp, mode == HeadMode::gap ? 0 : 4));
        p.initialize(25);
        const auto bytes = encode_checkpoint(p, schema.hash());
        const auto ck = decode_checkpoint(ByteReader(bytes, "mem"), schema.hash());
        EXPECT_EQ(ck.schema_hash, schema.hash());
        EXPECT_EQ(head_config_text(ck.params.config), head_config_text(p.config));
        ASSERT_EQ(ck.params.tensors.size(), p.tensors.size());
        for (std::size_t k = 0; k < p.tensors.size(); ++k) {
            EXPECT_EQ(ck.params.tensors[k].name, p.tensors[k].name);
            EXPECT_EQ(ck.params.tensors[k].values, p.tensors[k].values);
        }
        EXPECT_EQ(encode_checkpoint(ck.params, ck.schema_hash), bytes);
    }
}

TEST(Checkpoint, SchemaHashMismatchIsRejected) {
    const auto chest = LabelSchema::load(ORGANPOOL_SOURCE_DIR "/schemas/ctrate_chest.schema");
    const auto abdomen = LabelSchema::load(ORGANPOOL_SOURCE_DIR "/schemas/merlin_abdomen.schema");
    EXPECT_NE(chest.hash(), abdomen.hash());
    HeadParams p(HeadConfig::from_schema(chest, HeadMode::masked, 4));
    const auto bytes = encode_checkpoint(p, chest.hash());
    EXPECT_EQ(kind_of([&] { decode_checkpoint(ByteReader(bytes, "mem"), abdomen.hash()); }), ErrorKind::schema);
    EXPECT_NO_THROW(decode_checkpoint(ByteReader(bytes, "mem")));
}

TEST(Checkpoint, TruncationIsADataError) {
    const auto chest = LabelSchema::load(ORGANPOOL_SOURCE_DIR "/schemas/ctrate_chest.schema");
    HeadParams p(HeadConfig::from_schema(chest, HeadMode::global, 4));
    const auto bytes = encode_checkpoint(p, 7);
    EXPECT_EQ(kind_of([&] { decode_checkpoint(ByteReader(bytes.substr(0, bytes.size() / 2), "mem")); }), ErrorKind::data);
}

TEST(HeadConfigText, RoundTrip) {
    const auto schema = LabelSchema::load(ORGANPOOL_SOURCE_DIR "/schemas/merlin_abdomen.schema");
    const auto c = HeadConfig::from_schema(schema, HeadMode::masked_osf, 12, {ScalarKind::hu}, OsfHead::affine, 9);
    EXPECT_EQ(head_config_text(parse_head_config(head_config_text(c))), head_config_text(c));
}

TEST(Manifest, RoundTripAndValidation) {
    Manifest m;
    m.schema = "s.schema";
    m.lattice.geometry = LatticeGeometry::token(3, 16, 4);
    m.lattice.tri_first = 2;
    m.lattice.tri_stride = 3;
    m.records.push_back({"a", "train", "a.octf", "a.octv", "a.octm", {1, 0, -1}});
    m.records.push_back({"b", "test", "", "b.octv", "b.octm", {0, 0, 1}});
    const auto j = nlohmann::json::parse(manifest_json(m).dump());
    EXPECT_EQ(parse_manifest(j, 3), m);

    const auto msg = message_of([&] { parse_manifest(j, 4); });
    EXPECT_NE(msg.find("study 'a'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("targets"), std::string::npos) << msg;

    auto dup = j;
    dup["studies"][1]["id"] = "a";
    EXPECT_EQ(kind_of([&] { parse_manifest(dup); }), ErrorKind::data);
    auto split = j;
    split["studies"][0]["split"] = "holdout";
    EXPECT_EQ(kind_of([&] { parse_manifest(split); }), ErrorKind::data);
    auto target = j;
    target["studies"][0]["targets"][0] = 2;
    EXPECT_EQ(kind_of([&] { parse_manifest(target); }), ErrorKind::data);
}

TEST(Dataset, MissingFilesAreNamed) {
    testutil::TempDir dir("dataset");
    auto spec = testutil::tiny_synth();
    synth_generate(spec, dir.path());
    EXPECT_NO_THROW(open_dataset(dir.path()));
    fs::remove(dir / "studies/s00003.octm");
    const auto msg = message_of([&] { open_dataset(dir.path()); });
    EXPECT_NE(msg.find("s00003"), std::string::npos) << msg;
    EXPECT_NE(msg.find("masks"), std::string::npos) << msg;
}

TEST(Dataset, LoadsMergedOrgansAndFeatures) {
    testutil::TempDir dir("dataset-load");
    const auto spec = testutil::tiny_synth();
    synth_generate(spec, dir.path());
    const auto ds = open_dataset(dir.path());
    EXPECT_EQ(ds.split("train").size(), spec.n_train);
    EXPECT_EQ(ds.split("val").size(), spec.n_val);
    EXPECT_EQ(ds.split("test").size(), spec.n_test);
    const auto s = load_study(ds, ds.manifest.records[0], true);
    EXPECT_EQ(s.organs.size(), spec.organs);
    EXPECT_EQ(s.volume.shape(), spec.volume);
    ASSERT_TRUE(s.features.has_value());
    EXPECT_EQ(s.features->rows(), ds.manifest.lattice.geometry.size());
    EXPECT_EQ(s.features->cols(), spec.dim);
    for (const auto& m : s.organs) EXPECT_GT(std::count(m.values().begin(), m.values().end(), 1), 0);
}

TEST(Dataset, RegionsContainTheirMasks) {
    testutil::TempDir dir("dataset-region");
    synth_generate(testutil::tiny_synth(), dir.path());
    const auto ds = open_dataset(dir.path());
    const auto s = load_study(ds, ds.manifest.records[1], false);
    const auto mask = organ_regions(s, ds.schema, {Region::mask, false});
    const auto box = organ_regions(s, ds.schema, {Region::bbox, false});
    for (std::size_t o = 0; o < s.organs.size(); ++o) {
        std::size_t organ = 0, dilated = 0, boxed = 0;
        for (std::size_t i = 0; i < s.organs[o].size(); ++i) {
            if (s.organs[o][i]) {
                ++organ;
                EXPECT_EQ(mask.pooling[o][i], 1);
            }
            if (mask.pooling[o][i]) {
                ++dilated;
                EXPECT_EQ(box.pooling[o][i], 1);
            }
            boxed += box.pooling[o][i];
        }
        EXPECT_LE(organ, dilated);
        EXPECT_LE(dilated, boxed);
        EXPECT_EQ(mask.raw[o].volume_mm3, box.raw[o].volume_mm3);
        EXPECT_EQ(mask.raw[o].mean_hu, box.raw[o].mean_hu);
    }
}

TEST(Synth, DefaultPrevalenceNearHalf) {
    testutil::TempDir dir("synth-prev");
    const SynthSpec spec;
    synth_generate(spec, dir.path());
    const auto ds = open_dataset(dir.path());
    for (const auto& p : prevalence(ds)) {
        ASSERT_TRUE(p.positive_rate().has_value()) << p.label;
        EXPECT_NEAR(*p.positive_rate(), 0.5, 0.05) << p.label;
    }
    const auto text = prevalence_text(prevalence(ds));
    EXPECT_EQ(text.substr(0, text.find('\n')), "label,positives,negatives,missing,positive_rate");
}

TEST(Synth, GenerationIsByteReproducible) {
    testutil::TempDir a("synth-a"), b("synth-b");
    const auto spec = testutil::tiny_synth();
    synth_generate(spec, a.path());
    synth_generate(spec, b.path());
    for (const auto& e : fs::recursive_directory_iterator(a.path())) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), a.path());
        EXPECT_EQ(testutil::slurp(e.path()), testutil::slurp(b.path() / rel)) << rel;
    }
    auto other = spec;
    other.seed = 26;
    testutil::TempDir c("synth-c");
    synth_generate(other, c.path());
    EXPECT_NE(testutil::slurp(a / "studies/s00000.octf"), testutil::slurp(c / "studies/s00000.octf"));
}

TEST(Synth, SchemaAndSizeLabel) {
    const SynthSpec spec;
    const auto schema = synth_schema(spec);
    EXPECT_EQ(schema.label_count(), spec.label_count());
    EXPECT_EQ(schema.labels[synth_size_label(spec)], "organ1_enlarged");
    const auto dirs = synth_directions(spec);
    for (std::size_t i = 0; i < dirs.size(); ++i)
        for (std::size_t j = 0; j < dirs.size(); ++j) EXPECT_NEAR(dot(dirs[i], dirs[j]), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(Synth, SpecValidation) {
    KeyValues kv;
    kv.set("n_train", "1");
    EXPECT_EQ(kind_of([&] { SynthSpec::from_config(kv); }), ErrorKind::config);
    KeyValues small;
    small.set("volume", "4,6,6");
    small.set("lattice", "2,3,3");
    EXPECT_EQ(kind_of([&] { SynthSpec::from_config(small); }), ErrorKind::geometry);
    KeyValues ok;
    ok.set("signal", "0");
    ok.set("labels_per_organ", "1,1,1,1");
    const auto s = SynthSpec::from_config(ok);
    EXPECT_EQ(s.signal, 0.0);
    EXPECT_EQ(s.label_count(), 6u);
}
