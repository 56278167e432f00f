#include <gtest/gtest.h>

#include "support.hpp"

using namespace organpool;

namespace {

const std::string kSchemaDir = ORGANPOOL_SOURCE_DIR "/schemas/";

LabelSchema chest() { return LabelSchema::load(kSchemaDir + "ctrate_chest.schema"); }

std::uint16_t class_id(const LabelSchema& s, const std::string& name) {
    for (const auto& c : s.merge_map)
        if (c.name == name) return c.id;
    ADD_FAILURE() << "no class " << name;
    return 0;
}

MaskGrid single_voxel(Shape3 s, std::size_t z, std::size_t y, std::size_t x) {
    MaskGrid m(s);
    m.at(z, y, x) = 1;
    return m;
}

std::size_t count(const MaskGrid& m) { return static_cast<std::size_t>(std::count(m.values().begin(), m.values().end(), 1)); }

bool subset(const MaskGrid& a, const MaskGrid& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] && !b[i]) return false;
    return true;
}

}  // namespace

TEST(Schema, ChestTableLoads) {
    const auto s = chest();
    EXPECT_EQ(s.label_count(), 18u);
    EXPECT_EQ(s.group_count(), 4u);
    EXPECT_EQ(s.dilation(*s.group_index("stomach_esophagus")), 1.0);
    EXPECT_EQ(s.dilation(*s.group_index("lung")), 2.0);
    EXPECT_EQ(s.other_labels().size(), 2u);
}

TEST(Schema, AbdomenTableLoads) {
    const auto s = LabelSchema::load(kSchemaDir + "merlin_abdomen.schema");
    EXPECT_EQ(s.label_count(), 30u);
    EXPECT_EQ(s.group_count(), 13u);
    EXPECT_EQ(s.dilation(*s.group_index("kidneys")), 5.0);
    EXPECT_EQ(s.dilation(*s.group_index("bones")), 0.5);
    EXPECT_EQ(s.other_labels().size(), 5u);
}

TEST(Schema, TextRoundTripKeepsHash) {
    const auto s = chest();
    const auto again = LabelSchema::parse(s.to_text());
    EXPECT_EQ(again.to_text(), s.to_text());
    EXPECT_EQ(again.hash(), s.hash());
}

TEST(Schema, Rejections) {
    const std::string base = "[labels]\na\n\n[kappa]\na = g\n\n[merge_map]\n1 g_raw = g\n\n[dilation_mm]\ng = 1\n";
    EXPECT_NO_THROW(LabelSchema::parse(base));
    auto bad = [](const std::string& text) {
        try {
            LabelSchema::parse(text);
        } catch (const Error& e) {
            return e.kind() == ErrorKind::schema;
        }
        return false;
    };
    EXPECT_TRUE(bad("[labels]\na\n\n[kappa]\na = nowhere\n\n[merge_map]\n1 g_raw = g\n\n[dilation_mm]\ng = 1\n"));
    EXPECT_TRUE(bad("[labels]\na\n\n[kappa]\n\n[merge_map]\n1 g_raw = g\n\n[dilation_mm]\ng = 1\n"));
    EXPECT_TRUE(bad("[labels]\na\na\n\n[kappa]\na = g\n\n[merge_map]\n1 g_raw = g\n\n[dilation_mm]\ng = 1\n"));
    EXPECT_TRUE(bad("[labels]\na\n\n[kappa]\na = g\n\n[merge_map]\n0 g_raw = g\n\n[dilation_mm]\ng = 1\n"));
    EXPECT_TRUE(bad("[labels]\na\n\n[kappa]\na = g\n\n[merge_map]\n1 g_raw = g\n\n[dilation_mm]\ng = -1\n"));
    EXPECT_TRUE(bad("[labels]\na\n\n[kappa]\na = g\n\n[merge_map]\n1 g_raw = g\n\n[dilation_mm]\ng = 1\nother = 1\n"));
}

TEST(MergeClasses, LobesUniteIntoLung) {
    const auto s = chest();
    ClassGrid raw(Shape3{1, 2, 2}, std::uint16_t{0});
    raw.at(0, 0, 0) = class_id(s, "lung_upper_lobe_left");
    raw.at(0, 1, 1) = class_id(s, "lung_lower_lobe_right");
    const auto r = merge_classes(raw, s);
    const auto& lung = r.groups[*s.group_index("lung")];
    EXPECT_EQ(lung.at(0, 0, 0), 1);
    EXPECT_EQ(lung.at(0, 1, 1), 1);
    EXPECT_EQ(count(lung), 2u);
}

TEST(MergeClasses, StomachGoesToItsGroupOnly) {
    const auto s = chest();
    ClassGrid raw(Shape3{1, 1, 3}, std::uint16_t{0});
    raw.at(0, 0, 1) = class_id(s, "stomach");
    const auto r = merge_classes(raw, s);
    for (std::size_t o = 0; o < s.group_count(); ++o) {
        EXPECT_EQ(count(r.groups[o]), s.group_name(o) == "stomach_esophagus" ? 1u : 0u) << s.group_name(o);
    }
}

TEST(MergeClasses, BackgroundAndUnknownIds) {
    const auto s = chest();
    ClassGrid raw(Shape3{2, 2, 2}, std::uint16_t{0});
    raw.at(1, 1, 1) = 999;
    const auto r = merge_classes(raw, s);
    for (const auto& g : r.groups) EXPECT_EQ(count(g), 0u);
    EXPECT_EQ(r.unknown_voxels, 1u);
    EXPECT_EQ(r.unknown_ids, (std::vector<std::uint16_t>{999}));
}

TEST(Dilation, ZeroRadiusIsIdentity) {
    const auto m = single_voxel(Shape3{3, 3, 3}, 1, 1, 1);
    EXPECT_EQ(dilate_metric(m, 0.0, {}), m);
}

TEST(Dilation, UnitRadiusIsSixNeighbourCross) {
    const auto d = dilate_metric(single_voxel(Shape3{3, 3, 3}, 1, 1, 1), 1.0, {1, 1, 1});
    EXPECT_EQ(count(d), 7u);
    EXPECT_EQ(d.at(0, 1, 1), 1);
    EXPECT_EQ(d.at(1, 0, 0), 0);
}

TEST(Dilation, ThickSlicesBlockZNeighbours) {
    const auto d = dilate_metric(single_voxel(Shape3{3, 5, 5}, 1, 2, 2), 2.0, {3, 1, 1});
    EXPECT_EQ(count(d), 13u);
    for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 5; ++x) {
            EXPECT_EQ(d.at(0, y, x), 0);
            EXPECT_EQ(d.at(2, y, x), 0);
        }
}

TEST(Dilation, EmptyMaskStaysEmpty) { EXPECT_EQ(count(dilate_metric(MaskGrid(Shape3{4, 4, 4}), 3.0, {})), 0u); }

TEST(Dilation, NegativeRadiusRejected) { EXPECT_THROW(dilate_metric(MaskGrid(Shape3{1, 1, 1}), -1.0, {}), Error); }

TEST(Dilation, MatchesBruteForceAndIsMonotone) {
    CounterRng rng(8, "dilate", "cases");
    const std::vector<Spacing> spacings{{1, 1, 1}, {2.5, 0.7, 0.7}, {1, 1.5, 0.5}};
    for (int trial = 0; trial < 12; ++trial) {
        const Shape3 s{3 + rng.below(6), 3 + rng.below(6), 3 + rng.below(6)};
        MaskGrid m(s);
        for (auto& v : m.values()) v = rng.bernoulli(0.05);
        const auto& sp = spacings[static_cast<std::size_t>(trial) % spacings.size()];
        MaskGrid prev = m;
        for (double r : {0.0, 0.6, 1.0, 2.0, 3.5}) {
            const auto d = dilate_metric(m, r, sp);
            EXPECT_EQ(d, oracle::brute_dilate(m, r, sp)) << "r=" << r;
            EXPECT_TRUE(subset(prev, d));
            prev = d;
        }
    }
}

TEST(Projection, SaturationAndEmptiness) {
    const Shape3 s{6, 8, 8};
    const auto tokens = LatticeGeometry::token(2, 8, 2);
    const std::vector<std::size_t> centers{1, 4};
    for (const auto& g : {LatticeGeometry::voxel(Shape3{3, 4, 4}), tokens}) {
        const auto c = g.kind == LatticeKind::token ? centers : std::vector<std::size_t>{};
        for (auto v : project_mask_to_lattice(MaskGrid(s, 1), g, c)) EXPECT_EQ(v, 1);
        for (auto v : project_mask_to_lattice(MaskGrid(s, 0), g, c)) EXPECT_EQ(v, 0);
    }
}

TEST(Projection, LeftHalfMaskLightsLeftTokens) {
    MaskGrid m(Shape3{3, 4, 4});
    for (std::size_t z = 0; z < 3; ++z)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 2; ++x) m.at(z, y, x) = 1;
    const auto g = LatticeGeometry::token(1, 4, 2);
    const auto ind = project_mask_to_lattice(m, g, std::vector<std::size_t>{1});
    EXPECT_EQ(ind, (std::vector<std::uint8_t>{1, 0, 1, 0}));
}

TEST(Projection, TokenCentersMustMatchSlabs) {
    EXPECT_THROW(project_mask_to_lattice(MaskGrid(Shape3{4, 4, 4}), LatticeGeometry::token(2, 4, 2), std::vector<std::size_t>{1}),
                 Error);
}

TEST(Projection, VoxelEquivariantUnderAugmentation) {
    // Odd source/lattice ratios keep nearest-neighbour cell centres symmetric.
    CounterRng rng(9, "proj", "voxel");
    const Shape3 s{9, 9, 9};
    const auto g = LatticeGeometry::voxel(Shape3{3, 3, 3});
    for (int trial = 0; trial < 20; ++trial) {
        MaskGrid m(s);
        for (auto& v : m.values()) v = rng.bernoulli(0.3);
        const AugmentParams p{static_cast<int>(rng.below(4)), rng.bernoulli(0.5), rng.bernoulli(0.5), rng.bernoulli(0.5)};
        const auto moved = project_mask_to_lattice(rot90_flip(m, p), g);
        const MaskGrid lat(g.cells, project_mask_to_lattice(m, g));
        EXPECT_EQ(moved, rot90_flip(lat, p).values());
    }
}

TEST(Projection, TokenEquivariantInPlane) {
    CounterRng rng(10, "proj", "token");
    const Shape3 s{4, 9, 9};
    const auto g = LatticeGeometry::token(2, 9, 3);
    const std::vector<std::size_t> centers{1, 2};
    for (int trial = 0; trial < 20; ++trial) {
        MaskGrid m(s);
        for (auto& v : m.values()) v = rng.bernoulli(0.4);
        const AugmentParams p{static_cast<int>(rng.below(4)), false, rng.bernoulli(0.5), rng.bernoulli(0.5)};
        const auto moved = project_mask_to_lattice(rot90_flip(m, p), g, centers);
        const MaskGrid lat(g.cells, project_mask_to_lattice(m, g, centers));
        EXPECT_EQ(moved, rot90_flip(lat, p).values());
    }
}

TEST(BoundingBox, Examples) {
    const Shape3 s{2, 3, 3};
    MaskGrid corners(s);
    corners.at(0, 0, 0) = 1;
    corners.at(1, 2, 2) = 1;
    EXPECT_EQ(count(bounding_box_region(corners)), s.size());
    const auto one = single_voxel(s, 1, 1, 1);
    EXPECT_EQ(bounding_box_region(one), one);
    MaskGrid ell(Shape3{1, 2, 2});
    ell.at(0, 0, 0) = ell.at(0, 1, 0) = ell.at(0, 1, 1) = 1;
    EXPECT_EQ(count(bounding_box_region(ell)), 4u);
    EXPECT_EQ(count(bounding_box_region(MaskGrid(s))), 0u);
}

TEST(BoundingBox, ContainsSourceOnLattice) {
    CounterRng rng(11, "bbox", "lattice");
    const auto g = LatticeGeometry::voxel(Shape3{4, 5, 6});
    for (int trial = 0; trial < 50; ++trial) {
        const auto ind = testutil::random_mask(rng, g.size(), 0.1);
        const auto box = bounding_box_region(ind, g);
        for (std::size_t i = 0; i < ind.size(); ++i)
            if (ind[i]) {
                EXPECT_EQ(box[i], 1);
            }
    }
}

TEST(OrganScalars, EmptyMaskConvention) {
    const Volume v(Grid3<double>(Shape3{3, 3, 3}, 50.0), {});
    const auto r = raw_organ_scalars(v, MaskGrid(v.shape()));
    EXPECT_EQ(r.volume_mm3, 0.0);
    EXPECT_EQ(r.mean_hu, 0.0);
    EXPECT_FALSE(r.border);
}

TEST(OrganScalars, FullMaskTouchesBorder) {
    const Volume v(Grid3<double>(Shape3{3, 3, 3}, 50.0), {2, 1, 1});
    const auto r = raw_organ_scalars(v, MaskGrid(v.shape(), 1));
    EXPECT_TRUE(r.border);
    EXPECT_EQ(r.volume_mm3, 27.0 * 2.0);
}

TEST(OrganScalars, ClippedMeanHu) {
    Grid3<double> g(Shape3{3, 3, 3}, -1000.0);
    g.at(1, 1, 1) = -3000.0;
    const Volume v(g, {});
    MaskGrid m(v.shape());
    m.at(1, 1, 1) = m.at(1, 1, 0) = 1;
    EXPECT_EQ(raw_organ_scalars(v, m).mean_hu, -1000.0);
    EXPECT_TRUE(raw_organ_scalars(v, m).border);
    MaskGrid inner(v.shape());
    inner.at(1, 1, 1) = 1;
    EXPECT_FALSE(raw_organ_scalars(v, inner).border);
}

TEST(OrganScalars, VolumeMaskOverride) {
    const Volume v(Grid3<double>(Shape3{3, 3, 3}, 0.0), {});
    const MaskGrid big(v.shape(), 1);
    const auto small = single_voxel(v.shape(), 1, 1, 1);
    const auto r = raw_organ_scalars(v, big, &small);
    EXPECT_EQ(r.volume_mm3, 1.0);
    EXPECT_TRUE(r.border);
}

TEST(ScalarStats, TwoPointSampleStd) {
    const std::vector<std::vector<RawOrganScalars>> per{{{100.0, 0.0, false}}, {{300.0, 0.0, false}}};
    const auto st = fit_scalar_stats(per, {"o"});
    EXPECT_EQ(st.stats[0].volume_mean, 200.0);
    EXPECT_NEAR(st.stats[0].volume_std, std::sqrt(20000.0), 1e-12);
    EXPECT_EQ(st.stats[0].hu_std, kStdFloor);
}

TEST(ScalarStats, DegenerateAndAbsent) {
    const std::vector<std::vector<RawOrganScalars>> per(5, {{250.0, 40.0, true}, {0.0, 0.0, false}});
    const auto st = fit_scalar_stats(per, {"a", "b"});
    EXPECT_EQ(st.stats[0].volume_std, kStdFloor);
    EXPECT_EQ(zscore_organ_scalars(per[0][0], st.stats[0]).volume, 0.0);
    EXPECT_TRUE(st.stats[1].absent);
    EXPECT_EQ(st.stats[1].volume_mean, 0.0);
    EXPECT_FALSE(st.stats[0].absent);
    const auto again = ScalarStats::parse(st.to_text());
    EXPECT_EQ(again.to_text(), st.to_text());
    EXPECT_THROW(fit_scalar_stats({per[0]}, {"a", "b"}), Error);
}

TEST(OrganScalars, PureFunction) {
    CounterRng rng(12, "scalars", "pure");
    Grid3<double> g(Shape3{4, 4, 4});
    for (auto& v : g.values()) v = rng.uniform(-1200, 1200);
    const Volume v(g, {1.5, 0.8, 0.8});
    MaskGrid m(v.shape());
    for (auto& x : m.values()) x = rng.bernoulli(0.4);
    const OrganStat st{100.0, 30.0, 10.0, 5.0, false};
    EXPECT_EQ(compute_organ_scalars(v, m, st), compute_organ_scalars(v, m, st));
}
