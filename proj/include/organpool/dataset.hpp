// Study manifests: records, validation, prevalence reporting, and loading
// studies into head inputs (dilation, region choice, projection, scalars).
#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "organpool/io.hpp"
#include "organpool/evalcal.hpp"

namespace organpool {

struct StudyRecord {
    std::string id;
    std::string split;     // train | val | test
    std::string features;  // relative path; may be empty when a toy encoder is used
    std::string volume;
    std::string masks;
    Targets targets;

    bool operator==(const StudyRecord&) const = default;
};

/// Lattice description shared by every study in a manifest.
struct LatticeSpec {
    LatticeGeometry geometry;
    std::size_t tri_first = 1;  // token lattices only
    std::size_t tri_stride = 1;

    bool operator==(const LatticeSpec&) const = default;

    std::vector<std::size_t> centers(std::size_t depth) const {
        if (geometry.kind != LatticeKind::token) return {};
        return tri_centers(tri_first, tri_stride, geometry.slabs, depth);
    }
};

struct Manifest {
    std::string schema;  // relative path of the schema file
    LatticeSpec lattice;
    std::vector<StudyRecord> records;

    bool operator==(const Manifest&) const = default;
};

inline nlohmann::ordered_json manifest_json(const Manifest& m) {
    nlohmann::ordered_json lat;
    const auto& g = m.lattice.geometry;
    if (g.kind == LatticeKind::token) {
        lat = {{"kind", "token"},          {"slabs", g.slabs},
               {"side", g.side},           {"patch", g.patch},
               {"tri_first", m.lattice.tri_first}, {"tri_stride", m.lattice.tri_stride}};
    } else {
        lat = {{"kind", "voxel"}, {"cells", {g.cells.d, g.cells.h, g.cells.w}}};
    }
    nlohmann::ordered_json studies = nlohmann::ordered_json::array();
    for (const auto& r : m.records) {
        std::vector<int> t(r.targets.begin(), r.targets.end());
        studies.push_back({{"id", r.id},
                           {"split", r.split},
                           {"features", r.features},
                           {"volume", r.volume},
                           {"masks", r.masks},
                           {"targets", t}});
    }
    return {{"schema", m.schema}, {"lattice", lat}, {"studies", studies}};
}

/// Parses and validates a manifest against the label count.
inline Manifest parse_manifest(const nlohmann::json& j, std::optional<std::size_t> label_count = std::nullopt) {
    Manifest m;
    std::string where = "manifest";
    try {
        m.schema = j.at("schema").get<std::string>();
        const auto& lat = j.at("lattice");
        const auto kind = lat.at("kind").get<std::string>();
        if (kind == "token") {
            m.lattice.geometry = LatticeGeometry::token(lat.at("slabs").get<std::size_t>(), lat.at("side").get<std::size_t>(),
                                                        lat.at("patch").get<std::size_t>());
            m.lattice.tri_first = lat.value("tri_first", std::size_t{1});
            m.lattice.tri_stride = lat.value("tri_stride", std::size_t{1});
        } else if (kind == "voxel") {
            const auto c = lat.at("cells").get<std::vector<std::size_t>>();
            if (c.size() != 3) fail(ErrorKind::data, "manifest: voxel lattice cells need 3 extents");
            m.lattice.geometry = LatticeGeometry::voxel(Shape3{c[0], c[1], c[2]});
        } else {
            fail(ErrorKind::data, "manifest: unknown lattice kind '" + kind + "'");
        }
        std::map<std::string, int> seen;
        for (const auto& s : j.at("studies")) {
            StudyRecord r;
            r.id = s.at("id").get<std::string>();
            where = "study '" + r.id + "'";
            if (r.id.empty()) fail(ErrorKind::data, "manifest: study with empty id");
            if (seen[r.id]++) fail(ErrorKind::data, where + ": duplicate id");
            r.split = s.at("split").get<std::string>();
            if (r.split != "train" && r.split != "val" && r.split != "test") {
                fail(ErrorKind::data, where + ": field 'split' must be train|val|test, got '" + r.split + "'");
            }
            r.features = s.value("features", std::string());
            r.volume = s.at("volume").get<std::string>();
            r.masks = s.at("masks").get<std::string>();
            for (const auto& t : s.at("targets")) {
                const int v = t.get<int>();
                if (v != 0 && v != 1 && v != -1) {
                    fail(ErrorKind::data, where + ": field 'targets' has value " + std::to_string(v) + " outside {0,1,-1}");
                }
                r.targets.push_back(static_cast<std::int8_t>(v));
            }
            if (label_count && r.targets.size() != *label_count) {
                fail(ErrorKind::data, where + ": field 'targets' has " + std::to_string(r.targets.size()) +
                                          " entries, schema has " + std::to_string(*label_count) + " labels");
            }
            m.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& ex) {
        fail(ErrorKind::data, where + ": malformed field (" + std::string(ex.what()) + ")");
    }
    return m;
}

struct Dataset {
    std::filesystem::path root;
    Manifest manifest;
    LabelSchema schema;

    std::string path_of(const std::string& rel) const { return (root / rel).string(); }

    std::vector<std::size_t> split(std::string_view name) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < manifest.records.size(); ++i)
            if (manifest.records[i].split == name) out.push_back(i);
        return out;
    }
};

inline void write_dataset_manifest(const std::filesystem::path& root, const Manifest& m) {
    write_text_file((root / "manifest.json").string(), manifest_json(m).dump(1) + "\n");
}

/// Loads `root/manifest.json` and its schema; checks that every referenced
/// file exists. `schema_override` replaces the manifest's schema path.
inline Dataset open_dataset(const std::filesystem::path& root, const std::string& schema_override = "") {
    Dataset ds;
    ds.root = root;
    const std::string text = read_text_file((root / "manifest.json").string(), ErrorKind::data);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        fail(ErrorKind::data, "manifest is not valid JSON: " + std::string(ex.what()));
    }
    const Manifest probe = parse_manifest(j);
    const std::string schema_path = schema_override.empty() ? (root / probe.schema).string() : schema_override;
    ds.schema = LabelSchema::load(schema_path);
    ds.manifest = parse_manifest(j, ds.schema.label_count());
    for (const auto& r : ds.manifest.records) {
        for (const auto& [field, rel] : {std::pair{"volume", r.volume}, {"masks", r.masks}, {"features", r.features}}) {
            if (rel.empty()) {
                if (std::string_view(field) == "features") continue;
                fail(ErrorKind::data, "study '" + r.id + "': field '" + field + "' is empty");
            }
            if (!std::filesystem::exists(root / rel)) {
                fail(ErrorKind::data, "study '" + r.id + "': field '" + field + "' references missing file " + rel);
            }
        }
    }
    return ds;
}

struct LabelPrevalence {
    std::string label;
    std::size_t positives = 0, negatives = 0, missing = 0;

    Metric positive_rate() const {
        const std::size_t n = positives + negatives;
        if (n == 0) return std::nullopt;
        return static_cast<double>(positives) / static_cast<double>(n);
    }
};

inline std::vector<LabelPrevalence> prevalence(const Dataset& ds, std::string_view split = "") {
    std::vector<LabelPrevalence> out;
    for (const auto& l : ds.schema.labels) out.push_back({l});
    for (const auto& r : ds.manifest.records) {
        if (!split.empty() && r.split != split) continue;
        for (std::size_t l = 0; l < out.size(); ++l) {
            if (r.targets[l] == 1) ++out[l].positives;
            else if (r.targets[l] == 0) ++out[l].negatives;
            else ++out[l].missing;
        }
    }
    return out;
}

inline std::string prevalence_text(const std::vector<LabelPrevalence>& rows) {
    std::string out = "label,positives,negatives,missing,positive_rate\n";
    for (const auto& p : rows) {
        const auto rate = p.positive_rate();
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", rate.value_or(0.0));
        out += p.label + "," + std::to_string(p.positives) + "," + std::to_string(p.negatives) + "," +
               std::to_string(p.missing) + "," + (rate ? std::string(buf) : std::string("NA")) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// From files to head inputs.

enum class Region { mask, bbox };

inline Region parse_region(std::string_view s) {
    if (s == "mask") return Region::mask;
    if (s == "bbox") return Region::bbox;
    fail(ErrorKind::config, "unknown region '" + std::string(s) + "' (mask|bbox)");
}

inline const char* to_string(Region r) { return r == Region::mask ? "mask" : "bbox"; }

/// Voxel-level study content kept in memory so augmentation can re-derive
/// lattice indicators and scalars.
struct LoadedStudy {
    std::string id;
    Targets targets;
    Volume volume;                   // HU
    std::vector<MaskGrid> organs;    // merged, undilated, schema group order
    std::optional<Matrix> features;  // precomputed lattice features
};

inline LoadedStudy load_study(const Dataset& ds, const StudyRecord& r, bool need_features) {
    LoadedStudy s;
    s.id = r.id;
    s.targets = r.targets;
    try {
        s.volume = read_volume(ds.path_of(r.volume));
        auto mf = read_masks(ds.path_of(r.masks));
        if (mf.shape != s.volume.shape()) fail(ErrorKind::data, "mask shape differs from volume shape");
        if (mf.classes) {
            auto merged = merge_classes(*mf.classes, ds.schema);
            s.organs = std::move(merged.groups);
        } else {
            if (mf.organs.size() != ds.schema.group_count()) {
                fail(ErrorKind::data, "mask file has " + std::to_string(mf.organs.size()) + " organs, schema has " +
                                          std::to_string(ds.schema.group_count()));
            }
            s.organs = std::move(mf.organs);
        }
        if (need_features) {
            if (r.features.empty()) fail(ErrorKind::data, "field 'features' is required for precomputed features");
            auto f = read_features(ds.path_of(r.features));
            if (f.geometry != ds.manifest.lattice.geometry) fail(ErrorKind::data, "feature lattice geometry differs from manifest");
            s.features = std::move(f.features);
        }
    } catch (const Error& e) {
        throw e.within("study '" + r.id + "'");
    }
    return s;
}

struct InputOptions {
    Region region = Region::mask;
    bool undilated_volume = false;  // volume scalar from the undilated mask
};

/// Dilated (or boxed) pooling regions per organ and raw scalars.
struct OrganRegions {
    std::vector<MaskGrid> pooling;
    std::vector<RawOrganScalars> raw;
};

inline OrganRegions organ_regions(const LoadedStudy& s, const LabelSchema& schema, const InputOptions& opt) {
    OrganRegions out;
    for (std::size_t o = 0; o < s.organs.size(); ++o) {
        MaskGrid dilated = dilate_metric(s.organs[o], schema.dilation(o), s.volume.spacing);
        out.raw.push_back(raw_organ_scalars(s.volume, dilated, opt.undilated_volume ? &s.organs[o] : nullptr));
        out.pooling.push_back(opt.region == Region::bbox ? bounding_box_region(dilated) : std::move(dilated));
    }
    return out;
}

/// Raw cell patches of the [0,1]-normalized volume for a voxel lattice; every
/// cell must cover the same number of voxels.
inline Matrix extract_cell_patches(const Volume& volume, const LatticeGeometry& g) {
    if (g.kind != LatticeKind::voxel) fail(ErrorKind::geometry, "cell patches need a voxel lattice");
    const auto& s = volume.shape();
    if (s.d % g.cells.d || s.h % g.cells.h || s.w % g.cells.w) {
        fail(ErrorKind::geometry, "volume " + to_string(s) + " does not tile into lattice " + to_string(g.cells));
    }
    const Volume norm = clip_normalize_hu(volume);
    const std::size_t pd = s.d / g.cells.d, ph = s.h / g.cells.h, pw = s.w / g.cells.w;
    Matrix out(g.size(), pd * ph * pw);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto b = source_region(g, i, s);
        std::size_t k = 0;
        for (std::size_t z = b.z0; z < b.z1; ++z)
            for (std::size_t y = b.y0; y < b.y1; ++y)
                for (std::size_t x = b.x0; x < b.x1; ++x) out(i, k++) = norm.data.at(z, y, x);
    }
    return out;
}

/// Features from a (possibly untrained) toy encoder.
inline FeatureLattice toy_encoder(const Volume& volume, const LatticeGeometry& g, const HeadParams& params) {
    return FeatureLattice(g, encode_patches(params, extract_cell_patches(volume, g)));
}

inline StudyInput build_study_input(const LoadedStudy& s, const OrganRegions& regions, const LatticeSpec& lattice,
                                    const ScalarStats& stats, bool toy_encoder) {
    StudyInput in;
    const auto centers = lattice.centers(s.volume.shape().d);
    for (std::size_t o = 0; o < regions.pooling.size(); ++o) {
        in.organs.indicators.push_back(project_mask_to_lattice(regions.pooling[o], lattice.geometry, centers));
        in.organs.scalars.push_back(zscore_organ_scalars(regions.raw[o], stats.stats.at(o)));
    }
    if (toy_encoder) {
        in.lattice = extract_cell_patches(s.volume, lattice.geometry);
    } else {
        if (!s.features) fail(ErrorKind::data, "study '" + s.id + "' has no features");
        in.lattice = *s.features;
    }
    return in;
}

}  // namespace organpool
