// Planted-signal synthetic studies. Each organ is a box in its own cell of
// the axial plane; organ labels plant a fixed direction into part of the
// organ's lattice rows, distractors plant the same direction off-organ
// independently of the label, and one organ carries a size-driven label.
#pragma once

#include <filesystem>

#include "organpool/dataset.hpp"

namespace organpool {

struct SynthSpec {
    std::size_t n_train = 400;
    std::size_t n_val = 100;
    std::size_t n_test = 200;
    Shape3 volume{8, 16, 16};
    Spacing spacing{2.0, 1.0, 1.0};
    Shape3 lattice{4, 8, 8};
    std::size_t dim = 16;
    std::size_t organs = 4;
    std::vector<std::size_t> labels_per_organ{2, 2, 1, 1};
    std::size_t other_labels = 2;
    std::size_t size_organ = 1;  // its last label is driven by organ size
    double signal = 1.0;
    double distractor = 1.0;
    double missing_rate = 0.1;
    double border_rate = 0.3;  // chance the last organ is pushed against the edge
    double dilation_mm = 1.0;
    std::uint64_t seed = 25;

    std::size_t label_count() const {
        std::size_t n = other_labels;
        for (auto k : labels_per_organ) n += k;
        return n;
    }
    std::size_t grid_cols() const {
        return static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(organs))));
    }
    std::size_t grid_rows() const { return (organs + grid_cols() - 1) / grid_cols(); }
    std::size_t cell_h() const { return volume.h / grid_rows(); }
    std::size_t cell_w() const { return volume.w / grid_cols(); }
    std::size_t base_extent() const { return std::min(cell_h(), cell_w()) * 5 / 8; }
    std::size_t size_growth() const { return static_cast<std::size_t>(std::lround(2.0 * std::max(signal, 0.0))); }

    void validate() const {
        if (n_train < 2 || n_val < 1 || n_test < 1) fail(ErrorKind::config, "synth needs n_train >= 2, n_val >= 1, n_test >= 1");
        if (organs < 1) fail(ErrorKind::config, "synth needs at least one organ");
        if (labels_per_organ.size() != organs) fail(ErrorKind::config, "labels_per_organ must list one count per organ");
        if (other_labels < 1) fail(ErrorKind::config, "synth needs at least one 'other' label");
        if (size_organ >= organs || labels_per_organ[size_organ] < 1) {
            fail(ErrorKind::config, "size_organ must name an organ with at least one label");
        }
        for (double r : {missing_rate, border_rate}) {
            if (!(r >= 0.0 && r <= 1.0)) fail(ErrorKind::config, "synth rates must lie in [0, 1]");
        }
        if (!(signal >= 0.0) || !(distractor >= 0.0)) fail(ErrorKind::config, "signal and distractor must be >= 0");
        if (label_count() > dim) fail(ErrorKind::config, "need dim >= label count for orthogonal label directions");
        if (volume.d < 3) fail(ErrorKind::geometry, "synth volume needs depth >= 3");
        if (lattice.d > volume.d || lattice.h > volume.h || lattice.w > volume.w) {
            fail(ErrorKind::geometry, "lattice is finer than the volume");
        }
        if (base_extent() < 2 || base_extent() + 1 + size_growth() > std::min(cell_h(), cell_w())) {
            fail(ErrorKind::geometry, "organ layout does not fit: cells of " + std::to_string(cell_h()) + "x" +
                                          std::to_string(cell_w()) + " voxels cannot hold organs of up to " +
                                          std::to_string(base_extent() + 1 + size_growth()));
        }
    }

    static SynthSpec from_config(const KeyValues& kv) {
        SynthSpec s;
        auto extents = [&](const std::string& key, Shape3 fallback) {
            if (!kv.has(key)) return fallback;
            const auto parts = split(kv.get(key, ""), ',');
            if (parts.size() != 3) fail(ErrorKind::config, "key '" + key + "' needs three comma-separated extents");
            try {
                return Shape3{std::stoul(parts[0]), std::stoul(parts[1]), std::stoul(parts[2])};
            } catch (const std::exception&) {
                fail(ErrorKind::config, "key '" + key + "' has a non-integer extent");
            }
        };
        auto count = [&](const std::string& key, std::size_t fallback) {
            const long v = kv.get_int(key, static_cast<long>(fallback));
            if (v < 0) fail(ErrorKind::config, "key '" + key + "' must be >= 0");
            return static_cast<std::size_t>(v);
        };
        s.n_train = count("n_train", s.n_train);
        s.n_val = count("n_val", s.n_val);
        s.n_test = count("n_test", s.n_test);
        s.volume = extents("volume", s.volume);
        s.lattice = extents("lattice", s.lattice);
        if (kv.has("spacing")) {
            const auto parts = split(kv.get("spacing", ""), ',');
            if (parts.size() != 3) fail(ErrorKind::config, "key 'spacing' needs three values");
            KeyValues tmp;
            tmp.set("z", parts[0]);
            tmp.set("y", parts[1]);
            tmp.set("x", parts[2]);
            s.spacing = Spacing{tmp.get_double("z", 1), tmp.get_double("y", 1), tmp.get_double("x", 1)};
        }
        s.dim = count("dim", s.dim);
        s.organs = count("organs", s.organs);
        if (kv.has("labels_per_organ")) {
            s.labels_per_organ.clear();
            for (const auto& tok : split(kv.get("labels_per_organ", ""), ',')) {
                KeyValues tmp;
                tmp.set("n", tok);
                s.labels_per_organ.push_back(static_cast<std::size_t>(tmp.get_int("n", 0)));
            }
        }
        s.other_labels = count("other_labels", s.other_labels);
        s.size_organ = count("size_organ", s.size_organ);
        s.signal = kv.get_double("signal", s.signal);
        s.distractor = kv.get_double("distractor", s.distractor);
        s.missing_rate = kv.get_double("missing_rate", s.missing_rate);
        s.border_rate = kv.get_double("border_rate", s.border_rate);
        s.dilation_mm = kv.get_double("dilation_mm", s.dilation_mm);
        s.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long>(s.seed)));
        s.validate();
        return s;
    }
};

inline std::string synth_group_name(std::size_t o) { return "organ" + std::to_string(o); }

/// Labels in organ order, then "other" labels. The size-driven label is the
/// last label of `size_organ`.
inline LabelSchema synth_schema(const SynthSpec& spec) {
    LabelSchema s;
    for (std::size_t o = 0; o < spec.organs; ++o) {
        const std::string g = synth_group_name(o);
        for (std::size_t k = 0; k < spec.labels_per_organ[o]; ++k) {
            const bool size_label = o == spec.size_organ && k + 1 == spec.labels_per_organ[o];
            s.labels.push_back(g + (size_label ? "_enlarged" : "_finding" + std::to_string(k)));
            s.kappa.push_back(g);
        }
        s.merge_map.push_back(RawClass{static_cast<std::uint16_t>(o + 1), g + "_raw", g});
        s.dilation_mm.emplace_back(g, spec.dilation_mm);
    }
    for (std::size_t k = 0; k < spec.other_labels; ++k) {
        s.labels.push_back("other_finding" + std::to_string(k));
        s.kappa.push_back(kOtherGroup);
    }
    s.validate();
    return s;
}

inline std::size_t synth_size_label(const SynthSpec& spec) {
    std::size_t l = 0;
    for (std::size_t o = 0; o <= spec.size_organ; ++o) l += spec.labels_per_organ[o];
    return l - 1;
}

/// Orthonormal label directions in R^dim (Gram-Schmidt on seeded normals).
inline std::vector<std::vector<double>> synth_directions(const SynthSpec& spec) {
    CounterRng rng(spec.seed, "synth", "directions");
    std::vector<std::vector<double>> dirs;
    while (dirs.size() < spec.label_count()) {
        std::vector<double> v(spec.dim);
        for (auto& x : v) x = rng.normal();
        for (const auto& u : dirs) {
            const double p = dot(v, u);
            for (std::size_t j = 0; j < v.size(); ++j) v[j] -= p * u[j];
        }
        const double n = std::sqrt(dot(v, v));
        if (n < 1e-6) continue;
        for (auto& x : v) x /= n;
        dirs.push_back(std::move(v));
    }
    return dirs;
}

struct SynthStudy {
    std::string id;
    std::string split;
    Volume volume;
    ClassGrid classes;
    Matrix features;
    Targets truth;    // complete labels
    Targets targets;  // with missing entries
};

inline std::string synth_study_id(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%05zu", index);
    return buf;
}

inline SynthStudy synth_study(const SynthSpec& spec, std::size_t index, const std::vector<std::vector<double>>& dirs) {
    SynthStudy st;
    st.id = synth_study_id(index);
    st.split = index < spec.n_train ? "train" : (index < spec.n_train + spec.n_val ? "val" : "test");
    const std::size_t labels = spec.label_count();
    const std::size_t size_label = synth_size_label(spec);

    CounterRng lab(spec.seed, st.id, "labels");
    st.truth.resize(labels);
    for (auto& y : st.truth) y = lab.bernoulli(0.5) ? 1 : 0;

    // Organ boxes.
    CounterRng lay(spec.seed, st.id, "layout");
    std::vector<Box3> boxes;
    const std::size_t base = spec.base_extent();
    for (std::size_t o = 0; o < spec.organs; ++o) {
        std::size_t sy = base + lay.below(3) - 1;
        std::size_t sx = base + lay.below(3) - 1;
        if (o == spec.size_organ && st.truth[size_label] == 1) {
            sy += spec.size_growth();
            sx += spec.size_growth();
        }
        const std::size_t cy = (o / spec.grid_cols()) * spec.cell_h();
        const std::size_t cx = (o % spec.grid_cols()) * spec.cell_w();
        std::size_t y0 = cy + (spec.cell_h() - sy) / 2;
        std::size_t x0 = cx + (spec.cell_w() - sx) / 2;
        if (o + 1 == spec.organs && lay.bernoulli(spec.border_rate)) x0 = cx + spec.cell_w() - sx;
        if (x0 + sx > spec.volume.w) x0 = spec.volume.w - sx;
        boxes.push_back(Box3{1, spec.volume.d - 1, y0, y0 + sy, x0, x0 + sx});
    }

    // Volume and raw segmentation.
    CounterRng hu(spec.seed, st.id, "intensity");
    Grid3<double> grid(spec.volume);
    st.classes = ClassGrid(spec.volume, std::uint16_t{0});
    for (auto& v : grid.values()) v = -100.0 + 20.0 * hu.normal();
    std::size_t first_label = 0;
    for (std::size_t o = 0; o < spec.organs; ++o) {
        double level = 40.0 + 20.0 * static_cast<double>(o);
        for (std::size_t k = 0; k < spec.labels_per_organ[o]; ++k) {
            const std::size_t l = first_label + k;
            if (l != size_label && st.truth[l] == 1) level += 15.0 * spec.signal;
        }
        const auto& b = boxes[o];
        for (std::size_t z = b.z0; z < b.z1; ++z)
            for (std::size_t y = b.y0; y < b.y1; ++y)
                for (std::size_t x = b.x0; x < b.x1; ++x) {
                    grid.at(z, y, x) = level + 10.0 * hu.normal();
                    st.classes.at(z, y, x) = static_cast<std::uint16_t>(o + 1);
                }
        first_label += spec.labels_per_organ[o];
    }
    st.volume = Volume(std::move(grid), spec.spacing);

    // Features.
    const auto geometry = LatticeGeometry::voxel(spec.lattice);
    const std::size_t rows = geometry.size();
    CounterRng feat(spec.seed, st.id, "features");
    st.features = Matrix(rows, spec.dim);
    for (auto& v : st.features.values()) v = feat.normal();
    auto plant = [&](std::size_t row, std::size_t label, double amount) {
        auto r = st.features.row(row);
        for (std::size_t j = 0; j < spec.dim; ++j) r[j] += amount * dirs[label][j];
    };

    CounterRng pl(spec.seed, st.id, "plant");
    first_label = 0;
    for (std::size_t o = 0; o < spec.organs; ++o) {
        MaskGrid organ(spec.volume);
        for (std::size_t i = 0; i < organ.size(); ++i) organ[i] = st.classes[i] == o + 1;
        const auto inside = project_mask_to_lattice(organ, geometry);
        const auto support = project_mask_to_lattice(dilate_metric(organ, spec.dilation_mm, spec.spacing), geometry);
        std::vector<std::size_t> in_rows, out_rows;
        for (std::size_t i = 0; i < rows; ++i) {
            if (inside[i]) in_rows.push_back(i);
            if (!support[i]) out_rows.push_back(i);
        }
        for (std::size_t k = 0; k < spec.labels_per_organ[o]; ++k) {
            const std::size_t l = first_label + k;
            if (l == size_label) continue;
            if (st.truth[l] == 1 && !in_rows.empty()) {
                bool any = false;
                for (auto i : in_rows) {
                    if (pl.bernoulli(0.5)) {
                        plant(i, l, spec.signal);
                        any = true;
                    }
                }
                if (!any) plant(in_rows[pl.below(in_rows.size())], l, spec.signal);
            }
            if (pl.bernoulli(0.5) && !out_rows.empty()) {
                const std::size_t m = std::min(out_rows.size(), std::max<std::size_t>(1, (in_rows.size() + 1) / 2));
                const auto perm = pl.permutation(out_rows.size());
                for (std::size_t j = 0; j < m; ++j) plant(out_rows[perm[j]], l, spec.distractor);
            }
        }
        first_label += spec.labels_per_organ[o];
    }
    for (std::size_t l = first_label; l < labels; ++l) {
        if (st.truth[l] != 1) continue;
        for (std::size_t i = 0; i < rows; ++i) plant(i, l, 0.25 * spec.signal);
    }

    CounterRng miss(spec.seed, st.id, "missing");
    st.targets = st.truth;
    for (auto& y : st.targets)
        if (miss.bernoulli(spec.missing_rate)) y = -1;
    return st;
}

/// Writes schema, per-study OCTV/OCTM/OCTF files and the manifest under `root`.
inline Manifest synth_generate(const SynthSpec& spec, const std::filesystem::path& root) {
    spec.validate();
    std::filesystem::create_directories(root / "studies");
    const auto schema = synth_schema(spec);
    write_text_file((root / "synth.schema").string(), schema.to_text());
    const auto dirs = synth_directions(spec);
    Manifest m;
    m.schema = "synth.schema";
    m.lattice.geometry = LatticeGeometry::voxel(spec.lattice);
    const std::size_t n = spec.n_train + spec.n_val + spec.n_test;
    for (std::size_t i = 0; i < n; ++i) {
        const auto st = synth_study(spec, i, dirs);
        StudyRecord r;
        r.id = st.id;
        r.split = st.split;
        r.volume = "studies/" + st.id + ".octv";
        r.masks = "studies/" + st.id + ".octm";
        r.features = "studies/" + st.id + ".octf";
        r.targets = st.targets;
        write_bytes((root / r.volume).string(), encode_volume(st.volume));
        write_bytes((root / r.masks).string(), encode_class_grid(st.classes));
        write_bytes((root / r.features).string(), encode_features(FeatureLattice(m.lattice.geometry, st.features)));
        m.records.push_back(std::move(r));
    }
    write_dataset_manifest(root, m);
    return m;
}

}  // namespace organpool
