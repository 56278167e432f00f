// Organ groups from raw segmentations: class merging, metric dilation,
// projection onto the feature lattice, bounding boxes, and organ scalars.
#pragma once

#include <cstdint>
#include <map>
#include <optional>

#include "organpool/lattice.hpp"
#include "organpool/text_config.hpp"

namespace organpool {

inline constexpr const char* kOtherGroup = "other";
inline constexpr double kStdFloor = 1e-6;

using ClassGrid = Grid3<std::uint16_t>;

struct RawClass {
    std::uint16_t id = 0;
    std::string name;
    std::string group;
};

/// Labels, their organ anchoring (kappa), the raw-class merge map (pi), and
/// per-group dilation radii. Group order is the order of [dilation_mm].
struct LabelSchema {
    std::vector<std::string> labels;
    std::vector<std::string> kappa;  // parallel to labels
    std::vector<RawClass> merge_map;
    std::vector<std::pair<std::string, double>> dilation_mm;

    std::size_t label_count() const { return labels.size(); }
    std::size_t group_count() const { return dilation_mm.size(); }
    const std::string& group_name(std::size_t o) const { return dilation_mm[o].first; }
    double dilation(std::size_t o) const { return dilation_mm[o].second; }

    std::optional<std::size_t> group_index(std::string_view name) const {
        for (std::size_t o = 0; o < dilation_mm.size(); ++o)
            if (dilation_mm[o].first == name) return o;
        return std::nullopt;
    }

    std::vector<std::size_t> labels_of_group(std::size_t o) const {
        std::vector<std::size_t> out;
        for (std::size_t l = 0; l < labels.size(); ++l)
            if (kappa[l] == group_name(o)) out.push_back(l);
        return out;
    }

    std::vector<std::size_t> other_labels() const {
        std::vector<std::size_t> out;
        for (std::size_t l = 0; l < labels.size(); ++l)
            if (kappa[l] == kOtherGroup) out.push_back(l);
        return out;
    }

    void validate() const {
        if (labels.empty()) fail(ErrorKind::schema, "schema has no labels");
        if (kappa.size() != labels.size()) fail(ErrorKind::schema, "kappa does not cover every label");
        std::map<std::string, int> seen;
        for (const auto& l : labels)
            if (seen[l]++) fail(ErrorKind::schema, "duplicate label '" + l + "'");
        std::map<std::string, int> groups;
        for (const auto& [g, r] : dilation_mm) {
            if (g == kOtherGroup) fail(ErrorKind::schema, "'other' cannot be an organ group");
            if (groups[g]++) fail(ErrorKind::schema, "duplicate dilation entry for '" + g + "'");
            if (!(r >= 0.0) || !std::isfinite(r)) fail(ErrorKind::schema, "dilation for '" + g + "' must be >= 0");
        }
        std::map<std::string, int> merged;
        std::map<std::uint16_t, int> ids;
        for (const auto& c : merge_map) {
            if (c.id == 0) fail(ErrorKind::schema, "class id 0 is reserved for background");
            if (ids[c.id]++) fail(ErrorKind::schema, "duplicate raw class id " + std::to_string(c.id));
            if (!groups.count(c.group)) fail(ErrorKind::schema, "class '" + c.name + "' maps to unknown group '" + c.group + "'");
            merged[c.group]++;
        }
        for (std::size_t l = 0; l < labels.size(); ++l) {
            const auto& g = kappa[l];
            if (g == kOtherGroup) continue;
            if (!groups.count(g)) fail(ErrorKind::schema, "label '" + labels[l] + "' anchored to unknown group '" + g + "'");
            if (!merged.count(g)) fail(ErrorKind::schema, "group '" + g + "' has no raw classes in merge_map");
        }
    }

    std::string to_text() const {
        std::string s = "[labels]\n";
        for (const auto& l : labels) s += l + "\n";
        s += "\n[kappa]\n";
        for (std::size_t l = 0; l < labels.size(); ++l) s += labels[l] + " = " + kappa[l] + "\n";
        s += "\n[merge_map]\n";
        for (const auto& c : merge_map) s += std::to_string(c.id) + " " + c.name + " = " + c.group + "\n";
        s += "\n[dilation_mm]\n";
        for (const auto& [g, r] : dilation_mm) s += g + " = " + format_double(r) + "\n";
        return s;
    }

    /// Stable identity of the schema, used to pair checkpoints with schemas.
    std::uint64_t hash() const { return fnv1a64(to_text()); }

    static LabelSchema parse(std::string_view text) {
        LabelSchema s;
        std::map<std::string, std::string> kappa_map;
        for (const auto& sec : parse_sections(text, ErrorKind::schema)) {
            const auto where = [&](const TextEntry& e) { return "[" + sec.name + "] line " + std::to_string(e.line); };
            if (sec.name.empty()) {
                if (!sec.entries.empty()) fail(ErrorKind::schema, "entries before the first section");
            } else if (sec.name == "labels") {
                for (const auto& e : sec.entries) {
                    if (e.has_value) fail(ErrorKind::schema, where(e) + ": label lines take no '='");
                    s.labels.push_back(e.key);
                }
            } else if (sec.name == "kappa") {
                for (const auto& e : sec.entries) {
                    if (!e.has_value) fail(ErrorKind::schema, where(e) + ": expected 'label = group'");
                    if (kappa_map.count(e.key)) fail(ErrorKind::schema, where(e) + ": label anchored twice");
                    kappa_map[e.key] = e.value;
                }
            } else if (sec.name == "merge_map") {
                for (const auto& e : sec.entries) {
                    const auto sp = e.key.find_first_of(" \t");
                    if (!e.has_value || sp == std::string::npos) {
                        fail(ErrorKind::schema, where(e) + ": expected 'id class_name = group'");
                    }
                    RawClass c;
                    try {
                        const long id = std::stol(e.key.substr(0, sp));
                        if (id < 0 || id > 65535) throw std::out_of_range("id");
                        c.id = static_cast<std::uint16_t>(id);
                    } catch (const std::exception&) {
                        fail(ErrorKind::schema, where(e) + ": bad class id");
                    }
                    c.name = trim(e.key.substr(sp));
                    c.group = e.value;
                    s.merge_map.push_back(std::move(c));
                }
            } else if (sec.name == "dilation_mm") {
                for (const auto& e : sec.entries) {
                    if (!e.has_value) fail(ErrorKind::schema, where(e) + ": expected 'group = mm'");
                    try {
                        s.dilation_mm.emplace_back(e.key, std::stod(e.value));
                    } catch (const std::exception&) {
                        fail(ErrorKind::schema, where(e) + ": bad dilation value");
                    }
                }
            } else {
                fail(ErrorKind::schema, "unknown section [" + sec.name + "]");
            }
        }
        for (const auto& l : s.labels) {
            auto it = kappa_map.find(l);
            if (it == kappa_map.end()) fail(ErrorKind::schema, "label '" + l + "' has no kappa entry");
            s.kappa.push_back(it->second);
            kappa_map.erase(it);
        }
        if (!kappa_map.empty()) fail(ErrorKind::schema, "kappa entry for unknown label '" + kappa_map.begin()->first + "'");
        s.validate();
        return s;
    }

    static LabelSchema load(const std::string& path) { return parse(read_text_file(path, ErrorKind::schema)); }
};

// ---------------------------------------------------------------------------

struct MergeResult {
    std::vector<MaskGrid> groups;  // schema group order
    std::size_t unknown_voxels = 0;
    std::vector<std::uint16_t> unknown_ids;
};

/// M_o = union of S_c over classes c with pi(c) = o. Unknown ids count as background.
inline MergeResult merge_classes(const ClassGrid& raw, const LabelSchema& schema) {
    std::map<std::uint16_t, std::size_t> lut;
    for (const auto& c : schema.merge_map) {
        if (auto o = schema.group_index(c.group)) lut[c.id] = *o;
    }
    MergeResult out;
    out.groups.assign(schema.group_count(), MaskGrid(raw.shape()));
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto id = raw[i];
        if (id == 0) continue;
        auto it = lut.find(id);
        if (it == lut.end()) {
            ++out.unknown_voxels;
            if (std::find(out.unknown_ids.begin(), out.unknown_ids.end(), id) == out.unknown_ids.end()) {
                out.unknown_ids.push_back(id);
            }
            continue;
        }
        out.groups[it->second][i] = 1;
    }
    std::sort(out.unknown_ids.begin(), out.unknown_ids.end());
    return out;
}

// ---------------------------------------------------------------------------
// Exact anisotropic Euclidean distance transform (separable lower envelope of
// parabolas, one pass per axis) and radius thresholding.

namespace detail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// d[q] = min_p w2 (q - p)^2 + f[p] over finite f[p]; stride-addressed.
inline void squared_edt_1d(double* data, std::size_t n, std::size_t stride, double w2, std::vector<double>& f,
                           std::vector<std::size_t>& v, std::vector<double>& z) {
    f.resize(n);
    for (std::size_t i = 0; i < n; ++i) f[i] = data[i * stride];
    v.resize(n);
    z.resize(n + 1);
    std::size_t k = 0;
    bool any = false;
    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (!any) {
            any = true;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        const double fq = f[q] + w2 * static_cast<double>(q) * static_cast<double>(q);
        double s = 0.0;
        while (true) {
            const auto p = v[k];
            const double fp = f[p] + w2 * static_cast<double>(p) * static_cast<double>(p);
            s = (fq - fp) / (2.0 * w2 * static_cast<double>(q - p));
            if (s > z[k]) break;  // z[0] = -inf ends the walk
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (!any) return;
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
        data[q * stride] = w2 * (dq * dq) + f[v[k]];
    }
}

}  // namespace detail

/// Squared physical distance (mm^2) from every voxel to the nearest set voxel.
inline Grid3<double> squared_distance_transform(const MaskGrid& mask, const Spacing& spacing) {
    const auto& s = mask.shape();
    Grid3<double> d(s, detail::kInf);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) d[i] = 0.0;
    std::vector<double> f;
    std::vector<std::size_t> v;
    std::vector<double> z;
    double* base = d.values().data();
    for (std::size_t zz = 0; zz < s.d; ++zz)
        for (std::size_t y = 0; y < s.h; ++y)
            detail::squared_edt_1d(base + d.offset(zz, y, 0), s.w, 1, spacing.x * spacing.x, f, v, z);
    for (std::size_t zz = 0; zz < s.d; ++zz)
        for (std::size_t x = 0; x < s.w; ++x)
            detail::squared_edt_1d(base + d.offset(zz, 0, x), s.h, s.w, spacing.y * spacing.y, f, v, z);
    for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x)
            detail::squared_edt_1d(base + d.offset(0, y, x), s.d, s.h * s.w, spacing.z * spacing.z, f, v, z);
    return d;
}

/// Boundary test shared by dilation and its checks: relative slack of 1e-9
/// absorbs summation-order rounding when a voxel sits exactly on the sphere.
inline bool within_radius(double squared_distance, double radius_mm) {
    const double r2 = radius_mm * radius_mm;
    return squared_distance <= r2 + 1e-9 * std::max(r2, 1.0);
}

/// Set every voxel whose anisotropic distance to the mask is <= r_mm.
inline MaskGrid dilate_metric(const MaskGrid& mask, double radius_mm, const Spacing& spacing) {
    if (!(radius_mm >= 0.0)) fail(ErrorKind::invalid_input, "dilation radius must be >= 0");
    if (radius_mm == 0.0) return mask;
    const auto d = squared_distance_transform(mask, spacing);
    MaskGrid out(mask.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = (mask[i] || within_radius(d[i], radius_mm)) ? 1 : 0;
    return out;
}

// ---------------------------------------------------------------------------
// Mask -> lattice projection (nearest neighbour).

namespace detail {

/// Nearest source index for destination cell `i` of `n_dst` over `n_src`
/// samples, sampling at cell centres.
inline std::size_t nn_source(std::size_t i, std::size_t n_dst, std::size_t n_src) {
    return std::min(n_src - 1, ((2 * i + 1) * n_src) / (2 * n_dst));
}

/// Pixel nearest the centre of patch `cell`: round((cell + 0.5) P - 0.5),
/// halves rounding up.
inline std::size_t patch_center(std::size_t cell, std::size_t patch) { return cell * patch + patch / 2; }

}  // namespace detail

/// Binary indicators m_i over the lattice for one organ grid mask.
/// Token lattices take axial slice M[c_t], resize H x W -> S x S and sample
/// each P x P patch at its centre pixel; voxel lattices sample cell centres.
inline std::vector<std::uint8_t> project_mask_to_lattice(const MaskGrid& mask, const LatticeGeometry& geometry,
                                                         std::span<const std::size_t> centers = {}) {
    const auto& s = mask.shape();
    std::vector<std::uint8_t> out(geometry.size(), 0);
    const auto& e = geometry.cells;
    if (geometry.kind == LatticeKind::token) {
        if (centers.size() != geometry.slabs) {
            fail(ErrorKind::geometry, "token lattice has " + std::to_string(geometry.slabs) + " slabs but " +
                                          std::to_string(centers.size()) + " TRI centers were given");
        }
        for (std::size_t t = 0; t < geometry.slabs; ++t) {
            if (centers[t] >= s.d) fail(ErrorKind::geometry, "TRI center outside mask depth");
            for (std::size_t r = 0; r < e.h; ++r) {
                const std::size_t sy = detail::nn_source(detail::patch_center(r, geometry.patch), geometry.side, s.h);
                for (std::size_t c = 0; c < e.w; ++c) {
                    const std::size_t sx =
                        detail::nn_source(detail::patch_center(c, geometry.patch), geometry.side, s.w);
                    out[(t * e.h + r) * e.w + c] = mask.at(centers[t], sy, sx) ? 1 : 0;
                }
            }
        }
        return out;
    }
    for (std::size_t z = 0; z < e.d; ++z) {
        const std::size_t sz = detail::nn_source(z, e.d, s.d);
        for (std::size_t y = 0; y < e.h; ++y) {
            const std::size_t sy = detail::nn_source(y, e.h, s.h);
            for (std::size_t x = 0; x < e.w; ++x) {
                out[(z * e.h + y) * e.w + x] = mask.at(sz, sy, detail::nn_source(x, e.w, s.w)) ? 1 : 0;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

/// Filled tight axis-aligned box over all set elements; empty stays empty.
inline MaskGrid bounding_box_region(const MaskGrid& grid) {
    const auto& s = grid.shape();
    Box3 b{s.d, 0, s.h, 0, s.w, 0};
    bool any = false;
    for (std::size_t z = 0; z < s.d; ++z)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x) {
                if (!grid.at(z, y, x)) continue;
                any = true;
                b.z0 = std::min(b.z0, z), b.z1 = std::max(b.z1, z + 1);
                b.y0 = std::min(b.y0, y), b.y1 = std::max(b.y1, y + 1);
                b.x0 = std::min(b.x0, x), b.x1 = std::max(b.x1, x + 1);
            }
    MaskGrid out(s);
    if (!any) return out;
    for (std::size_t z = b.z0; z < b.z1; ++z)
        for (std::size_t y = b.y0; y < b.y1; ++y)
            for (std::size_t x = b.x0; x < b.x1; ++x) out.at(z, y, x) = 1;
    return out;
}

/// Bounding box over lattice indicators, in lattice coordinates.
inline std::vector<std::uint8_t> bounding_box_region(std::span<const std::uint8_t> indicators,
                                                     const LatticeGeometry& geometry) {
    if (indicators.size() != geometry.size()) fail(ErrorKind::geometry, "indicator count differs from lattice size");
    MaskGrid g(geometry.cells, std::vector<std::uint8_t>(indicators.begin(), indicators.end()));
    return bounding_box_region(g).values();
}

// ---------------------------------------------------------------------------
// Organ scalars: physical volume, clipped mean HU, border contact.

struct RawOrganScalars {
    double volume_mm3 = 0.0;
    double mean_hu = 0.0;  // 0 for an empty mask
    bool border = false;
};

inline bool touches_border(const MaskGrid& mask) {
    const auto& s = mask.shape();
    for (std::size_t z = 0; z < s.d; ++z)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x) {
                if (!mask.at(z, y, x)) continue;
                if (z == 0 || y == 0 || x == 0 || z + 1 == s.d || y + 1 == s.h || x + 1 == s.w) return true;
            }
    return false;
}

/// `mask` is the pooling (dilated) grid mask; `volume_mask`, when given,
/// replaces it for the volume scalar only.
inline RawOrganScalars raw_organ_scalars(const Volume& volume, const MaskGrid& mask,
                                         const MaskGrid* volume_mask = nullptr) {
    if (mask.shape() != volume.shape()) fail(ErrorKind::invalid_input, "mask and volume shapes differ");
    RawOrganScalars r;
    std::size_t n = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        ++n;
        sum += clamp_hu(volume.data[i]);
    }
    r.mean_hu = n ? sum / static_cast<double>(n) : 0.0;
    const MaskGrid& vm = volume_mask ? *volume_mask : mask;
    if (vm.shape() != volume.shape()) fail(ErrorKind::invalid_input, "volume mask and volume shapes differ");
    const auto count = static_cast<double>(std::count_if(vm.values().begin(), vm.values().end(), [](auto v) { return v != 0; }));
    r.volume_mm3 = count * volume.spacing.voxel_volume();
    r.border = touches_border(mask);
    return r;
}

struct OrganStat {
    double volume_mean = 0.0;
    double volume_std = kStdFloor;
    double hu_mean = 0.0;
    double hu_std = kStdFloor;
    bool absent = false;  // organ empty in every training study
};

struct ScalarStats {
    std::vector<std::string> organs;
    std::vector<OrganStat> stats;

    std::string to_text() const {
        std::string s = "# per-organ training statistics for scalar z-scoring\n";
        for (std::size_t o = 0; o < organs.size(); ++o) {
            const auto& st = stats[o];
            s += "[" + organs[o] + "]\n";
            s += "volume_mean = " + format_double(st.volume_mean) + "\n";
            s += "volume_std = " + format_double(st.volume_std) + "\n";
            s += "hu_mean = " + format_double(st.hu_mean) + "\n";
            s += "hu_std = " + format_double(st.hu_std) + "\n";
            s += std::string("absent = ") + (st.absent ? "true" : "false") + "\n";
        }
        return s;
    }

    static ScalarStats parse(std::string_view text) {
        ScalarStats out;
        for (const auto& sec : parse_sections(text, ErrorKind::data)) {
            if (sec.name.empty()) continue;
            std::string body;
            for (const auto& e : sec.entries) body += e.key + " = " + e.value + "\n";
            const KeyValues kv(body);
            OrganStat st;
            st.volume_mean = kv.get_double("volume_mean", 0.0);
            st.volume_std = kv.get_double("volume_std", kStdFloor);
            st.hu_mean = kv.get_double("hu_mean", 0.0);
            st.hu_std = kv.get_double("hu_std", kStdFloor);
            st.absent = kv.get_bool("absent", false);
            out.organs.push_back(sec.name);
            out.stats.push_back(st);
        }
        return out;
    }
};

/// Mean and sample std (n - 1) per organ over training studies, std floored.
/// `per_study[s][o]` holds the raw scalars of organ o in study s.
inline ScalarStats fit_scalar_stats(const std::vector<std::vector<RawOrganScalars>>& per_study,
                                    const std::vector<std::string>& organs) {
    if (per_study.size() < 2) fail(ErrorKind::data, "scalar statistics need at least 2 training studies");
    ScalarStats out;
    out.organs = organs;
    const auto n = static_cast<double>(per_study.size());
    for (std::size_t o = 0; o < organs.size(); ++o) {
        double sv = 0.0, sh = 0.0;
        bool any = false;
        for (const auto& study : per_study) {
            if (study.size() != organs.size()) fail(ErrorKind::data, "study scalar count differs from organ count");
            sv += study[o].volume_mm3;
            sh += study[o].mean_hu;
            any = any || study[o].volume_mm3 > 0.0;
        }
        OrganStat st;
        st.volume_mean = sv / n;
        st.hu_mean = sh / n;
        double vv = 0.0, vh = 0.0;
        for (const auto& study : per_study) {
            vv += (study[o].volume_mm3 - st.volume_mean) * (study[o].volume_mm3 - st.volume_mean);
            vh += (study[o].mean_hu - st.hu_mean) * (study[o].mean_hu - st.hu_mean);
        }
        st.volume_std = std::max(std::sqrt(vv / (n - 1.0)), kStdFloor);
        st.hu_std = std::max(std::sqrt(vh / (n - 1.0)), kStdFloor);
        st.absent = !any;
        out.stats.push_back(st);
    }
    return out;
}

/// u_o = (z-scored volume, z-scored clipped mean HU, border flag).
struct OrganScalars {
    double volume = 0.0;
    double hu = 0.0;
    double border = 0.0;
    bool operator==(const OrganScalars&) const = default;
};

inline OrganScalars zscore_organ_scalars(const RawOrganScalars& raw, const OrganStat& st) {
    return OrganScalars{(raw.volume_mm3 - st.volume_mean) / st.volume_std, (raw.mean_hu - st.hu_mean) / st.hu_std,
                        raw.border ? 1.0 : 0.0};
}

inline OrganScalars compute_organ_scalars(const Volume& volume, const MaskGrid& mask, const OrganStat& stats,
                                          const MaskGrid* volume_mask = nullptr) {
    return zscore_organ_scalars(raw_organ_scalars(volume, mask, volume_mask), stats);
}

}  // namespace organpool
