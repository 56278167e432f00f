// Volume preprocessing, TRI slabs, lattice geometry and the joint
// image/mask rot90/flip augmentation.
#pragma once

#include <array>
#include <optional>
#include <utility>

#include "organpool/core.hpp"

namespace organpool {

inline constexpr double kHuMin = -1000.0;
inline constexpr double kHuMax = 1000.0;

struct Spacing {
    double z = 1.0;
    double y = 1.0;
    double x = 1.0;

    double voxel_volume() const { return z * y * x; }
    bool operator==(const Spacing&) const = default;
};

/// Scalar CT grid with physical spacing in mm. Values are HU until normalized.
struct Volume {
    Grid3<double> data;
    Spacing spacing;

    Volume() = default;
    Volume(Grid3<double> grid, Spacing sp) : data(std::move(grid)), spacing(sp) { validate(); }

    const Shape3& shape() const { return data.shape(); }

    void validate() const {
        const auto& s = data.shape();
        if (s.d < 1 || s.h < 1 || s.w < 1) fail(ErrorKind::invalid_input, "volume dimensions must be >= 1");
        if (!(spacing.z > 0.0 && spacing.y > 0.0 && spacing.x > 0.0)) {
            fail(ErrorKind::invalid_input, "volume spacing components must be > 0");
        }
    }
};

inline double clamp_hu(double v) { return std::clamp(v, kHuMin, kHuMax); }

/// Clamp to [-1000, 1000] HU and map affinely onto [0, 1].
inline Volume clip_normalize_hu(const Volume& volume) {
    Volume out = volume;
    for (auto& v : out.data.values()) {
        if (!std::isfinite(v)) fail(ErrorKind::invalid_input, "non-finite voxel in volume");
        v = (clamp_hu(v) + 1000.0) / 2000.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// TRI slabs. Slice indices are 0-based.

struct TriOptions {
    /// Edge-replicate slices outside [0, D) instead of rejecting the slab.
    bool replicate_pad = false;
};

/// c_t = c1 + stride * t for t in [0, count).
inline std::vector<std::size_t> tri_centers(std::size_t first_center, std::size_t stride, std::size_t count,
                                            std::size_t depth, TriOptions opts = {}) {
    if (stride < 1) fail(ErrorKind::geometry, "TRI stride must be >= 1");
    if (count < 1) fail(ErrorKind::geometry, "TRI slab count must be >= 1");
    std::vector<std::size_t> centers;
    centers.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        const std::size_t c = first_center + stride * t;
        const bool in_bounds = opts.replicate_pad ? c < depth : (c >= 1 && c + 1 < depth);
        if (!in_bounds) {
            fail(ErrorKind::geometry, "TRI slab t=" + std::to_string(t) + " (center " + std::to_string(c) +
                                          ") falls outside depth " + std::to_string(depth));
        }
        centers.push_back(c);
    }
    return centers;
}

/// Stack slices (center-1, center, center+1) as a 3 x H x W grid.
inline Grid3<double> extract_tri(const Volume& volume, std::size_t center, TriOptions opts = {}) {
    const auto& s = volume.shape();
    if (!opts.replicate_pad && (center < 1 || center + 1 >= s.d)) {
        fail(ErrorKind::geometry, "TRI center " + std::to_string(center) + " needs slices on both sides (depth " +
                                      std::to_string(s.d) + ")");
    }
    if (center >= s.d) fail(ErrorKind::geometry, "TRI center outside volume");
    Grid3<double> slab(Shape3{3, s.h, s.w});
    for (std::size_t k = 0; k < 3; ++k) {
        const long z = static_cast<long>(center) + static_cast<long>(k) - 1;
        const auto zc = static_cast<std::size_t>(std::clamp(z, 0L, static_cast<long>(s.d) - 1));
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x) slab.at(k, y, x) = volume.data.at(zc, y, x);
    }
    return slab;
}

// ---------------------------------------------------------------------------
// Lattice geometry. Token lattices are raster-ordered (t, row, col), voxel
// lattices (z, y, x); both flatten slice-major, row-major.

enum class LatticeKind { token, voxel };

struct LatticeGeometry {
    LatticeKind kind = LatticeKind::voxel;
    std::size_t slabs = 0;  // T
    std::size_t side = 0;   // S
    std::size_t patch = 0;  // P
    Shape3 cells;           // (T, g, g) for tokens, (D', H', W') for voxels

    static LatticeGeometry token(std::size_t slabs, std::size_t side, std::size_t patch) {
        if (slabs < 1 || side < 1 || patch < 1) fail(ErrorKind::geometry, "token geometry parameters must be >= 1");
        if (side % patch != 0) {
            fail(ErrorKind::geometry, "resize side " + std::to_string(side) + " is not a multiple of patch " +
                                          std::to_string(patch));
        }
        const std::size_t g = side / patch;
        return LatticeGeometry{LatticeKind::token, slabs, side, patch, Shape3{slabs, g, g}};
    }

    static LatticeGeometry voxel(Shape3 cells) {
        if (cells.d < 1 || cells.h < 1 || cells.w < 1) fail(ErrorKind::geometry, "voxel lattice dims must be >= 1");
        return LatticeGeometry{LatticeKind::voxel, 0, 0, 0, cells};
    }

    std::size_t grid_side() const { return kind == LatticeKind::token ? side / patch : 0; }
    std::size_t tokens_per_slab() const { return cells.h * cells.w; }
    std::size_t size() const { return cells.size(); }

    bool operator==(const LatticeGeometry&) const = default;
};

/// (t, row, col) for tokens, (z, y, x) for voxels.
struct LatticeCoord {
    std::size_t a = 0;
    std::size_t b = 0;
    std::size_t c = 0;
    bool operator==(const LatticeCoord&) const = default;
};

inline std::size_t flatten_index(const LatticeGeometry& g, LatticeCoord coord) {
    const auto& e = g.cells;
    if (coord.a >= e.d || coord.b >= e.h || coord.c >= e.w) {
        fail(ErrorKind::index, "lattice coordinate (" + std::to_string(coord.a) + "," + std::to_string(coord.b) + "," +
                                   std::to_string(coord.c) + ") outside " + to_string(e));
    }
    return (coord.a * e.h + coord.b) * e.w + coord.c;
}

inline LatticeCoord unflatten_index(const LatticeGeometry& g, std::size_t i) {
    const auto& e = g.cells;
    if (i >= e.size()) fail(ErrorKind::index, "lattice index " + std::to_string(i) + " >= " + std::to_string(e.size()));
    const std::size_t plane = e.h * e.w;
    return LatticeCoord{i / plane, (i % plane) / e.w, i % e.w};
}

/// Half-open voxel box [z0,z1) x [y0,y1) x [x0,x1).
struct Box3 {
    std::size_t z0 = 0, z1 = 0, y0 = 0, y1 = 0, x0 = 0, x1 = 0;
    bool operator==(const Box3&) const = default;
};

/// Source region of lattice cell i in volume coordinates. For tokens the
/// region spans the TRI slab around its center and the patch footprint
/// mapped back from the S x S resize.
inline Box3 source_region(const LatticeGeometry& g, std::size_t i, Shape3 volume,
                          std::span<const std::size_t> centers = {}) {
    const auto c = unflatten_index(g, i);
    auto span_of = [](std::size_t cell, std::size_t cells, std::size_t extent) {
        return std::pair{cell * extent / cells, std::max((cell + 1) * extent / cells, cell * extent / cells + 1)};
    };
    if (g.kind == LatticeKind::voxel) {
        auto [z0, z1] = span_of(c.a, g.cells.d, volume.d);
        auto [y0, y1] = span_of(c.b, g.cells.h, volume.h);
        auto [x0, x1] = span_of(c.c, g.cells.w, volume.w);
        return Box3{z0, z1, y0, y1, x0, x1};
    }
    if (c.a >= centers.size()) fail(ErrorKind::geometry, "token slab has no TRI center");
    const std::size_t center = centers[c.a];
    auto [y0, y1] = span_of(c.b, g.cells.h, volume.h);
    auto [x0, x1] = span_of(c.c, g.cells.w, volume.w);
    return Box3{center == 0 ? 0 : center - 1, std::min(center + 2, volume.d), y0, y1, x0, x1};
}

/// Per-study local features: one row of d values per lattice cell.
struct FeatureLattice {
    LatticeGeometry geometry;
    Matrix features;

    FeatureLattice() = default;
    FeatureLattice(LatticeGeometry g, Matrix f) : geometry(g), features(std::move(f)) { validate(); }

    std::size_t dim() const { return features.cols(); }

    void validate() const {
        if (features.rows() != geometry.size()) {
            fail(ErrorKind::invalid_input, "feature rows " + std::to_string(features.rows()) +
                                               " != lattice size " + std::to_string(geometry.size()));
        }
        if (!all_finite(features.values())) fail(ErrorKind::invalid_input, "non-finite feature value");
    }
};

// ---------------------------------------------------------------------------
// Joint rot90 / flip augmentation.

struct AugmentParams {
    int rot90 = 0;  // in-plane quarter turns, counter-clockwise
    bool flip_d = false;
    bool flip_h = false;
    bool flip_w = false;

    bool is_identity() const { return rot90 % 4 == 0 && !flip_d && !flip_h && !flip_w; }
};

/// Rotate the (H, W) plane by k quarter turns, then apply per-axis flips.
/// Odd k swaps H and W.
template <typename T>
Grid3<T> rot90_flip(const Grid3<T>& in, const AugmentParams& p) {
    const int k = ((p.rot90 % 4) + 4) % 4;
    const auto& s = in.shape();
    const Shape3 os = (k % 2 == 1) ? Shape3{s.d, s.w, s.h} : s;
    Grid3<T> out(os);
    for (std::size_t z = 0; z < os.d; ++z) {
        for (std::size_t i = 0; i < os.h; ++i) {
            for (std::size_t j = 0; j < os.w; ++j) {
                std::size_t sy = i, sx = j;
                switch (k) {
                    case 1: sy = j; sx = s.w - 1 - i; break;
                    case 2: sy = s.h - 1 - i; sx = s.w - 1 - j; break;
                    case 3: sy = s.h - 1 - j; sx = i; break;
                    default: break;
                }
                const std::size_t dz = p.flip_d ? os.d - 1 - z : z;
                const std::size_t dy = p.flip_h ? os.h - 1 - i : i;
                const std::size_t dx = p.flip_w ? os.w - 1 - j : j;
                out.at(dz, dy, dx) = in.at(z, sy, sx);
            }
        }
    }
    return out;
}

struct AugmentedPair {
    Volume volume;
    std::vector<MaskGrid> masks;
};

inline AugmentedPair joint_rot90_flip(const Volume& volume, std::span<const MaskGrid> masks, const AugmentParams& p) {
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i].shape() != volume.shape()) {
            fail(ErrorKind::invalid_input, "mask " + std::to_string(i) + " shape " + to_string(masks[i].shape()) +
                                               " differs from volume " + to_string(volume.shape()));
        }
    }
    AugmentedPair out;
    out.volume.data = rot90_flip(volume.data, p);
    out.volume.spacing = volume.spacing;
    if (((p.rot90 % 4) + 4) % 2 == 1) std::swap(out.volume.spacing.y, out.volume.spacing.x);
    out.masks.reserve(masks.size());
    for (const auto& m : masks) out.masks.push_back(rot90_flip(m, p));
    return out;
}

/// legacy_v1 preset: any quarter turn (even turns only for non-square
/// planes, so the lattice shape is kept) and independent axis flips.
inline AugmentParams sample_legacy_v1(CounterRng& rng, Shape3 shape) {
    AugmentParams p;
    p.rot90 = static_cast<int>(rng.below(4));
    if (shape.h != shape.w) p.rot90 = (p.rot90 / 2) * 2;
    p.flip_d = rng.bernoulli(0.5);
    p.flip_h = rng.bernoulli(0.5);
    p.flip_w = rng.bernoulli(0.5);
    return p;
}

}  // namespace organpool
