// Little-endian binary files: OCTV1 volumes, OCTM1 masks, OCTF1 feature
// lattices, and OPCK1 head checkpoints.
#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "organpool/heads.hpp"

namespace organpool {

static_assert(std::endian::native == std::endian::little, "binary I/O assumes a little-endian host");

class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes_.append(p, sizeof(T));
    }
    void put_bytes(std::string_view s) { bytes_.append(s); }
    void put_string(std::string_view s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes_.append(s);
    }
    const std::string& bytes() const { return bytes_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) fail(ErrorKind::data, "cannot write '" + path + "'");
        out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
        if (!out) fail(ErrorKind::data, "short write to '" + path + "'");
    }

private:
    std::string bytes_;
};

class ByteReader {
public:
    ByteReader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

    static ByteReader open(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(ErrorKind::data, "cannot open '" + path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return ByteReader(ss.str(), path);
    }

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string get_string() { return get_bytes(get<std::uint32_t>()); }

    void expect_magic(std::string_view magic) {
        if (get_bytes(magic.size()) != magic) fail(ErrorKind::data, origin_ + ": bad magic, expected " + std::string(magic));
    }
    void expect_end() const {
        if (pos_ != bytes_.size()) fail(ErrorKind::data, origin_ + ": trailing bytes after payload");
    }
    const std::string& origin() const { return origin_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) fail(ErrorKind::data, origin_ + ": truncated file");
    }

    std::string bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

namespace detail {

inline void put_shape(ByteWriter& w, const Shape3& s) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.d));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.h));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.w));
}

inline Shape3 get_shape(ByteReader& r) {
    Shape3 s;
    s.d = r.get<std::uint32_t>();
    s.h = r.get<std::uint32_t>();
    s.w = r.get<std::uint32_t>();
    if (s.d == 0 || s.h == 0 || s.w == 0) fail(ErrorKind::data, r.origin() + ": zero-sized dimension");
    return s;
}

inline void expect_version(ByteReader& r) {
    const auto v = r.get<std::uint32_t>();
    if (v != 1) fail(ErrorKind::data, r.origin() + ": unsupported version " + std::to_string(v));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// OCTV1: magic, version, D/H/W, spacing (z, y, x) as f32, dtype 0 = f32.

inline std::string encode_volume(const Volume& v) {
    ByteWriter w;
    w.put_bytes("OCTV");
    w.put<std::uint32_t>(1);
    detail::put_shape(w, v.shape());
    w.put<float>(static_cast<float>(v.spacing.z));
    w.put<float>(static_cast<float>(v.spacing.y));
    w.put<float>(static_cast<float>(v.spacing.x));
    w.put<std::uint8_t>(0);
    for (double x : v.data.values()) w.put<float>(static_cast<float>(x));
    return w.bytes();
}

inline Volume decode_volume(ByteReader r) {
    r.expect_magic("OCTV");
    detail::expect_version(r);
    const Shape3 s = detail::get_shape(r);
    Spacing sp;
    sp.z = r.get<float>();
    sp.y = r.get<float>();
    sp.x = r.get<float>();
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 0) fail(ErrorKind::data, r.origin() + ": unsupported volume dtype " + std::to_string(dtype));
    Grid3<double> g(s);
    for (auto& x : g.values()) x = r.get<float>();
    r.expect_end();
    try {
        return Volume(std::move(g), sp);
    } catch (const Error& e) {
        fail(ErrorKind::data, r.origin() + ": " + e.detail());
    }
}

inline void write_volume(const std::string& path, const Volume& v) {
    ByteWriter w;
    w.put_bytes(encode_volume(v));
    w.save(path);
}
inline Volume read_volume(const std::string& path) { return decode_volume(ByteReader::open(path)); }

// ---------------------------------------------------------------------------
// OCTM1: magic, version, D/H/W, dtype (0 = u8 per organ, 1 = u16 class ids),
// organ count u16, per-organ id u16, payload (organ-major for dtype 0).

struct MaskFile {
    Shape3 shape;
    std::vector<std::uint16_t> organ_ids;
    std::vector<MaskGrid> organs;  // dtype 0
    std::optional<ClassGrid> classes;  // dtype 1
};

inline std::string encode_organ_masks(const std::vector<MaskGrid>& organs, const std::vector<std::uint16_t>& ids) {
    if (organs.empty() || ids.size() != organs.size()) fail(ErrorKind::invalid_input, "organ mask set and id table differ");
    ByteWriter w;
    w.put_bytes("OCTM");
    w.put<std::uint32_t>(1);
    detail::put_shape(w, organs.front().shape());
    w.put<std::uint8_t>(0);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(organs.size()));
    for (auto id : ids) w.put<std::uint16_t>(id);
    for (const auto& m : organs) {
        if (m.shape() != organs.front().shape()) fail(ErrorKind::invalid_input, "organ masks differ in shape");
        for (auto v : m.values()) w.put<std::uint8_t>(v ? 1 : 0);
    }
    return w.bytes();
}

inline std::string encode_class_grid(const ClassGrid& classes) {
    ByteWriter w;
    w.put_bytes("OCTM");
    w.put<std::uint32_t>(1);
    detail::put_shape(w, classes.shape());
    w.put<std::uint8_t>(1);
    w.put<std::uint16_t>(0);
    for (auto v : classes.values()) w.put<std::uint16_t>(v);
    return w.bytes();
}

inline MaskFile decode_masks(ByteReader r) {
    r.expect_magic("OCTM");
    detail::expect_version(r);
    MaskFile f;
    f.shape = detail::get_shape(r);
    const auto dtype = r.get<std::uint8_t>();
    const auto count = r.get<std::uint16_t>();
    for (std::uint16_t i = 0; i < count; ++i) f.organ_ids.push_back(r.get<std::uint16_t>());
    if (dtype == 0) {
        for (std::uint16_t o = 0; o < count; ++o) {
            MaskGrid m(f.shape);
            for (auto& v : m.values()) {
                v = r.get<std::uint8_t>();
                if (v > 1) fail(ErrorKind::data, r.origin() + ": mask value outside {0,1}");
            }
            f.organs.push_back(std::move(m));
        }
    } else if (dtype == 1) {
        ClassGrid c(f.shape);
        for (auto& v : c.values()) v = r.get<std::uint16_t>();
        f.classes = std::move(c);
    } else {
        fail(ErrorKind::data, r.origin() + ": unsupported mask dtype " + std::to_string(dtype));
    }
    r.expect_end();
    return f;
}

inline void write_bytes(const std::string& path, const std::string& bytes) {
    ByteWriter w;
    w.put_bytes(bytes);
    w.save(path);
}
inline MaskFile read_masks(const std::string& path) { return decode_masks(ByteReader::open(path)); }

// ---------------------------------------------------------------------------
// OCTF1 feature lattice: magic, version, kind u8, slabs/side/patch u32,
// cells D/H/W u32, d u32, f64 rows.

inline std::string encode_features(const FeatureLattice& f) {
    ByteWriter w;
    w.put_bytes("OCTF");
    w.put<std::uint32_t>(1);
    const auto& g = f.geometry;
    w.put<std::uint8_t>(g.kind == LatticeKind::token ? 1 : 0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.slabs));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.side));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.patch));
    detail::put_shape(w, g.cells);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.dim()));
    for (double v : f.features.values()) w.put<double>(v);
    return w.bytes();
}

inline FeatureLattice decode_features(ByteReader r) {
    r.expect_magic("OCTF");
    detail::expect_version(r);
    const auto kind = r.get<std::uint8_t>();
    const std::size_t slabs = r.get<std::uint32_t>();
    const std::size_t side = r.get<std::uint32_t>();
    const std::size_t patch = r.get<std::uint32_t>();
    const Shape3 cells = detail::get_shape(r);
    const std::size_t d = r.get<std::uint32_t>();
    try {
        LatticeGeometry g = kind == 1 ? LatticeGeometry::token(slabs, side, patch) : LatticeGeometry::voxel(cells);
        if (g.cells != cells) fail(ErrorKind::data, "token geometry disagrees with stored cell shape");
        std::vector<double> v(g.size() * d);
        for (auto& x : v) x = r.get<double>();
        r.expect_end();
        return FeatureLattice(g, Matrix(g.size(), d, std::move(v)));
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::data) throw;
        fail(ErrorKind::data, r.origin() + ": " + e.detail());
    }
}

inline FeatureLattice read_features(const std::string& path) { return decode_features(ByteReader::open(path)); }

// ---------------------------------------------------------------------------
// OPCK1 checkpoint: magic, version, mode tag, schema hash, head config as
// key = value text, then named f64 tensors with shapes.

inline std::string head_config_text(const HeadConfig& c) {
    std::string out;
    auto line = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
    auto join = [](const std::vector<std::size_t>& v) {
        std::string s;
        for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
        return s;
    };
    line("mode", to_string(c.mode));
    line("dim", std::to_string(c.dim));
    line("label_count", std::to_string(c.label_count));
    line("organ_count", std::to_string(c.organ_count()));
    for (std::size_t o = 0; o < c.organ_count(); ++o) {
        line("organ." + std::to_string(o) + ".name", c.organ_names[o]);
        line("organ." + std::to_string(o) + ".labels", join(c.organ_labels[o]));
    }
    line("other_labels", join(c.other_labels));
    line("scalars", scalar_set_string(c.scalars));
    line("osf_head", c.osf_head == OsfHead::mlp ? "mlp" : "affine");
    line("epsilon", format_double(c.epsilon));
    line("encoder_inputs", std::to_string(c.encoder_inputs));
    return out;
}

inline HeadConfig parse_head_config(std::string_view text) {
    const KeyValues kv(text);
    auto indices = [](const std::string& s) {
        std::vector<std::size_t> v;
        if (s.empty()) return v;
        for (const auto& tok : split(s, ',')) v.push_back(static_cast<std::size_t>(std::stoul(tok)));
        return v;
    };
    HeadConfig c;
    c.mode = parse_head_mode(kv.get("mode", ""));
    c.dim = static_cast<std::size_t>(kv.get_int("dim", 0));
    c.label_count = static_cast<std::size_t>(kv.get_int("label_count", 0));
    const long organs = kv.get_int("organ_count", 0);
    for (long o = 0; o < organs; ++o) {
        c.organ_names.push_back(kv.get("organ." + std::to_string(o) + ".name", ""));
        c.organ_labels.push_back(indices(kv.get("organ." + std::to_string(o) + ".labels", "")));
    }
    c.other_labels = indices(kv.get("other_labels", ""));
    c.scalars = parse_scalar_set(kv.get("scalars", "none"));
    c.osf_head = kv.get("osf_head", "affine") == "mlp" ? OsfHead::mlp : OsfHead::affine;
    c.epsilon = kv.get_double("epsilon", 1e-12);
    c.encoder_inputs = static_cast<std::size_t>(kv.get_int("encoder_inputs", 0));
    c.validate();
    return c;
}

inline std::string encode_checkpoint(const HeadParams& p, std::uint64_t schema_hash) {
    ByteWriter w;
    w.put_bytes("OPCK");
    w.put<std::uint32_t>(1);
    w.put_string(to_string(p.config.mode));
    w.put<std::uint64_t>(schema_hash);
    w.put_string(head_config_text(p.config));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensors.size()));
    for (const auto& t : p.tensors) {
        w.put_string(t.name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
        for (auto s : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(s));
        for (double v : t.values) w.put<double>(v);
    }
    return w.bytes();
}

struct Checkpoint {
    HeadParams params;
    std::uint64_t schema_hash = 0;
};

/// Refuses to load when `expected_schema_hash` is given and differs.
inline Checkpoint decode_checkpoint(ByteReader r, std::optional<std::uint64_t> expected_schema_hash = std::nullopt) {
    r.expect_magic("OPCK");
    detail::expect_version(r);
    const std::string mode = r.get_string();
    Checkpoint ck;
    ck.schema_hash = r.get<std::uint64_t>();
    if (expected_schema_hash && *expected_schema_hash != ck.schema_hash) {
        fail(ErrorKind::schema, r.origin() + ": checkpoint was trained against a different label schema");
    }
    HeadConfig cfg = parse_head_config(r.get_string());
    if (mode != to_string(cfg.mode)) fail(ErrorKind::data, r.origin() + ": mode tag disagrees with stored config");
    ck.params = HeadParams(cfg);
    const auto count = r.get<std::uint32_t>();
    if (count != ck.params.tensors.size()) {
        fail(ErrorKind::data, r.origin() + ": expected " + std::to_string(ck.params.tensors.size()) + " tensors, found " +
                                  std::to_string(count));
    }
    for (auto& t : ck.params.tensors) {
        const std::string name = r.get_string();
        if (name != t.name) fail(ErrorKind::data, r.origin() + ": expected tensor '" + t.name + "', found '" + name + "'");
        const auto rank = r.get<std::uint32_t>();
        std::vector<std::size_t> shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint32_t>());
        if (shape != t.shape) fail(ErrorKind::data, r.origin() + ": shape mismatch for tensor '" + name + "'");
        for (auto& v : t.values) v = r.get<double>();
    }
    r.expect_end();
    return ck;
}

inline void write_checkpoint(const std::string& path, const HeadParams& p, std::uint64_t schema_hash) {
    write_bytes(path, encode_checkpoint(p, schema_hash));
}

inline Checkpoint read_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_schema_hash = std::nullopt) {
    return decode_checkpoint(ByteReader::open(path), expected_schema_hash);
}

}  // namespace organpool
